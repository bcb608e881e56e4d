"""Sample schema, annotation-file I/O and the synthetic verification corpus.

A dataset root holds one JSON-lines annotation file per split
(``<root>/<split>.jsonl``) plus an ``images/`` directory with the rasters.
Synthetic corpora are emitted in the same format together with a
``spec.json`` sidecar recording the generator spec and seed per split.
"""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import ConfigError, GenerationError, LoadError, ValidationError

logger = logging.getLogger(__name__)

BOUNDS_EPS = 1e-6

# Palette values are exact multiples of 1/255 so rendered rasters survive a
# PNG round trip bit-for-bit.
PALETTE = {
    "red": (255, 0, 0),
    "green": (0, 160, 0),
    "blue": (0, 0, 255),
    "yellow": (255, 215, 0),
    "purple": (150, 0, 200),
    "orange": (255, 140, 0),
    "cyan": (0, 200, 200),
}

SHAPES = ("circle", "square", "triangle")
LAYOUTS = ("scatter", "cluster", "grid")

LAYOUT_PHRASES = {
    "scatter": "scattered on a plain background",
    "cluster": "clustered together on a plain background",
    "grid": "arranged in a grid on a plain background",
}


class PromptKind(str, Enum):
    NULL = "null"
    CLASS_NAME = "class_name"
    QUESTION = "question"
    FINE_GRAINED = "fine_grained"


@dataclass
class BBox:
    """Normalized exemplar rectangle; (x, y) is the top-left corner.

    Field order follows the regression target layout (x, y, h, w): x/w are
    fractions of image width, y/h fractions of image height.
    """

    x: float
    y: float
    h: float
    w: float

    def as_tuple(self):
        return (self.x, self.y, self.h, self.w)

    def clamped(self) -> "BBox":
        x = min(max(self.x, 0.0), 1.0)
        y = min(max(self.y, 0.0), 1.0)
        h = min(max(self.h, 0.0), 1.0 - y)
        w = min(max(self.w, 0.0), 1.0 - x)
        return BBox(x=x, y=y, h=h, w=w)

    def is_valid(self) -> bool:
        vals = self.as_tuple()
        if not all(0.0 <= v <= 1.0 for v in vals):
            return False
        return self.x + self.w <= 1.0 + BOUNDS_EPS and self.y + self.h <= 1.0 + BOUNDS_EPS

    def iou(self, other: "BBox") -> float:
        ax0, ay0, ax1, ay1 = self.x, self.y, self.x + self.w, self.y + self.h
        bx0, by0, bx1, by1 = other.x, other.y, other.x + other.w, other.y + other.h
        iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
        ih = max(0.0, min(ay1, by1) - max(ay0, by0))
        inter = iw * ih
        union = self.w * self.h + other.w * other.h - inter
        if union <= 0.0:
            return 0.0
        return inter / union


@dataclass
class ExpressionAnnotation:
    text: str
    prompt_kind: PromptKind
    class_name: str = ""

    def validate(self):
        if self.prompt_kind == PromptKind.NULL and self.text != "":
            raise ValidationError("expression must be empty for prompt_kind=null")
        if self.prompt_kind != PromptKind.NULL and not self.text:
            raise ValidationError("expression must be non-empty for prompt_kind=%s" % self.prompt_kind.value)


@dataclass
class SceneSample:
    """One image plus its expression, ground-truth exemplar boxes and count."""

    image: np.ndarray  # H x W x 3 float32 in [0, 1]
    annotation: ExpressionAnnotation
    exemplar_boxes: list[BBox]
    count: int
    sample_id: str
    points: Optional[list[tuple[float, float]]] = None  # (row, col) centroids

    def validate(self):
        sid = self.sample_id
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValidationError(f"sample {sid}: image must be HxWx3")
        if self.count < 0:
            raise ValidationError(f"sample {sid}: field 'count' must be non-negative")
        if not self.exemplar_boxes:
            raise ValidationError(f"sample {sid}: field 'exemplar_boxes' must hold at least one box")
        if self.count < len(self.exemplar_boxes):
            raise ValidationError(f"sample {sid}: field 'count' smaller than number of exemplar boxes")
        for box in self.exemplar_boxes:
            if not box.is_valid():
                raise ValidationError(f"sample {sid}: field 'exemplar_boxes' contains an out-of-bounds box")
        if self.points is not None and len(self.points) != self.count:
            raise ValidationError(f"sample {sid}: field 'points' length must equal count")
        self.annotation.validate()


@dataclass
class SyntheticSpec:
    """Generator spec; identical (spec, seed) yields byte-identical samples."""

    canvas_size: int = 128
    shape_classes: list[tuple[str, str]] = field(default_factory=lambda: [("circle", "red")])
    instances_per_class: tuple[int, int] = (3, 8)
    size_range: tuple[float, float] = (10.0, 18.0)
    seed: int = 0
    layout: str = "scatter"
    prompt_kind: PromptKind = PromptKind.FINE_GRAINED

    def validate(self):
        if self.canvas_size < 16:
            raise ValidationError("canvas_size too small")
        if not self.shape_classes:
            raise ValidationError("shape_classes must be non-empty")
        colors = [c for _, c in self.shape_classes]
        if len(set(colors)) != len(colors):
            raise ValidationError("class colors must be distinct")
        for shape, color in self.shape_classes:
            if shape not in SHAPES:
                raise ValidationError(f"unknown shape {shape!r}")
            if color not in PALETTE:
                raise ValidationError(f"unknown color {color!r}")
        lo, hi = self.instances_per_class
        if lo < 1 or hi < lo:
            raise ValidationError("instances_per_class must satisfy 1 <= min <= max")
        if self.size_range[0] < 3 or self.size_range[1] < self.size_range[0]:
            raise ValidationError("size_range must satisfy 3 <= min <= max")
        if self.size_range[1] >= self.canvas_size:
            raise ValidationError("shapes must fit inside the canvas")
        if self.layout not in LAYOUTS:
            raise ValidationError(f"unknown layout {self.layout!r}")
        if not isinstance(self.prompt_kind, PromptKind):
            raise ValidationError("prompt_kind must be a PromptKind")

    def to_dict(self) -> dict:
        return {
            "canvas_size": self.canvas_size,
            "shape_classes": [list(sc) for sc in self.shape_classes],
            "instances_per_class": list(self.instances_per_class),
            "size_range": list(self.size_range),
            "seed": self.seed,
            "layout": self.layout,
            "prompt_kind": self.prompt_kind.value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        spec = cls(
            canvas_size=int(d["canvas_size"]),
            shape_classes=[tuple(sc) for sc in d["shape_classes"]],
            instances_per_class=tuple(d["instances_per_class"]),
            size_range=tuple(d["size_range"]),
            seed=int(d["seed"]),
            layout=d["layout"],
            prompt_kind=PromptKind(d.get("prompt_kind", "fine_grained")),
        )
        spec.validate()
        return spec


@dataclass
class SceneGeometry:
    """Internal scene description handed to the expression renderer."""

    classes: list[tuple[str, str]]  # (shape, color) per class
    counts: list[int]
    target_index: int
    layout: str

    @property
    def target_shape(self) -> str:
        return self.classes[self.target_index][0]

    @property
    def target_color(self) -> str:
        return self.classes[self.target_index][1]

    @property
    def target_count(self) -> int:
        return self.counts[self.target_index]


def pluralize(noun: str) -> str:
    if noun.endswith(("s", "x", "ch", "sh")):
        return noun + "es"
    return noun + "s"


def quantifier(count: int) -> str:
    if count <= 1:
        return "a"
    if count <= 4:
        return "a few"
    if count <= 9:
        return "a bunch of"
    return "a pile of"


def render_expression(geometry: SceneGeometry, prompt_kind: PromptKind) -> ExpressionAnnotation:
    """Produce the expression for a scene under the requested prompt kind."""
    shape = geometry.target_shape
    if prompt_kind == PromptKind.NULL:
        return ExpressionAnnotation(text="", prompt_kind=prompt_kind, class_name=shape)
    if prompt_kind == PromptKind.CLASS_NAME:
        return ExpressionAnnotation(text=shape, prompt_kind=prompt_kind, class_name=shape)
    if prompt_kind == PromptKind.QUESTION:
        text = f"What is the number of the {pluralize(shape)}?"
        return ExpressionAnnotation(text=text, prompt_kind=prompt_kind, class_name=shape)
    if prompt_kind == PromptKind.FINE_GRAINED:
        count = geometry.target_count
        noun = shape if count == 1 else pluralize(shape)
        text = f"{quantifier(count)} {geometry.target_color} {noun} {LAYOUT_PHRASES[geometry.layout]}"
        return ExpressionAnnotation(text=text, prompt_kind=prompt_kind, class_name=shape)
    raise ValidationError(f"unknown prompt_kind {prompt_kind!r}")


# ---------------------------------------------------------------------------
# Synthetic scene rendering


@dataclass
class _Instance:
    shape: str
    color: str
    class_index: int
    cy: float
    cx: float
    size: float


def _effective_radius(shape: str, size: float) -> float:
    if shape == "circle":
        return size / 2.0
    if shape == "square":
        return size / math.sqrt(2.0)
    return size / math.sqrt(3.0)  # triangle circumradius


def instance_mask(inst: _Instance, canvas: int) -> np.ndarray:
    """Boolean occupancy mask of one instance on the canvas."""
    yy, xx = np.mgrid[0:canvas, 0:canvas].astype(np.float64)
    yy += 0.5
    xx += 0.5
    cy, cx, s = inst.cy, inst.cx, inst.size
    if inst.shape == "circle":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= (s / 2.0) ** 2
    if inst.shape == "square":
        return np.maximum(np.abs(yy - cy), np.abs(xx - cx)) <= s / 2.0
    # upward equilateral triangle with side s centred at its centroid
    circum = s / math.sqrt(3.0)
    inr = s / (2.0 * math.sqrt(3.0))
    v0 = (cx, cy - circum)
    v1 = (cx - s / 2.0, cy + inr)
    v2 = (cx + s / 2.0, cy + inr)

    def half_plane(a, b):
        return (b[0] - a[0]) * (yy - a[1]) - (b[1] - a[1]) * (xx - a[0])

    d0 = half_plane(v0, v1)
    d1 = half_plane(v1, v2)
    d2 = half_plane(v2, v0)
    return (d0 <= 0) & (d1 <= 0) & (d2 <= 0)


def _mask_bbox(mask: np.ndarray) -> BBox:
    ys, xs = np.nonzero(mask)
    h_img, w_img = mask.shape
    y0, y1 = int(ys.min()), int(ys.max())
    x0, x1 = int(xs.min()), int(xs.max())
    return BBox(x=x0 / w_img, y=y0 / h_img, h=(y1 - y0 + 1) / h_img, w=(x1 - x0 + 1) / w_img)


def _place_instances(spec: SyntheticSpec, counts: list[int], rng: np.random.Generator) -> list[_Instance]:
    canvas = spec.canvas_size
    placed: list[_Instance] = []
    order = [(ci, spec.shape_classes[ci]) for ci in range(len(spec.shape_classes)) for _ in range(counts[ci])]

    if spec.layout == "grid":
        cell = spec.size_range[1] + 2.0
        per_side = int(canvas // cell)
        if per_side * per_side < len(order):
            raise GenerationError(f"grid layout cannot hold {len(order)} instances for spec {spec.to_dict()}")
        cells = [(r, c) for r in range(per_side) for c in range(per_side)]
        idx = rng.permutation(len(cells))[: len(order)]
        for (ci, (shape, color)), cell_i in zip(order, idx):
            r, c = cells[int(cell_i)]
            size = float(rng.uniform(*spec.size_range))
            jitter = (cell - size) / 2.0 - 1.0
            cy = (r + 0.5) * cell + float(rng.uniform(-1, 1)) * max(jitter, 0.0)
            cx = (c + 0.5) * cell + float(rng.uniform(-1, 1)) * max(jitter, 0.0)
            placed.append(_Instance(shape, color, ci, cy, cx, size))
        return placed

    cluster_centers = None
    if spec.layout == "cluster":
        cluster_centers = []
        for _ in spec.shape_classes:
            cluster_centers.append(
                (float(rng.uniform(canvas * 0.25, canvas * 0.75)), float(rng.uniform(canvas * 0.25, canvas * 0.75)))
            )

    for ci, (shape, color) in order:
        size = float(rng.uniform(*spec.size_range))
        radius = _effective_radius(shape, size)
        lo = radius + 1.0
        hi = canvas - radius - 1.0
        if hi <= lo:
            raise GenerationError(f"canvas too small for instance size in spec {spec.to_dict()}")
        ok = False
        for _ in range(200):
            if spec.layout == "cluster":
                ccy, ccx = cluster_centers[ci]
                cy = float(np.clip(rng.normal(ccy, canvas / 8.0), lo, hi))
                cx = float(np.clip(rng.normal(ccx, canvas / 8.0), lo, hi))
            else:
                cy = float(rng.uniform(lo, hi))
                cx = float(rng.uniform(lo, hi))
            if all(
                math.hypot(cy - p.cy, cx - p.cx) > radius + _effective_radius(p.shape, p.size) + 1.0
                for p in placed
            ):
                ok = True
                break
        if not ok:
            raise GenerationError(f"could not place instance without overlap for spec {spec.to_dict()}")
        placed.append(_Instance(shape, color, ci, cy, cx, size))
    return placed


def _render(instances: Sequence[_Instance], canvas: int) -> tuple[np.ndarray, list[np.ndarray]]:
    image = np.ones((canvas, canvas, 3), dtype=np.float32)
    masks = []
    for inst in instances:
        mask = instance_mask(inst, canvas)
        color = np.array(PALETTE[inst.color], dtype=np.float32) / 255.0
        image[mask] = color
        masks.append(mask)
    return image, masks


def generate_synthetic(spec: SyntheticSpec, n_samples: int) -> list[SceneSample]:
    """Deterministically generate `n_samples` scenes from `spec`.

    Each sample gets its own RNG stream keyed by (spec.seed, index), so the
    function is pure and per-sample generation is order-independent.
    """
    spec.validate()
    if n_samples < 1:
        raise ValidationError("n_samples must be >= 1")
    samples = []
    for i in range(n_samples):
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, i]))
        n_classes = len(spec.shape_classes)
        target_index = int(rng.integers(n_classes))
        lo, hi = spec.instances_per_class
        counts = [int(rng.integers(lo, hi + 1)) for _ in range(n_classes)]
        instances = _place_instances(spec, counts, rng)
        image, masks = _render(instances, spec.canvas_size)

        target_ids = [k for k, inst in enumerate(instances) if inst.class_index == target_index]
        chosen = int(rng.integers(len(target_ids)))
        exemplar_order = [target_ids[chosen]] + [k for j, k in enumerate(target_ids) if j != chosen]
        boxes = [_mask_bbox(masks[k]).clamped() for k in exemplar_order[: min(3, len(exemplar_order))]]

        points = []
        for k in target_ids:
            ys, xs = np.nonzero(masks[k])
            points.append((float(ys.mean()), float(xs.mean())))

        geometry = SceneGeometry(
            classes=list(spec.shape_classes), counts=counts, target_index=target_index, layout=spec.layout
        )
        annotation = render_expression(geometry, spec.prompt_kind)
        sample = SceneSample(
            image=image,
            annotation=annotation,
            exemplar_boxes=boxes,
            count=counts[target_index],
            points=points,
            sample_id=f"syn-{spec.seed}-{i:05d}",
        )
        sample.validate()
        samples.append(sample)
    return samples


# ---------------------------------------------------------------------------
# Augmentation


def _resize_image(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    t = torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1)))[None]
    r = F.interpolate(t, size=(out_h, out_w), mode="bilinear", align_corners=False)
    return r[0].numpy().transpose(1, 2, 0)


def rescale_sample(image: np.ndarray, boxes: list[BBox], factor: float) -> tuple[np.ndarray, list[BBox]]:
    """Rescale content by `factor`, keeping the canvas size fixed.

    Content is anchored at the top-left corner: factors < 1 pad the right and
    bottom with the per-channel mean color, factors > 1 crop. Normalized box
    coordinates therefore scale by the realized factor and are re-clamped.
    """
    h_img, w_img = image.shape[:2]
    new_h = max(1, round(h_img * factor))
    new_w = max(1, round(w_img * factor))
    if (new_h, new_w) == (h_img, w_img):
        return image.copy(), [replace(b) for b in boxes]
    resized = _resize_image(image, new_h, new_w)
    sy = new_h / h_img
    sx = new_w / w_img
    if factor <= 1.0:
        canvas = np.empty_like(image)
        canvas[:] = image.reshape(-1, 3).mean(axis=0)
        canvas[:new_h, :new_w] = resized
        out = canvas
    else:
        out = np.ascontiguousarray(resized[:h_img, :w_img])
    new_boxes = [BBox(x=b.x * sx, y=b.y * sy, h=b.h * sy, w=b.w * sx).clamped() for b in boxes]
    return out, new_boxes


def _sample_erase_rect(rng: np.random.Generator, h_img: int, w_img: int) -> tuple[int, int, int, int]:
    frac = float(rng.uniform(0.02, 0.10))
    aspect = float(rng.uniform(0.5, 2.0))
    eh = int(round(math.sqrt(frac * h_img * w_img * aspect)))
    ew = int(round(math.sqrt(frac * h_img * w_img / aspect)))
    eh = min(max(eh, 1), h_img)
    ew = min(max(ew, 1), w_img)
    y0 = int(rng.integers(0, h_img - eh + 1))
    x0 = int(rng.integers(0, w_img - ew + 1))
    return y0, x0, eh, ew


def _erase_overlap_fraction(rect, box: BBox, h_img: int, w_img: int) -> float:
    y0, x0, eh, ew = rect
    bx0, by0 = box.x * w_img, box.y * h_img
    bx1, by1 = bx0 + box.w * w_img, by0 + box.h * h_img
    iw = max(0.0, min(x0 + ew, bx1) - max(x0, bx0))
    ih = max(0.0, min(y0 + eh, by1) - max(y0, by0))
    area = max((bx1 - bx0) * (by1 - by0), 1e-9)
    return iw * ih / area


def augment(sample: SceneSample, rng_state) -> SceneSample:
    """Random reshape + random erase, each applied with probability 0.5.

    Erasing never covers more than half of any ground-truth exemplar box;
    the rectangle is resampled up to 10 times, after which erasing is
    skipped. The count is never touched.
    """
    rng = rng_state if isinstance(rng_state, np.random.Generator) else np.random.default_rng(rng_state)
    image = sample.image
    boxes = sample.exemplar_boxes

    do_reshape = rng.random() < 0.5
    factor = float(rng.uniform(0.8, 1.25))
    if do_reshape:
        image, boxes = rescale_sample(image, boxes, factor)
    else:
        image = image.copy()
        boxes = [replace(b) for b in boxes]

    if rng.random() < 0.5:
        h_img, w_img = image.shape[:2]
        for _ in range(10):
            rect = _sample_erase_rect(rng, h_img, w_img)
            if all(_erase_overlap_fraction(rect, b, h_img, w_img) <= 0.5 for b in boxes):
                y0, x0, eh, ew = rect
                image[y0 : y0 + eh, x0 : x0 + ew] = image.reshape(-1, 3).mean(axis=0)
                break

    return SceneSample(
        image=image,
        annotation=sample.annotation,
        exemplar_boxes=boxes,
        count=sample.count,
        points=sample.points,
        sample_id=sample.sample_id,
    )


def load_image(path) -> np.ndarray:
    """Read an image file as HxWx3 float32 in [0, 1]."""
    p = Path(path)
    if not p.exists():
        raise LoadError(f"image file {p} not found")
    return np.asarray(Image.open(p).convert("RGB"), dtype=np.float32) / 255.0


def preprocess_image(
    image: np.ndarray,
    input_size: int,
    mean: Sequence[float] = (0.5, 0.5, 0.5),
    std: Sequence[float] = (0.5, 0.5, 0.5),
) -> torch.Tensor:
    """Resize to the square model input and normalize per channel -> (3, S, S)."""
    if input_size % 32 != 0:
        raise ConfigError(f"input_size must be a multiple of 32, got {input_size}")
    resized = _resize_image(image, input_size, input_size)
    tensor = torch.from_numpy(resized.transpose(2, 0, 1).copy())
    mean_t = torch.tensor(mean, dtype=tensor.dtype).view(3, 1, 1)
    std_t = torch.tensor(std, dtype=tensor.dtype).view(3, 1, 1)
    return (tensor - mean_t) / std_t


def preprocess(
    sample: SceneSample,
    input_size: int,
    mean: Sequence[float] = (0.5, 0.5, 0.5),
    std: Sequence[float] = (0.5, 0.5, 0.5),
) -> tuple[torch.Tensor, ExpressionAnnotation]:
    """Model-input tensor plus the untouched expression for downstream tokenization."""
    return preprocess_image(sample.image, input_size, mean, std), sample.annotation


# ---------------------------------------------------------------------------
# Annotation file I/O


def _record_from_sample(sample: SceneSample, image_rel: str) -> dict:
    rec = {
        "sample_id": sample.sample_id,
        "image": image_rel,
        "expression": sample.annotation.text,
        "prompt_kind": sample.annotation.prompt_kind.value,
        "class_name": sample.annotation.class_name,
        "exemplar_boxes": [[b.x, b.y, b.h, b.w] for b in sample.exemplar_boxes],
        "count": sample.count,
    }
    if sample.points is not None:
        rec["points"] = [[r, c] for r, c in sample.points]
    return rec


def save_dataset(samples: Sequence[SceneSample], root, split: str) -> Path:
    """Write images and the split's JSON-lines annotation file."""
    root = Path(root)
    image_dir = root / "images"
    image_dir.mkdir(parents=True, exist_ok=True)
    ann_path = root / f"{split}.jsonl"
    with open(ann_path, "w", encoding="utf-8") as fh:
        for sample in samples:
            rel = f"images/{sample.sample_id}.png"
            arr = np.clip(sample.image * 255.0 + 0.5, 0, 255).astype(np.uint8)
            Image.fromarray(arr).save(root / rel)
            fh.write(json.dumps(_record_from_sample(sample, rel)) + "\n")
    return ann_path


def write_corpus(spec: SyntheticSpec, samples: Sequence[SceneSample], root, split: str) -> Path:
    """save_dataset plus the spec.json sidecar (one entry per split)."""
    root = Path(root)
    ann_path = save_dataset(samples, root, split)
    sidecar = root / "spec.json"
    existing = {}
    if sidecar.exists():
        existing = json.loads(sidecar.read_text())
    existing[split] = dict(spec.to_dict(), n_samples=len(samples))
    sidecar.write_text(json.dumps(existing, indent=2))
    return ann_path


def _parse_box(raw, sid: str) -> BBox:
    if not isinstance(raw, (list, tuple)) or len(raw) != 4:
        raise ValidationError(f"sample {sid}: field 'exemplar_boxes' entries must be [x, y, h, w]")
    x, y, h, w = (float(v) for v in raw)
    box = BBox(x=x, y=y, h=h, w=w)
    if not box.is_valid():
        clamped = box.clamped()
        logger.warning("sample %s: clamped out-of-bounds exemplar box %s -> %s", sid, box, clamped)
        return clamped
    return box


def _sample_from_record(rec: dict, root: Path) -> SceneSample:
    sid = str(rec.get("sample_id", "<missing sample_id>"))
    for key in ("sample_id", "image", "expression", "prompt_kind", "class_name", "exemplar_boxes", "count"):
        if key not in rec:
            raise ValidationError(f"sample {sid}: missing field '{key}'")
    count = rec["count"]
    if not isinstance(count, int) or count < 0:
        raise ValidationError(f"sample {sid}: field 'count' must be a non-negative integer")
    try:
        kind = PromptKind(rec["prompt_kind"])
    except ValueError:
        raise ValidationError(f"sample {sid}: field 'prompt_kind' has unknown value {rec['prompt_kind']!r}")
    boxes = [_parse_box(b, sid) for b in rec["exemplar_boxes"]]
    points = None
    if "points" in rec and rec["points"] is not None:
        points = [(float(r), float(c)) for r, c in rec["points"]]
    image_path = root / rec["image"]
    if not image_path.exists():
        raise LoadError(f"sample {sid}: image file {image_path} not found")
    image = np.asarray(Image.open(image_path).convert("RGB"), dtype=np.float32) / 255.0
    annotation = ExpressionAnnotation(text=rec["expression"], prompt_kind=kind, class_name=rec["class_name"])
    sample = SceneSample(
        image=image,
        annotation=annotation,
        exemplar_boxes=boxes,
        count=count,
        points=points,
        sample_id=sid,
    )
    sample.validate()
    return sample


def load_dataset(path, split: str) -> list[SceneSample]:
    """Load every sample of a split, in file order."""
    root = Path(path)
    ann_path = root / f"{split}.jsonl"
    if not ann_path.exists():
        raise LoadError(f"annotation file {ann_path} not found")
    samples = []
    with open(ann_path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{ann_path}:{line_no}: invalid JSON record: {exc}")
            samples.append(_sample_from_record(rec, root))
    return samples


def load_corpus_spec(path) -> dict[str, SyntheticSpec]:
    """Read the spec.json sidecar of a synthetic corpus, keyed by split."""
    sidecar = Path(path) / "spec.json"
    if not sidecar.exists():
        raise LoadError(f"sidecar {sidecar} not found")
    raw = json.loads(sidecar.read_text())
    return {split: SyntheticSpec.from_dict(d) for split, d in raw.items()}


_WORD_RE = re.compile(r"[a-z0-9]+")


def words(text: str) -> list[str]:
    """Lowercase word split on whitespace and punctuation."""
    return _WORD_RE.findall(text.lower())
