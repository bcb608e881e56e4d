"""Losses, metrics, the training loop, checkpoints and training-curve emission."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import zipfile
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from . import plots
from .config import Config, config_from_dict
from .counter import CountingBranch
from .data import BBox, SceneSample, augment, load_dataset, preprocess
from .errors import CheckpointError, ContractError, LoadError, NumericalError
from .fusion import ExemplarPerceptron
from .lang_encoder import Vocabulary, collate_tokens, tokenize

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Losses and metrics


def boxes_to_tensor(boxes: Sequence[BBox], dtype=torch.float32) -> torch.Tensor:
    return torch.tensor([b.as_tuple() for b in boxes], dtype=dtype)


def _as_box_tensor(value) -> torch.Tensor:
    if isinstance(value, torch.Tensor):
        t = value
    else:
        t = boxes_to_tensor(list(value))
    if t.ndim == 2:
        t = t[None]
    if t.ndim != 3 or t.shape[-1] != 4:
        raise ContractError(f"expected boxes of shape (B, K, 4), got {tuple(t.shape)}")
    return t


def exemplar_loss(pred, gt) -> torch.Tensor:
    """L1 distance over (x, y, h, w), summed over boxes, averaged over the batch."""
    p, g = _as_box_tensor(pred), _as_box_tensor(gt)
    if p.shape != g.shape:
        raise ContractError(f"box shapes differ: {tuple(p.shape)} vs {tuple(g.shape)}")
    return (p - g).abs().sum(dim=(1, 2)).mean()


def count_loss(pred, gt) -> torch.Tensor:
    """Mean absolute counting error over the batch."""
    p = pred if isinstance(pred, torch.Tensor) else torch.tensor([float(v) for v in pred])
    g = gt if isinstance(gt, torch.Tensor) else torch.tensor([float(v) for v in gt])
    g = g.to(p.dtype)
    if p.shape != g.shape:
        raise ContractError(f"count shapes differ: {tuple(p.shape)} vs {tuple(g.shape)}")
    return (p - g).abs().mean()


def density_loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    if pred.shape != gt.shape:
        raise ContractError(f"density shapes differ: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    return ((pred - gt) ** 2).mean()


@dataclass
class LossReport:
    L_l: torch.Tensor
    L_c: torch.Tensor
    L_density: Optional[torch.Tensor] = None

    @property
    def total(self) -> torch.Tensor:
        total = self.L_l + self.L_c
        if self.L_density is not None:
            total = total + self.L_density
        return total

    def check_finite(self, step: int):
        for name, term in (("exemplar_loss", self.L_l), ("count_loss", self.L_c), ("density_loss", self.L_density)):
            if term is not None and not torch.isfinite(term).all():
                raise NumericalError(f"{name} is non-finite at step {step}")


def metrics(pred_counts, gt_counts) -> tuple[float, float]:
    """(MAE, RMSE) over an evaluation set."""
    p = np.asarray([float(v) for v in pred_counts], dtype=np.float64)
    g = np.asarray([float(v) for v in gt_counts], dtype=np.float64)
    if p.size == 0 or p.shape != g.shape:
        raise ContractError("metrics need non-empty, equal-length count lists")
    mae = float(np.mean(np.abs(p - g)))
    rmse = float(math.sqrt(np.mean((p - g) ** 2)))
    return mae, rmse


def pad_boxes(box_lists: Sequence[Sequence[BBox]], k: int, dtype=torch.float32) -> torch.Tensor:
    """Stack ground-truth boxes to (B, k, 4), repeating the last box when short."""
    out = []
    for boxes in box_lists:
        if not boxes:
            raise ContractError("each sample needs at least one ground-truth box")
        rows = [boxes[i] if i < len(boxes) else boxes[-1] for i in range(k)]
        out.append(boxes_to_tensor(rows, dtype=dtype))
    return torch.stack(out)


def density_target(points, image_hw: tuple[int, int], grid_hw: tuple[int, int]) -> np.ndarray:
    """Rasterize centroids as unit Gaussians (sigma = 1 cell) on the feature grid.

    Each point is renormalized to contribute exactly 1, so the map sums to
    the count.
    """
    h_img, w_img = image_hw
    gh, gw = grid_hw
    target = np.zeros((gh, gw), dtype=np.float64)
    centers_r = np.arange(gh) + 0.5
    centers_c = np.arange(gw) + 0.5
    for r, c in points or []:
        gr = r / h_img * gh
        gc = c / w_img * gw
        kernel = np.exp(-((centers_r[:, None] - gr) ** 2 + (centers_c[None, :] - gc) ** 2) / 2.0)
        kernel[kernel < np.exp(-8.0)] = 0.0  # truncate at 4 cells
        total = kernel.sum()
        if total > 0:
            target += kernel / total
    return target


# ---------------------------------------------------------------------------
# Model assembly and batches


class CountingModel(nn.Module):
    """Exemplar perceptron followed by the counting branch."""

    def __init__(self, config: Config, vocab_size: int):
        super().__init__()
        self.config = config
        variant = config.train.variant
        lang_cfg = replace(config.lang, vocab_size=vocab_size)
        vis_cfg = None if variant == "E" else replace(config.vis)
        self.perceptron = ExemplarPerceptron(lang_cfg, vis_cfg, replace(config.fusion), variant)
        self.counter = CountingBranch(replace(config.counter))

    def forward(self, images: torch.Tensor, ids: torch.Tensor, mask: torch.Tensor):
        boxes = self.perceptron(ids, mask, None if self.perceptron.vis is None else images)
        pred = self.counter(images, boxes)
        return boxes, pred


@dataclass
class Batch:
    images: torch.Tensor
    ids: torch.Tensor
    mask: torch.Tensor
    gt_boxes: torch.Tensor
    counts: torch.Tensor
    density: Optional[torch.Tensor]
    sample_ids: list[str]


def make_batch(
    samples: Sequence[SceneSample],
    vocab: Vocabulary,
    config: Config,
    augment_rng: Optional[np.random.Generator] = None,
) -> Batch:
    need_density = config.counter.head in ("density", "hybrid")
    grid = config.data.input_size // 16
    images, seqs, box_lists, counts, dmaps, sids = [], [], [], [], [], []
    for sample in samples:
        if augment_rng is not None:
            sample = augment(sample, int(augment_rng.integers(0, 2**32 - 1)))
        tensor, annotation = preprocess(sample, config.data.input_size, config.data.mean, config.data.std)
        images.append(tensor)
        seqs.append(tokenize(annotation, vocab, config.lang.n_tokens))
        box_lists.append(sample.exemplar_boxes)
        counts.append(float(sample.count))
        sids.append(sample.sample_id)
        if need_density:
            dmaps.append(density_target(sample.points, sample.image.shape[:2], (grid, grid)))
    ids, mask = collate_tokens(seqs)
    density = torch.from_numpy(np.stack(dmaps)).float() if need_density else None
    return Batch(
        images=torch.stack(images),
        ids=ids,
        mask=mask,
        gt_boxes=pad_boxes(box_lists, config.fusion.n_exemplars),
        counts=torch.tensor(counts),
        density=density,
        sample_ids=sids,
    )


def compute_losses(model: CountingModel, batch: Batch, step: int = 0) -> tuple[LossReport, torch.Tensor]:
    boxes, pred = model(batch.images, batch.ids, batch.mask)
    report = LossReport(
        L_l=exemplar_loss(boxes, batch.gt_boxes),
        L_c=count_loss(pred.count, batch.counts),
        L_density=density_loss(pred.density, batch.density) if batch.density is not None else None,
    )
    report.check_finite(step)
    return report, boxes


# ---------------------------------------------------------------------------
# Train state and checkpoints


@dataclass
class TrainState:
    model: CountingModel
    optimizer: torch.optim.Optimizer
    config: Config
    vocab: Vocabulary
    step: int = 0
    history: list[tuple[int, float, float, float]] = field(default_factory=list)
    seed: int = 0


def trainable_parameters(model: nn.Module):
    return [p for p in model.parameters() if p.requires_grad]


def build_optimizer(model: nn.Module, config: Config) -> torch.optim.Optimizer:
    t = config.train
    return torch.optim.AdamW(
        trainable_parameters(model),
        lr=t.lr,
        betas=(t.beta1, t.beta2),
        eps=t.eps,
        weight_decay=t.weight_decay,
    )


def save_archive(path, arrays: dict[str, np.ndarray]):
    """npz-compatible writer with fixed timestamps so outputs are byte-stable."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", zipfile.ZIP_DEFLATED) as zf:
        for name in sorted(arrays):
            arr = np.asarray(arrays[name])
            if arr.ndim > 0:  # ascontiguousarray would promote 0-dim to (1,)
                arr = np.ascontiguousarray(arr)
            buf = io.BytesIO()
            np.lib.format.write_array(buf, arr, allow_pickle=False)
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            info.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(info, buf.getvalue())


def save_weights(model: nn.Module, path):
    """Flat name -> array archive; the loading seam shared by all modules."""
    arrays = {name: t.detach().cpu().numpy() for name, t in model.state_dict().items()}
    save_archive(path, arrays)


def load_weights(model: nn.Module, path, strict: bool = False) -> tuple[list[str], list[str]]:
    """Copy matching entries from a flat archive into the model.

    Returns (loaded, skipped) parameter names; `strict` turns any skip or
    shape mismatch into an error.
    """
    path = Path(path)
    if not path.exists():
        raise LoadError(f"weight archive {path} not found")
    archive = np.load(path)
    state = model.state_dict()
    loaded, skipped = [], []
    for name, tensor in state.items():
        if name in archive.files and tuple(archive[name].shape) == tuple(tensor.shape):
            tensor.copy_(torch.from_numpy(archive[name]).to(tensor.dtype))
            loaded.append(name)
        else:
            skipped.append(name)
    if strict and skipped:
        raise CheckpointError(f"missing or mismatched parameters: {skipped[:5]}")
    return loaded, skipped


def save_checkpoint(state: TrainState, path):
    arrays = {}
    for name, tensor in state.model.state_dict().items():
        arrays[name] = tensor.detach().cpu().numpy()
    name_of = {id(p): n for n, p in state.model.named_parameters()}
    for group in state.optimizer.param_groups:
        for p in group["params"]:
            st = state.optimizer.state.get(p)
            if not st:
                continue
            pname = name_of[id(p)]
            arrays[f"opt.{pname}.exp_avg"] = st["exp_avg"].cpu().numpy()
            arrays[f"opt.{pname}.exp_avg_sq"] = st["exp_avg_sq"].cpu().numpy()
            arrays[f"opt.{pname}.step"] = np.asarray(float(st["step"]))
    arrays["__rng_torch__"] = torch.get_rng_state().numpy()
    meta = {
        "config": state.config.to_dict(),
        "config_hash": state.config.hash(),
        "vocab": state.vocab.token_to_id,
        "step": state.step,
        "seed": state.seed,
        "history": state.history,
    }
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    save_archive(path, arrays)


def load_checkpoint(path) -> TrainState:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} not found")
    archive = np.load(path)
    if "__meta__" not in archive.files:
        raise CheckpointError(f"checkpoint {path} has no metadata block")
    meta = json.loads(bytes(archive["__meta__"]).decode())
    config = config_from_dict(meta["config"])
    vocab = Vocabulary({str(k): int(v) for k, v in meta["vocab"].items()})
    model = CountingModel(config, vocab.size)
    state_dict = model.state_dict()
    for name, tensor in state_dict.items():
        if name not in archive.files:
            raise CheckpointError(f"checkpoint missing parameter {name}")
        tensor.copy_(torch.from_numpy(archive[name]).to(tensor.dtype))
    optimizer = build_optimizer(model, config)
    for pname, p in model.named_parameters():
        key = f"opt.{pname}.exp_avg"
        if p.requires_grad and key in archive.files:
            optimizer.state[p] = {
                "step": torch.tensor(float(archive[f"opt.{pname}.step"])),
                "exp_avg": torch.from_numpy(archive[key]).to(p.dtype),
                "exp_avg_sq": torch.from_numpy(archive[f"opt.{pname}.exp_avg_sq"]).to(p.dtype),
            }
    if "__rng_torch__" in archive.files:
        torch.set_rng_state(torch.from_numpy(archive["__rng_torch__"].copy()))
    return TrainState(
        model=model,
        optimizer=optimizer,
        config=config,
        vocab=vocab,
        step=int(meta["step"]),
        history=[tuple(h) for h in meta["history"]],
        seed=int(meta["seed"]),
    )


# ---------------------------------------------------------------------------
# Train / evaluate / curves


@dataclass
class EvalResult:
    mae: float
    rmse: float
    rows: list[dict]  # sample_id, gt_count, pred_count, boxes


def evaluate(model: CountingModel, samples: Sequence[SceneSample], vocab: Vocabulary, config: Config) -> EvalResult:
    """Deterministic evaluation pass; no augmentation."""
    if not samples:
        raise ContractError("evaluate needs a non-empty dataset")
    model.eval()
    rows = []
    preds, gts = [], []
    bs = config.train.batch_size
    with torch.no_grad():
        for start in range(0, len(samples), bs):
            chunk = samples[start : start + bs]
            batch = make_batch(chunk, vocab, config)
            boxes, pred = model(batch.images, batch.ids, batch.mask)
            for i, sid in enumerate(batch.sample_ids):
                c_p = float(pred.count[i])
                c_g = float(batch.counts[i])
                preds.append(c_p)
                gts.append(c_g)
                box_str = ";".join(",".join(f"{v:.6f}" for v in box) for box in boxes[i].tolist())
                rows.append({"sample_id": sid, "gt_count": c_g, "pred_count": c_p, "boxes": box_str})
    model.train()
    mae, rmse = metrics(preds, gts)
    return EvalResult(mae=mae, rmse=rmse, rows=rows)


def write_eval_csv(rows: Sequence[dict], path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["sample_id", "gt_count", "pred_count", "boxes"])
        writer.writeheader()
        writer.writerows(rows)


def train(
    config: Config,
    data_root=None,
    out_dir=None,
    train_samples: Optional[list[SceneSample]] = None,
    val_samples: Optional[list[SceneSample]] = None,
) -> TrainState:
    """Run the optimization loop; fixed seed gives a bit-reproducible history."""
    cfg = config.finalized()
    t = cfg.train
    if train_samples is None:
        root = Path(data_root if data_root is not None else t.data_root)
        train_samples = load_dataset(root, "train")
        if val_samples is None:
            try:
                val_samples = load_dataset(root, "val")
            except LoadError:
                logger.warning("no val split found under %s; validating on the train split", root)
                val_samples = train_samples
    if val_samples is None:
        val_samples = train_samples
    if not train_samples:
        raise ContractError("training needs a non-empty train split")

    torch.manual_seed(t.seed)
    vocab = Vocabulary.build([s.annotation.text for s in train_samples])
    model = CountingModel(cfg, vocab.size)
    optimizer = build_optimizer(model, cfg)
    state = TrainState(model=model, optimizer=optimizer, config=cfg, vocab=vocab, seed=t.seed)

    out = Path(out_dir if out_dir is not None else t.out_dir)
    rng = np.random.default_rng(t.seed)
    order = rng.permutation(len(train_samples))
    cursor = 0

    for step in range(1, t.steps + 1):
        picks = []
        for _ in range(t.batch_size):
            if cursor >= len(order):
                order = rng.permutation(len(train_samples))
                cursor = 0
            picks.append(train_samples[int(order[cursor])])
            cursor += 1
        batch = make_batch(picks, vocab, cfg, augment_rng=rng if t.augment else None)
        report, _ = compute_losses(model, batch, step)
        total = report.total
        optimizer.zero_grad(set_to_none=True)
        total.backward()
        if t.clip_norm > 0:
            torch.nn.utils.clip_grad_norm_(trainable_parameters(model), t.clip_norm)
        optimizer.step()
        state.step = step

        if step % t.eval_every == 0 or step == t.steps:
            result = evaluate(model, val_samples, vocab, cfg)
            loss_value = float(total.detach())
            state.history.append((step, loss_value, result.mae, result.rmse))
            save_checkpoint(state, out / "checkpoint.npz")
            logger.info("step %d: loss %.4f val MAE %.4f RMSE %.4f", step, loss_value, result.mae, result.rmse)
    return state


def emit_curves(state_or_history, out_dir) -> dict[str, Path]:
    """Write loss / val-MAE plots plus the raw CSV underlying them."""
    history = state_or_history.history if isinstance(state_or_history, TrainState) else state_or_history
    if not history:
        raise ContractError("cannot emit curves from an empty history")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    steps = [h[0] for h in history]
    losses = [h[1] for h in history]
    maes = [h[2] for h in history]
    csv_path = out / "curves.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "train_loss", "val_mae", "val_rmse"])
        for row in history:
            writer.writerow([row[0], repr(float(row[1])), repr(float(row[2])), repr(float(row[3]))])
    loss_path = out / "loss_curve.png"
    mae_path = out / "val_mae_curve.png"
    plots.plot_series(steps, losses, "step", "train loss", "Training loss", loss_path)
    plots.plot_series(steps, maes, "step", "val MAE", "Validation MAE", mae_path)
    return {"loss": loss_path, "val_mae": mae_path, "csv": csv_path}


def read_curves_csv(path) -> list[tuple[int, float, float, float]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [
            (int(r["step"]), float(r["train_loss"]), float(r["val_mae"]), float(r["val_rmse"])) for r in reader
        ]
