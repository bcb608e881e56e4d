"""Coarse-to-fine expression annotation over a pluggable captioning backend.

The two-round protocol first asks which object classes an image contains,
then asks for a counting-oriented description of the top-ranked class. The
HTTP backend talks JSON to an external captioning service; the offline
backend answers both rounds from synthetic scene metadata so the pipeline
runs without a network.
"""

from __future__ import annotations

import base64
import json
import os
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import requests

from .data import (
    ExpressionAnnotation,
    PromptKind,
    SceneGeometry,
    load_corpus_spec,
    load_dataset,
    pluralize,
    render_expression,
)
from .errors import AnnotationError, ConfigError, LoadError

DEFAULT_COARSE_PROMPT = "What objects does this image include?"
DEFAULT_REFINE_PROMPT = "How many [class]? Describe the [class] details."


@dataclass
class PromptProtocol:
    coarse_prompt: str = DEFAULT_COARSE_PROMPT
    refine_prompt: str = DEFAULT_REFINE_PROMPT
    max_retries: int = 3
    timeout: float = 5.0

    def validate(self):
        if "[class]" in self.coarse_prompt:
            raise ConfigError("coarse_prompt must not contain the [class] placeholder")
        if "[class]" not in self.refine_prompt:
            raise ConfigError("refine_prompt must contain the [class] placeholder")


class Backend:
    """A captioning backend answers one (image, prompt) request with text."""

    def ask(self, image_path: Path, prompt: str, protocol: PromptProtocol) -> str:
        raise NotImplementedError


@dataclass
class HttpBackend(Backend):
    """JSON-over-HTTP service: {"image": base64, "prompt": str} -> {"text": str}.

    Timeouts and 5xx responses are retried protocol.max_retries times with
    exponential backoff; other error statuses fail immediately.
    """

    endpoint: str
    auth_env: str = ""
    backoff_base: float = 1.0

    def ask(self, image_path: Path, prompt: str, protocol: PromptProtocol) -> str:
        headers = {}
        if self.auth_env:
            token = os.environ.get(self.auth_env, "")
            if token:
                headers["Authorization"] = f"Bearer {token}"
        payload = {"image": base64.b64encode(Path(image_path).read_bytes()).decode(), "prompt": prompt}
        last = None
        for attempt in range(protocol.max_retries + 1):
            try:
                resp = requests.post(self.endpoint, json=payload, headers=headers, timeout=protocol.timeout)
            except (requests.Timeout, requests.ConnectionError) as exc:
                last = str(exc)
            else:
                if resp.status_code < 500:
                    if resp.status_code != 200:
                        raise AnnotationError(
                            f"caption service returned {resp.status_code}", last_response=resp.text
                        )
                    return str(resp.json()["text"])
                last = f"{resp.status_code}: {resp.text}"
            if attempt < protocol.max_retries:
                time.sleep(self.backoff_base * (2**attempt))
        raise AnnotationError(
            f"caption service failed after {protocol.max_retries + 1} attempts", last_response=last
        )


@dataclass
class OfflineBackend(Backend):
    """Deterministic template backend driven by synthetic scene metadata.

    `scenes` maps image filenames / sample ids to SceneGeometry; build it
    with `offline_backend_for_corpus`. The coarse round lists the class
    phrases (target first); the refine round answers only for the target
    class, whose count is the one the metadata records.
    """

    scenes: dict[str, SceneGeometry] = field(default_factory=dict)

    def _geometry(self, image_path: Path) -> SceneGeometry:
        for key in (str(image_path), image_path.name, image_path.stem):
            if key in self.scenes:
                return self.scenes[key]
        raise AnnotationError(f"no scene metadata for {image_path}")

    def ask(self, image_path: Path, prompt: str, protocol: PromptProtocol) -> str:
        geometry = self._geometry(Path(image_path))
        phrases = [f"{color} {pluralize(shape)}" for shape, color in geometry.classes]
        target_phrase = phrases[geometry.target_index]
        if "how many" not in prompt.lower():
            ordered = [target_phrase] + [p for i, p in enumerate(phrases) if i != geometry.target_index]
            return ", ".join(ordered)
        if target_phrase in prompt:
            return render_expression(geometry, PromptKind.FINE_GRAINED).text
        return ""  # only the target class count is recorded


def parse_classes(coarse_answer: str) -> list[str]:
    """Split a coarse answer into ranked class phrases."""
    parts = re.split(r",|\band\b|;", coarse_answer)
    return [p.strip(" .") for p in parts if p.strip(" .")]


def annotate_sample(
    image_path,
    protocol: PromptProtocol,
    backend: Backend,
    log: Optional[Callable[[dict], None]] = None,
) -> ExpressionAnnotation:
    """Run the two-round protocol for one image."""
    protocol.validate()
    image_path = Path(image_path)

    def ask(prompt: str) -> str:
        answer = backend.ask(image_path, prompt, protocol)
        if log is not None:
            log({"image": str(image_path), "prompt": prompt, "response": answer})
        return answer

    coarse = ask(protocol.coarse_prompt)
    classes = parse_classes(coarse)
    if not classes:
        raise AnnotationError("no classes detected", last_response=coarse)
    for cls in classes:
        refined = ask(protocol.refine_prompt.replace("[class]", cls))
        if refined.strip():
            return ExpressionAnnotation(text=refined.strip(), prompt_kind=PromptKind.FINE_GRAINED, class_name=cls)
    raise AnnotationError("all refinement rounds returned empty text", last_response=coarse)


@dataclass
class AnnotateReport:
    successes: int = 0
    failures: int = 0
    skipped: int = 0
    mean_expression_length: float = 0.0
    failed_ids: list[str] = field(default_factory=list)

    def to_dict(self):
        return {
            "successes": self.successes,
            "failures": self.failures,
            "skipped": self.skipped,
            "mean_expression_length": self.mean_expression_length,
            "failed_ids": self.failed_ids,
        }


def offline_backend_for_corpus(dataset_root, split: str = "train") -> OfflineBackend:
    """Reconstruct per-sample scene geometry for a synthetic corpus sidecar."""
    root = Path(dataset_root)
    try:
        specs = load_corpus_spec(root)
    except LoadError:
        raise AnnotationError(f"offline backend needs the spec.json sidecar under {root}")
    spec = specs.get(split) or next(iter(specs.values()))
    scenes = {}
    for sample in load_dataset(root, split):
        shape = sample.annotation.class_name
        target_index = next((i for i, (s, _) in enumerate(spec.shape_classes) if s == shape), None)
        if target_index is None:
            continue
        counts = [0] * len(spec.shape_classes)
        counts[target_index] = sample.count
        geometry = SceneGeometry(
            classes=list(spec.shape_classes), counts=counts, target_index=target_index, layout=spec.layout
        )
        scenes[f"{sample.sample_id}.png"] = geometry
        scenes[sample.sample_id] = geometry
    return OfflineBackend(scenes=scenes)


def annotate_corpus(
    dataset_root,
    protocol: PromptProtocol,
    backend: Backend,
    out_path,
    split: str = "train",
    concurrency: int = 1,
) -> AnnotateReport:
    """Annotate every sample of a split, appending to the output file.

    Re-runs are idempotent: sample_ids already present in the output are
    skipped without issuing any request. Failures are recorded in the stats
    report and skipped over rather than aborting the run. All raw
    request/response pairs go to `<out>.requests.jsonl`.
    """
    protocol.validate()
    root = Path(dataset_root)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    samples = load_dataset(root, split)

    done_ids = set()
    if out_path.exists():
        with open(out_path) as fh:
            for line in fh:
                line = line.strip()
                if line:
                    done_ids.add(json.loads(line)["sample_id"])

    sidecar_path = Path(str(out_path) + ".requests.jsonl")
    write_lock = threading.Lock()
    report = AnnotateReport()
    lengths = []

    def log_request(entry: dict):
        with write_lock:
            with open(sidecar_path, "a") as fh:
                fh.write(json.dumps(entry) + "\n")

    def run_one(sample):
        image_path = root / "images" / f"{sample.sample_id}.png"
        return sample, annotate_sample(image_path, protocol, backend, log=log_request)

    todo = []
    for sample in samples:
        if sample.sample_id in done_ids:
            report.skipped += 1
        else:
            todo.append(sample)

    results = []
    if concurrency > 1:
        with ThreadPoolExecutor(max_workers=concurrency) as pool:
            futures = [(pool.submit(run_one, s), s) for s in todo]
            for future, sample in futures:
                try:
                    results.append(future.result())
                except AnnotationError:
                    report.failures += 1
                    report.failed_ids.append(sample.sample_id)
    else:
        for sample in todo:
            try:
                results.append(run_one(sample))
            except AnnotationError:
                report.failures += 1
                report.failed_ids.append(sample.sample_id)

    with open(out_path, "a") as fh:
        for sample, annotation in results:
            rec = {
                "sample_id": sample.sample_id,
                "image": f"images/{sample.sample_id}.png",
                "expression": annotation.text,
                "prompt_kind": annotation.prompt_kind.value,
                "class_name": annotation.class_name,
                "exemplar_boxes": [[b.x, b.y, b.h, b.w] for b in sample.exemplar_boxes],
                "count": sample.count,
            }
            if sample.points is not None:
                rec["points"] = [[r, c] for r, c in sample.points]
            fh.write(json.dumps(rec) + "\n")
            report.successes += 1
            lengths.append(len(annotation.text))

    report.mean_expression_length = float(sum(lengths) / len(lengths)) if lengths else 0.0
    Path(str(out_path) + ".stats.json").write_text(json.dumps(report.to_dict(), indent=2))
    return report
