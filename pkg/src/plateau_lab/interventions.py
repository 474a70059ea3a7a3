"""Depth-controlled vision-token masking and the cut-layer sweep."""

from __future__ import annotations

import csv
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint_io import atomic_write_text
from .layout import MaskSpec, SequenceLayout, apply_mask, causal_banned
from .model import Checkpoint, ForwardTrace, Prompt, embed_multimodal, forward, layer_forward, unembed

logger = logging.getLogger(__name__)

__all__ = [
    "MaskSpec",
    "SweepProfile",
    "apply_mask",
    "mask_sweep",
    "prune_equivalent_forward",
]


class EquivalenceError(AssertionError):
    """The pruned path disagreed with the canonical masked forward."""


def prune_equivalent_forward(ckpt: Checkpoint, prompt: Prompt | tuple, mask: MaskSpec,
                             verify: bool = False, atol: float = 1e-5) -> ForwardTrace:
    """Masked forward that physically drops vision rows from layer ``k`` on.

    Layers ``l < k`` see the full sequence; from layer ``k`` the vision rows
    are removed (surviving positions keep their position embeddings).
    Returned logits cover non-vision positions only, in sequence order.
    ``prompt`` may also be an ``(x0, layout)`` pair with a batched ``x0``.
    """
    cfg = ckpt.config
    mask.validate(cfg.num_layers)
    if mask.k > cfg.num_layers:
        raise ValueError("k = L + 1 masks nothing; use the plain forward")
    if isinstance(prompt, Prompt):
        x0, layout = embed_multimodal(ckpt, prompt)
    else:
        x0, layout = prompt
    x = x0[None] if x0.ndim == 2 else x0
    for l in range(1, mask.k):
        x, _, _ = layer_forward(ckpt, l, x, apply_mask(layout, None, l).banned)
    keep = layout.text_positions
    x = x[:, keep]
    banned = causal_banned(len(keep), len(keep))
    for l in range(mask.k, cfg.num_layers + 1):
        x, _, _ = layer_forward(ckpt, l, x, banned)
    logits = unembed(ckpt, x)
    if verify:
        ref = forward(ckpt, x0 if x0.ndim == 3 else x0[None], layout, mask).logits[:, keep]
        err = float(np.max(np.abs(ref - logits)))
        if err >= atol:
            raise EquivalenceError(f"pruned vs masked logits differ by {err:.3g} >= {atol}")
    return ForwardTrace(logits[0] if x0.ndim == 2 else logits)


@dataclass
class SweepProfile:
    model_id: str
    task_id: str
    points: list[tuple[int, float]]
    metric: str = "exact_match"
    split: str = "test"
    complete: bool = True
    meta: dict = field(default_factory=dict)

    @property
    def ks(self) -> list[int]:
        return [k for k, _ in self.points]

    @property
    def scores(self) -> np.ndarray:
        return np.asarray([s for _, s in self.points], dtype=np.float64)

    def score_at(self, k: int) -> float:
        return dict(self.points)[k]

    def validate(self, num_layers: int) -> None:
        if self.ks != list(range(1, num_layers + 2)):
            raise ValueError("profile must hold exactly one point per k in 1..L+1")
        if np.any((self.scores < 0) | (self.scores > 1)):
            raise ValueError("scores must lie in [0, 1]")

    def to_csv(self) -> str:
        lines = ["k,score"] + [f"{k},{s:.6f}" for k, s in self.points]
        return "\n".join(lines) + "\n"

    def sidecar(self) -> dict:
        return {"model_id": self.model_id, "task_id": self.task_id, "metric": self.metric,
                "split": self.split, "complete": self.complete, **self.meta}

    def save(self, path_csv) -> None:
        path_csv = Path(path_csv)
        atomic_write_text(path_csv, self.to_csv())
        atomic_write_text(path_csv.with_suffix(".json"),
                          json.dumps(self.sidecar(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path_csv) -> "SweepProfile":
        path_csv = Path(path_csv)
        with open(path_csv) as fh:
            points = [(int(r["k"]), float(r["score"])) for r in csv.DictReader(fh)]
        meta = json.loads(path_csv.with_suffix(".json").read_text())
        known = {k: meta.pop(k) for k in ("model_id", "task_id", "metric", "split", "complete") if k in meta}
        return cls(known.get("model_id", ""), known.get("task_id", ""), points,
                   known.get("metric", "exact_match"), known.get("split", "test"),
                   known.get("complete", True), meta)


def default_workers() -> int:
    return max(1, int(os.environ.get("PLATEAU_LAB_WORKERS", "1")))


def mask_sweep(ckpt: Checkpoint, task, split: str = "test", k_values=None, workers: int | None = None,
               model_id: str = "", stride: int = 1) -> SweepProfile:
    """Evaluate the model with vision masked from each cut layer ``k``.

    Each point is exact-match accuracy on ``split``. ``k = L + 1`` is always
    included and equals the unmasked score.
    """
    from .harness import evaluate

    cfg = ckpt.config
    if k_values is None:
        k_values = list(range(1, cfg.num_layers + 1, stride))
        if k_values[-1] != cfg.num_layers + 1:
            k_values.append(cfg.num_layers + 1)
    k_values = sorted(set(int(k) for k in k_values))
    task.split(split)

    def run(k):
        mask = None if k == cfg.num_layers + 1 else MaskSpec(k)
        return evaluate(ckpt, task, split, mask, keep_records=False).score

    workers = workers or default_workers()
    results: dict[int, float] = {}
    complete = True
    try:
        if workers > 1:
            with ThreadPoolExecutor(workers) as pool:
                for k, score in zip(k_values, pool.map(run, k_values)):
                    results[k] = score
        else:
            for k in k_values:
                results[k] = run(k)
    except Exception:
        logger.exception("mask sweep failed; returning partial profile")
        complete = False
    points = [(k, results[k]) for k in k_values if k in results]
    return SweepProfile(model_id, task.task_id, points, "exact_match", split, complete,
                        {"k_values": k_values})
