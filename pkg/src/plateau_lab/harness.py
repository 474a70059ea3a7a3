"""Exact-match evaluation and report comparison."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .checkpoint_io import digest
from .layout import MaskSpec
from .model import Checkpoint, predict_next
from .taskgen import Task


@dataclass
class EvalReport:
    model_digest: str
    task_id: str
    split: str
    metric: str
    score: float
    n_examples: int
    per_example: list[dict] | None = None
    seed: int | None = None
    timestamp: float | None = None
    mask_k: int | None = None
    label: str = ""
    task_digest: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "EvalReport":
        return cls(**data)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def predictions(ckpt: Checkpoint, task: Task, split: str, mask: MaskSpec | None = None,
                limit: int | None = None, chunk: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Greedy first response token for every example of ``split``; returns ``(pred, gold)``."""
    sp = task.split(split)
    if limit is not None:
        sp = sp.head(limit)
    if sp.vision.shape[1] and sp.vision.shape[2] != ckpt.config.vision_feature_dim:
        raise ValueError("task vision dim does not match checkpoint config")
    preds = [predict_next(ckpt, c.vision_or_none, c.pre, c.ins, mask)
             for c in (sp.take(slice(i, i + chunk)) for i in range(0, len(sp), chunk))]
    return np.concatenate(preds), sp.answer


def evaluate(ckpt: Checkpoint, task: Task, split: str = "test", mask: MaskSpec | None = None,
             keep_records: bool = True, limit: int | None = None, seed: int | None = None,
             deterministic: bool = True, model_digest: str | None = None, label: str = "") -> EvalReport:
    """Greedy decoding with exact match on the single answer token."""
    pred, gold = predictions(ckpt, task, split, mask, limit)
    correct = pred == gold
    records = None
    if keep_records:
        records = [{"id": i, "predicted": int(p), "gold": int(g), "correct": bool(c)}
                   for i, (p, g, c) in enumerate(zip(pred, gold, correct))]
    return EvalReport(
        model_digest=model_digest or digest(ckpt),
        task_id=task.task_id,
        split=split,
        metric="exact_match",
        score=float(np.mean(correct)),
        n_examples=int(len(gold)),
        per_example=records,
        seed=seed,
        timestamp=None if deterministic else time.time(),
        mask_k=None if mask is None else mask.k,
        label=label,
        task_digest=task.digest(),
    )


@dataclass
class Comparison:
    baseline: str
    rows: list[dict] = field(default_factory=list)
    best: str = ""

    def to_csv(self) -> str:
        lines = ["model,score,delta,best"]
        lines += [f"{r['model']},{r['score']:.6f},{r['delta']:+.6f},{int(r['best'])}" for r in self.rows]
        return "\n".join(lines) + "\n"


def compare(reports: list[EvalReport], baseline: str | int = 0) -> Comparison:
    """Score deltas against a baseline report (by label or index)."""
    if not reports:
        raise ValueError("no reports to compare")
    keys = {(r.task_id, r.split) for r in reports}
    if len(keys) != 1:
        raise ValueError(f"reports mix tasks/splits: {sorted(keys)}")
    digests = {r.task_digest for r in reports if r.task_digest is not None}
    if len(digests) > 1:
        raise ValueError("reports were scored on datasets with different digests")
    names = [r.label or f"model{i}" for i, r in enumerate(reports)]
    if isinstance(baseline, int):
        base = reports[baseline]
    else:
        if baseline not in names:
            raise ValueError(f"baseline {baseline!r} not among {names}")
        base = reports[names.index(baseline)]
    top = max(r.score for r in reports)
    rows = [{"model": n, "score": r.score, "delta": r.score - base.score, "best": r.score == top}
            for n, r in zip(names, reports)]
    best = next(row["model"] for row in rows if row["best"])
    return Comparison(base.label or names[reports.index(base)], rows, best)
