"""Layer-range interpolation between a base LM and its fine-tuned MLLM.

For every layer in the merge set and every tensor in the chosen subset the
merged weight is ``lambda1 * W_base + lambda2 * W_mllm`` (float32, in that
expression order). Everything else, including the projector, embeddings,
unembedding and all layers outside the set, is copied from the MLLM.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .layout import apply_mask
from .model import ATTN_SLOTS, Checkpoint, embed_batch, layer_forward, parse_layer_name, unembed
from .taskgen import Task

logger = logging.getLogger(__name__)

SUBSETS = ("attn_qkvo", "all_backbone")
LAMBDA_RANGE = (0.0, 1.5)


@dataclass(frozen=True)
class MergeSpec:
    layers: tuple[int, ...]
    lambda1: float
    lambda2: float
    subset: str = "attn_qkvo"

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(sorted(set(int(l) for l in self.layers))))
        lo, hi = LAMBDA_RANGE
        for name in ("lambda1", "lambda2"):
            value = getattr(self, name)
            if not lo <= value <= hi:
                raise ValueError(f"{name}={value} outside [{lo}, {hi}]")
        if self.subset not in SUBSETS:
            raise ValueError(f"subset must be one of {SUBSETS}")
        if not self.layers:
            raise ValueError("merge layer set is empty")

    @classmethod
    def from_k0(cls, k0: int, num_layers: int, lambda1: float, lambda2: float,
                subset: str = "attn_qkvo") -> "MergeSpec":
        return cls(tuple(range(k0, num_layers + 1)), lambda1, lambda2, subset)

    @property
    def k0(self) -> int:
        return self.layers[0]

    def is_suffix(self, num_layers: int) -> bool:
        return self.layers == tuple(range(self.k0, num_layers + 1))

    def validate(self, num_layers: int) -> None:
        if self.layers[0] < 1 or self.layers[-1] > num_layers:
            raise ValueError(f"merge layers {self.layers} outside [1, {num_layers}]")

    def selects(self, name: str) -> bool:
        parsed = parse_layer_name(name)
        if parsed is None:
            return False
        layer, group, slot = parsed
        if layer not in self.layers:
            return False
        if self.subset == "all_backbone":
            return True
        return group == "attn" and slot.split(".")[0] in ATTN_SLOTS

    def to_kv(self) -> dict[str, str]:
        layers = self.layers
        contiguous = layers == tuple(range(layers[0], layers[-1] + 1))
        return {
            "merge_layers": f"{layers[0]}-{layers[-1]}" if contiguous else ",".join(map(str, layers)),
            "lambda1": f"{self.lambda1:g}",
            "lambda2": f"{self.lambda2:g}",
            "subset": self.subset,
        }

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "MergeSpec":
        return cls(parse_layer_set(kv["merge_layers"]), float(kv["lambda1"]), float(kv["lambda2"]),
                   kv.get("subset", "attn_qkvo"))


def parse_layer_set(text: str) -> tuple[int, ...]:
    """``"5-12"`` or ``"3,4,9"`` (mixtures allowed)."""
    out: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part:
            a, b = part.split("-")
            out.extend(range(int(a), int(b) + 1))
        elif part:
            out.append(int(part))
    return tuple(out)


def merge(base: Checkpoint, vlm: Checkpoint, spec: MergeSpec) -> Checkpoint:
    """Interpolate the selected tensors; copy everything else from ``vlm``."""
    if base.config != vlm.config:
        raise ValueError("base and vlm configs differ")
    if not vlm.has_projector:
        raise ValueError("vlm checkpoint must supply the projector")
    spec.validate(vlm.config.num_layers)
    base_backbone = {n for n in base.tensors if n != "projector"}
    vlm_backbone = {n for n in vlm.tensors if n != "projector"}
    if base_backbone != vlm_backbone:
        raise ValueError(f"tensor names differ: {sorted(base_backbone ^ vlm_backbone)[:5]}")
    l1 = np.float32(spec.lambda1)
    l2 = np.float32(spec.lambda2)
    tensors = {}
    for name, w_vlm in vlm.tensors.items():
        if spec.selects(name):
            w_base = base[name]
            if w_base.shape != w_vlm.shape:
                raise ValueError(f"{name}: shape mismatch {w_base.shape} vs {w_vlm.shape}")
            tensors[name] = l1 * w_base.astype(np.float32) + l2 * w_vlm.astype(np.float32)
        else:
            tensors[name] = w_vlm
    return Checkpoint(vlm.config, tensors, "merged")


def lambda_grid(lo: float = 0.0, hi: float = 1.5, step: float = 0.1) -> list[float]:
    n = int(round((hi - lo) / step))
    return [round(lo + i * step, 10) for i in range(n + 1)]


def grid_cells(lambdas1: Sequence[float], lambdas2: Sequence[float],
               sum_tol: float | None = None) -> list[tuple[float, float]]:
    """All coefficient pairs, optionally pruned to ``|l1 + l2 - 1| <= sum_tol``.

    The identity pair ``(0, 1)`` is always kept when both values are present.
    """
    cells = []
    for a in lambdas1:
        for b in lambdas2:
            if sum_tol is not None and abs(a + b - 1.0) > sum_tol + 1e-9 and (a, b) != (0.0, 1.0):
                continue
            cells.append((float(a), float(b)))
    return cells


def _rank_key(row: dict):
    """Higher score, then larger k0, then smaller lambda1, then lambda2 closest to 1."""
    return (-row["score"], -row["k0"], row["lambda1"], abs(row["lambda2"] - 1.0), row["lambda2"])


class MergedEvaluator:
    """Scores suffix merges on a fixed split, reusing the MLLM prefix.

    Layers below ``k0`` are identical to the MLLM for every suffix merge, so
    the residual stream entering layer ``k0`` is computed once per ``k0``.
    """

    def __init__(self, base: Checkpoint, vlm: Checkpoint, task: Task, split: str = "val",
                 limit: int | None = None, chunk: int = 256):
        self.base, self.vlm = base, vlm
        sp = task.split(split)
        self.split = sp.head(limit) if limit else sp
        self.chunk = chunk
        self.L = vlm.config.num_layers
        self.gold = self.split.answer
        self._x0 = []
        for i in range(0, len(self.split), chunk):
            c = self.split.take(slice(i, i + chunk))
            x0, self.layout = embed_batch(vlm, c.vision_or_none, c.pre, c.ins)
            self._x0.append(x0)
        self._cache: dict[int, list[np.ndarray]] = {1: self._x0}

    def stream_at(self, k0: int) -> list[np.ndarray]:
        """Residual stream entering layer ``k0`` under the unmerged MLLM."""
        if k0 not in self._cache:
            prev = max(k for k in self._cache if k < k0)
            xs = self._cache[prev]
            for l in range(prev, k0):
                banned = apply_mask(self.layout, None, l).banned
                xs = [layer_forward(self.vlm, l, x, banned)[0] for x in xs]
            self._cache[k0] = xs
        return self._cache[k0]

    def predict(self, ckpt: Checkpoint, k0: int) -> np.ndarray:
        out = []
        for x in self.stream_at(k0):
            for l in range(k0, self.L + 1):
                x, _, _ = layer_forward(ckpt, l, x, apply_mask(self.layout, None, l).banned)
            out.append(np.argmax(unembed(ckpt, x[:, -1:])[:, -1], axis=-1))
        return np.concatenate(out)

    def score_checkpoint(self, ckpt: Checkpoint, k0: int = 1) -> float:
        return float(np.mean(self.predict(ckpt, k0) == self.gold))

    def score(self, spec: MergeSpec) -> float:
        if not spec.is_suffix(self.L):
            return self.score_checkpoint(merge(self.base, self.vlm, spec), 1)
        return self.score_checkpoint(merge(self.base, self.vlm, spec), spec.k0)

    def baseline(self) -> float:
        return self.score_checkpoint(self.vlm, 1)


@dataclass
class GridResult:
    best: MergeSpec
    best_score: float
    rows: list[dict] = field(default_factory=list)
    baseline_score: float | None = None

    def per_k0(self) -> dict[int, float]:
        out: dict[int, float] = {}
        for row in self.rows:
            if row["score"] is not None:
                out[row["k0"]] = max(out.get(row["k0"], -1.0), row["score"])
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["k0", "lambda1", "lambda2", "score", "error"])
        for r in self.rows:
            score = "" if r["score"] is None else f"{r['score']:.6f}"
            w.writerow([r["k0"], f"{r['lambda1']:g}", f"{r['lambda2']:g}", score, r.get("error", "")])
        return buf.getvalue()


def grid_search(base: Checkpoint, vlm: Checkpoint, k0_candidates: Iterable[int],
                lambdas1: Sequence[float] | None = None, lambdas2: Sequence[float] | None = None,
                subset: str = "attn_qkvo", eval_fn: Callable[[MergeSpec], float] | None = None,
                task: Task | None = None, split: str = "val", limit: int | None = 256,
                sum_tol: float | None = None) -> GridResult:
    """Joint search over merge start ``k0`` and both coefficients.

    Either pass ``eval_fn(spec) -> score`` or a ``task`` whose ``split`` is
    scored by exact match. A failing cell is recorded and skipped.
    """
    L = vlm.config.num_layers
    lambdas1 = lambda_grid() if lambdas1 is None else list(lambdas1)
    lambdas2 = lambda_grid() if lambdas2 is None else list(lambdas2)
    evaluator = None
    if eval_fn is None:
        if task is None:
            raise ValueError("grid_search needs eval_fn or task")
        evaluator = MergedEvaluator(base, vlm, task, split, limit)
        eval_fn = evaluator.score
    cells = grid_cells(lambdas1, lambdas2, sum_tol)
    if not cells:
        raise ValueError("empty coefficient grid")
    rows = []
    for k0 in sorted(set(int(k) for k in k0_candidates)):
        for l1, l2 in cells:
            row = {"k0": k0, "lambda1": l1, "lambda2": l2, "score": None}
            try:
                row["score"] = float(eval_fn(MergeSpec.from_k0(k0, L, l1, l2, subset)))
            except Exception as exc:  # noqa: BLE001 - a failed cell must not stop the search
                logger.warning("grid cell k0=%d l1=%g l2=%g failed: %s", k0, l1, l2, exc)
                row["error"] = str(exc)
            rows.append(row)
    ok = [r for r in rows if r["score"] is not None]
    if not ok:
        raise RuntimeError("every grid cell failed evaluation")
    top = min(ok, key=_rank_key)
    best = MergeSpec.from_k0(top["k0"], L, top["lambda1"], top["lambda2"], subset)
    baseline = evaluator.baseline() if evaluator is not None else None
    return GridResult(best, top["score"], rows, baseline)
