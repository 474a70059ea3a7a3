"""Attention-mass profiles and vision-token heatmaps."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint_io import atomic_write_bytes, atomic_write_text
from .layout import MaskSpec, SequenceLayout
from .model import Checkpoint, Prompt, decode_greedy, embed_batch, embed_multimodal, forward
from .taskgen import Split, queried_cell

SOURCES = ("vis", "pre_plus_ins", "res")


def index_set(layout: SequenceLayout, name: str, upto: int | None = None) -> np.ndarray:
    """Positions of a named token set; ``upto`` clips to keys ``< upto``."""
    spans = {
        "pre": [layout.pre_span],
        "vis": [layout.vis_span],
        "ins": [layout.ins_span],
        "res": [layout.res_span],
        "pre_plus_ins": [layout.pre_span, layout.ins_span],
        "text": [layout.pre_span, layout.ins_span, layout.res_span],
        "all": [range(layout.length)],
    }
    if name not in spans:
        raise ValueError(f"unknown token set {name!r}")
    idx = np.concatenate([np.arange(s.start, s.stop) for s in spans[name]]).astype(np.int64)
    return idx[idx < upto] if upto is not None else idx


def attention_mass(attn: np.ndarray, tgt_rows: Sequence[int], src_cols: Sequence[int]) -> float:
    """Head-averaged attention from target rows to source columns, normalized by the target count.

    ``attn`` has shape ``(H, Nq, Nk)``; a leading batch axis is averaged too.
    """
    if attn is None:
        raise ValueError("attention was not captured")
    a = np.asarray(attn, dtype=np.float64)
    tgt = np.asarray(tgt_rows, dtype=np.int64)
    src = np.asarray(src_cols, dtype=np.int64)
    if tgt.size == 0:
        raise ValueError("empty target set")
    if tgt.min() < 0 or tgt.max() >= a.shape[-2] or (src.size and (src.min() < 0 or src.max() >= a.shape[-1])):
        raise ValueError("index set outside attention matrix")
    if src.size == 0:
        return 0.0
    sub = a[..., tgt, :][..., src]
    per_head = sub.sum(axis=-1).mean(axis=-1)
    return float(per_head.mean())


def trace_mass(trace, layout: SequenceLayout, tgt: str, src: str, layer: int) -> float:
    """``attention_mass`` on a captured prefill trace using named sets (layers are 1-indexed)."""
    if trace.attn_weights is None:
        raise ValueError("attention was not captured")
    return attention_mass(trace.attn_weights[layer - 1], index_set(layout, tgt), index_set(layout, src))


@dataclass
class MassProfile:
    stage: str
    target: str
    per_layer: dict[str, list[float]]
    per_step: dict[str, list[list[float]]] | None = None
    population: str = "single"
    n_examples: int = 1
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for src, vals in self.per_layer.items():
            if any(v < -1e-6 or v > 1 + 1e-6 for v in vals):
                raise ValueError(f"mass values for {src} outside [0, 1]")

    def late_mean(self, source: str, layers: Sequence[int]) -> float:
        vals = self.per_layer[source]
        return float(np.mean([vals[l - 1] for l in layers]))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if self.per_step:
            w.writerow(["layer", "source", "value", "step"])
            for src, steps in self.per_step.items():
                for s, vals in enumerate(steps):
                    for l, v in enumerate(vals, 1):
                        w.writerow([l, src, f"{v:.8f}", s])
        else:
            w.writerow(["layer", "source", "value"])
        for src, vals in self.per_layer.items():
            for l, v in enumerate(vals, 1):
                w.writerow([l, src, f"{v:.8f}"] + ([""] if self.per_step else []))
        return buf.getvalue()

    def sidecar(self) -> dict:
        return {"stage": self.stage, "target": self.target, "population": self.population,
                "n_examples": self.n_examples, "sources": list(self.per_layer), **self.meta}

    def save(self, path_csv) -> None:
        path_csv = Path(path_csv)
        atomic_write_text(path_csv, self.to_csv())
        atomic_write_text(path_csv.with_suffix(".json"), json.dumps(self.sidecar(), indent=2, sort_keys=True) + "\n")


def mass_profile(ckpt: Checkpoint, prompt: Prompt, mode: str = "prefill_ins",
                 sources: Sequence[str] = SOURCES, mask: MaskSpec | None = None,
                 max_new: int = 1) -> MassProfile:
    """Per-layer attention mass for one prompt.

    ``prefill_ins`` targets the instruction tokens during the prompt pass.
    ``decode_res`` targets each generated token in turn; the ``res`` source
    holds earlier generated tokens plus the current one, so the three
    default sources partition every permitted key.
    """
    L = ckpt.config.num_layers
    if mode == "prefill_ins":
        x0, layout = embed_multimodal(ckpt, prompt)
        trace = forward(ckpt, x0, layout, mask, capture_attention=True)
        tgt = index_set(layout, "ins")
        per_layer = {s: [attention_mass(trace.attn_weights[l], tgt, index_set(layout, s)) for l in range(L)]
                     for s in sources}
        return MassProfile("prefill", "ins", per_layer)
    if mode != "decode_res":
        raise ValueError(f"unknown mode {mode!r}")
    result = decode_greedy(ckpt, prompt, mask, max_new=max_new, capture_attention=True)
    layout = result.layout
    per_step: dict[str, list[list[float]]] = {s: [] for s in sources}
    for i, step in enumerate(result.steps):
        pos = layout.res_start + i
        for s in sources:
            cols = index_set(layout, s, upto=pos + 1)
            per_step[s].append([attention_mass(step.attn_weights[l], [0], cols) for l in range(L)])
    per_layer = {s: list(np.mean(np.asarray(v), axis=0)) for s, v in per_step.items()}
    return MassProfile("decode", "res", per_layer, per_step, meta={"tokens": result.tokens})


def split_mass(ckpt: Checkpoint, split: Split, source: str = "vis", mask: MaskSpec | None = None,
               chunk: int = 128) -> dict[str, MassProfile]:
    """Prefill instruction-to-``source`` mass averaged over a split.

    Returns two populations: every example, and only those answered correctly.
    """
    L = ckpt.config.num_layers
    totals = np.zeros((2, L))
    counts = np.zeros(2)
    for i in range(0, len(split), chunk):
        c = split.take(slice(i, i + chunk))
        x0, layout = embed_batch(ckpt, c.vision_or_none, c.pre, c.ins)
        trace = forward(ckpt, x0, layout, mask, capture_attention=True)
        correct = np.argmax(trace.logits[:, -1], axis=-1) == c.answer
        tgt, src = index_set(layout, "ins"), index_set(layout, source)
        for l, a in enumerate(trace.attn_weights):
            if src.size == 0:
                continue
            per_ex = a[:, :, tgt][..., src].astype(np.float64).sum(-1).mean(-1).mean(-1)
            totals[0, l] += per_ex.sum()
            totals[1, l] += per_ex[correct].sum()
        counts += (len(correct), int(correct.sum()))
    out = {}
    for j, pop in enumerate(("all", "correct")):
        vals = list(totals[j] / counts[j]) if counts[j] else [0.0] * L
        out[pop] = MassProfile("prefill", "ins", {source: vals}, population=pop, n_examples=int(counts[j]))
    return out


def _grid_shape(layout: SequenceLayout, grid: tuple[int, int] | None) -> tuple[int, int]:
    n = layout.n_vis
    if n == 0:
        raise ValueError("vision span is empty")
    if grid is None:
        g = int(round(np.sqrt(n)))
        grid = (g, n // g if g else 0)
    if grid[0] * grid[1] != n:
        raise ValueError(f"grid {grid} does not match {n} vision tokens")
    return grid


def normalize_map(values: np.ndarray) -> np.ndarray:
    lo, hi = float(values.min()), float(values.max())
    if hi - lo <= 0:
        return np.ones_like(values, dtype=np.float64)
    return (values - lo) / (hi - lo)


def vision_heatmap(attn: np.ndarray, layout: SequenceLayout, query_rows: Sequence[int] | None = None,
                   head: int | None = None, grid: tuple[int, int] | None = None,
                   normalize: bool = True) -> np.ndarray:
    """Attention received by each vision token, reshaped to the grid.

    ``attn`` is one layer's ``(H, Nq, Nk)`` weights. Queries default to the
    last prompt position; ``head=None`` averages heads.
    """
    shape = _grid_shape(layout, grid)
    a = np.asarray(attn, dtype=np.float64)
    if head is not None:
        a = a[head:head + 1]
    rows = [a.shape[-2] - 1] if query_rows is None else list(query_rows)
    vis = index_set(layout, "vis")
    vals = a[:, rows][..., vis].mean(axis=(0, 1)).reshape(shape)
    return normalize_map(vals) if normalize else vals


def localization_rate(ckpt: Checkpoint, split: Split, layers: Sequence[int] | None = None,
                      grid_size: int = 4, chunk: int = 128) -> float:
    """Fraction of examples whose heatmap argmax is the queried grid cell.

    Attention from the last prompt position is averaged over heads and the
    given layers (all layers by default).
    """
    L = ckpt.config.num_layers
    layers = list(range(1, L + 1)) if layers is None else list(layers)
    target = queried_cell(split, grid_size)
    hits = 0
    for i in range(0, len(split), chunk):
        c = split.take(slice(i, i + chunk))
        x0, layout = embed_batch(ckpt, c.vision_or_none, c.pre, c.ins)
        trace = forward(ckpt, x0, layout, capture_attention=True)
        vis = index_set(layout, "vis")
        a = np.mean([trace.attn_weights[l - 1][:, :, -1, :][..., vis].mean(1) for l in layers], axis=0)
        hits += int(np.sum(np.argmax(a, axis=-1) == target[i:i + chunk]))
    return hits / len(split)


def heatmap_csv(grid: np.ndarray) -> str:
    return "\n".join(",".join(f"{v:.6f}" for v in row) for row in grid) + "\n"


def write_pgm(path, grid: np.ndarray, scale: int = 16) -> None:
    """Binary greyscale image of a [0, 1] grid, each cell ``scale`` pixels wide."""
    img = np.clip(np.round(np.asarray(grid) * 255), 0, 255).astype(np.uint8)
    img = np.kron(img, np.ones((scale, scale), dtype=np.uint8))
    h, w = img.shape
    atomic_write_bytes(Path(path), f"P5\n{w} {h}\n255\n".encode() + img.tobytes())
