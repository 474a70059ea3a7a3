"""Token-span bookkeeping and the depth-controlled vision mask."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor_core import AttnMask


@dataclass(frozen=True)
class SequenceLayout:
    """Contiguous prefix / vision / instruction / response spans.

    Positions are ``[0, n_pre)`` prefix, then ``n_vis`` vision tokens, then
    ``n_ins`` instruction tokens, then ``n_res`` response tokens.
    """

    n_pre: int
    n_vis: int
    n_ins: int
    n_res: int = 0

    def __post_init__(self):
        if min(self.n_pre, self.n_vis, self.n_ins, self.n_res) < 0:
            raise ValueError("span lengths must be non-negative")

    @property
    def pre_span(self) -> range:
        return range(0, self.n_pre)

    @property
    def vis_span(self) -> range:
        return range(self.n_pre, self.n_pre + self.n_vis)

    @property
    def ins_span(self) -> range:
        return range(self.n_pre + self.n_vis, self.res_start)

    @property
    def res_start(self) -> int:
        return self.n_pre + self.n_vis + self.n_ins

    @property
    def res_span(self) -> range:
        return range(self.res_start, self.length)

    @property
    def length(self) -> int:
        return self.res_start + self.n_res

    @property
    def text_positions(self) -> np.ndarray:
        """Every non-vision position in order."""
        idx = np.arange(self.length)
        return idx[(idx < self.n_pre) | (idx >= self.n_pre + self.n_vis)]

    def with_response(self, n_res: int) -> "SequenceLayout":
        return SequenceLayout(self.n_pre, self.n_vis, self.n_ins, n_res)

    def to_dict(self) -> dict:
        return {"n_pre": self.n_pre, "n_vis": self.n_vis, "n_ins": self.n_ins, "n_res": self.n_res}


@dataclass(frozen=True)
class MaskSpec:
    """Cut layer ``k``: layers ``l >= k`` cannot attend to vision keys/values.

    ``k = L + 1`` disables masking.
    """

    k: int

    def validate(self, num_layers: int) -> None:
        if not 1 <= self.k <= num_layers + 1:
            raise ValueError(f"cut layer {self.k} outside [1, {num_layers + 1}]")

    def active_at(self, layer: int) -> bool:
        return layer >= self.k


def causal_banned(n_query: int, n_key: int) -> np.ndarray:
    """Banned grid for the last ``n_query`` positions of an ``n_key`` sequence."""
    return np.triu(np.ones((n_query, n_key), dtype=bool), k=1 + n_key - n_query)


def apply_mask(layout: SequenceLayout, mask: MaskSpec | None, layer: int,
               num_layers: int | None = None, n_query: int | None = None) -> AttnMask:
    """Attention mask for ``layer`` (1-based) under an optional cut layer.

    With ``n_query`` set, only the trailing query rows are returned, which is
    what an incremental decoding step needs. Once the cut is active every
    query loses the vision keys, except that a vision query still sees itself.
    """
    if layer < 1 or (num_layers is not None and layer > num_layers):
        raise ValueError(f"layer {layer} outside [1, {num_layers}]")
    n = layout.length
    q = n if n_query is None else n_query
    banned = causal_banned(q, n)
    if mask is not None and mask.active_at(layer):
        vs = layout.vis_span
        banned[:, vs.start:vs.stop] = True
        # a vision query keeps its own key so its row is never empty; text never sees it
        rows = np.arange(vs.start, vs.stop) - (n - q)
        ok = rows >= 0
        banned[rows[ok], np.arange(vs.start, vs.stop)[ok]] = False
    return AttnMask(banned, causal=True)
