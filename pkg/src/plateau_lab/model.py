"""Multimodal decoder-only transformer over pre-extracted vision features.

Architecture: learned token + absolute position embeddings, a linear vision
projector, ``L`` pre-norm blocks (RMS norm, multi-head causal attention,
SiLU feed-forward), a final RMS norm and an untied unembedding. All weight
matrices use the ``(out_features, in_features)`` convention.
"""

from __future__ import annotations

import logging
import re
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import tensor_core as tc
from .layout import MaskSpec, SequenceLayout, apply_mask, causal_banned

logger = logging.getLogger(__name__)

KINDS = ("base_lm", "mllm", "merged")
ATTN_SLOTS = ("q", "k", "v", "o")
LAYER_NAME = re.compile(r"^layers\.(\d+)\.(attn|ffn|norm)\.([a-z]+)(\.bias)?$")


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 12
    hidden_dim: int = 64
    num_heads: int = 4
    vocab_size: int = 64
    max_seq_len: int = 32
    vision_feature_dim: int = 16
    ffn_dim: int = 256

    def __post_init__(self):
        if self.num_layers < 2:
            raise ValueError("num_layers must be >= 2")
        if self.hidden_dim % self.num_heads:
            raise ValueError("hidden_dim must be divisible by num_heads")
        for name, value in asdict(self).items():
            if value < 1:
                raise ValueError(f"{name} must be positive")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        return cls(**{k: int(v) for k, v in data.items()})


def canonical_names(config: ModelConfig, kind: str) -> list[str]:
    """Every tensor name a checkpoint of ``kind`` must carry."""
    names = ["embed.tok", "embed.pos"]
    if kind != "base_lm":
        names.append("projector")
    for l in range(1, config.num_layers + 1):
        names += [f"layers.{l}.attn.{s}" for s in ATTN_SLOTS]
        names += [f"layers.{l}.ffn.up", f"layers.{l}.ffn.down"]
        names += [f"layers.{l}.norm.attn", f"layers.{l}.norm.ffn"]
    names += ["norm.final", "unembed"]
    return names


def expected_shape(config: ModelConfig, name: str) -> tuple[int, ...]:
    d, f = config.hidden_dim, config.ffn_dim
    fixed = {
        "embed.tok": (config.vocab_size, d),
        "embed.pos": (config.max_seq_len, d),
        "projector": (d, config.vision_feature_dim),
        "norm.final": (d,),
        "unembed": (config.vocab_size, d),
    }
    if name in fixed:
        return fixed[name]
    m = LAYER_NAME.match(name)
    if not m or not 1 <= int(m.group(1)) <= config.num_layers:
        raise KeyError(f"unknown tensor name {name!r}")
    group, slot, bias = m.group(2), m.group(3), m.group(4)
    if group == "attn" and slot in ATTN_SLOTS:
        return (d,) if bias else (d, d)
    if group == "ffn" and slot == "up":
        return (f,) if bias else (f, d)
    if group == "ffn" and slot == "down":
        return (d,) if bias else (d, f)
    if group == "norm" and slot in ("attn", "ffn") and not bias:
        return (d,)
    raise KeyError(f"unknown tensor name {name!r}")


def name_sort_key(name: str):
    """Canonical tensor order: numeric layer indices compare as integers."""
    return tuple((0, int(p), "") if p.isdigit() else (1, 0, p) for p in name.split("."))


@dataclass
class Checkpoint:
    """Immutable named-tensor map for one model. Arrays are made read-only."""

    config: ModelConfig
    tensors: dict[str, np.ndarray]
    kind: str = "base_lm"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown checkpoint kind {self.kind!r}")
        required = set(canonical_names(self.config, self.kind))
        missing = required - set(self.tensors)
        if missing:
            raise ValueError(f"checkpoint missing tensors: {sorted(missing)[:5]}")
        frozen = {}
        for name in sorted(self.tensors, key=name_sort_key):
            arr = np.asarray(self.tensors[name])
            if arr.shape != expected_shape(self.config, name):
                raise ValueError(f"{name}: shape {arr.shape} != {expected_shape(self.config, name)}")
            if arr.dtype not in (np.float32, np.float64):
                raise ValueError(f"{name}: unsupported dtype {arr.dtype}")
            if arr.flags.writeable:
                arr = arr.copy()
                arr.flags.writeable = False
            frozen[name] = arr
        self.tensors = frozen

    @property
    def has_projector(self) -> bool:
        return "projector" in self.tensors

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def replace(self, updates: dict[str, np.ndarray] | None = None, kind: str | None = None) -> "Checkpoint":
        tensors = dict(self.tensors)
        tensors.update(updates or {})
        return Checkpoint(self.config, tensors, kind or self.kind)

    def astype(self, dtype) -> "Checkpoint":
        return Checkpoint(self.config, {k: v.astype(dtype) for k, v in self.tensors.items()}, self.kind)


def init_checkpoint(config: ModelConfig, seed: int, kind: str = "base_lm",
                    gain_jitter: float = 0.0) -> Checkpoint:
    """Random initialization; ``gain_jitter`` perturbs norm gains (useful in tests)."""
    rng = np.random.default_rng(seed)
    residual_scale = 1.0 / np.sqrt(2 * config.num_layers)
    tensors = {}
    for name in canonical_names(config, kind):
        shape = expected_shape(config, name)
        if len(shape) == 1:
            tensors[name] = (1.0 + gain_jitter * rng.standard_normal(shape)).astype(tc.DTYPE)
        elif name.startswith("embed"):
            tensors[name] = tc.init_normal(rng, shape, 0.1)
        elif name == "projector":
            tensors[name] = tc.init_normal(rng, shape, 0.02)
        elif name.endswith(("attn.o", "ffn.down")):
            tensors[name] = tc.init_normal(rng, shape, residual_scale / np.sqrt(shape[1]))
        else:
            tensors[name] = tc.init_normal(rng, shape, 1.0 / np.sqrt(shape[1]))
    return Checkpoint(config, tensors, kind)


@dataclass
class Prompt:
    """One multimodal prompt: vision features plus prefix/instruction token ids."""

    vision: np.ndarray
    pre: Sequence[int]
    ins: Sequence[int]

    @property
    def layout(self) -> SequenceLayout:
        return SequenceLayout(len(self.pre), len(self.vision), len(self.ins))


@dataclass
class ForwardTrace:
    logits: np.ndarray
    attn_weights: list[np.ndarray] | None = None
    hidden_norms: list[np.ndarray] | None = None


@dataclass
class DecodeResult:
    tokens: list[int]
    prefill: ForwardTrace
    steps: list[ForwardTrace] = field(default_factory=list)
    layout: SequenceLayout | None = None


def embed_batch(ckpt: Checkpoint, vision: np.ndarray | None, pre: np.ndarray,
                ins: np.ndarray, res: np.ndarray | None = None):
    """Build ``X0`` for a batch of prompts sharing one layout.

    ``vision`` is ``(B, N_vis, F)`` (or None / zero-length), token arrays are
    ``(B, n)`` integer ids. Returns ``(x0 of shape (B, N, d), layout)``.
    """
    cfg = ckpt.config
    pre = np.asarray(pre, dtype=np.int64)
    ins = np.asarray(ins, dtype=np.int64)
    b = pre.shape[0] if pre.ndim == 2 else ins.shape[0]
    pre = pre.reshape(b, -1)
    ins = ins.reshape(b, -1)
    res = np.zeros((b, 0), dtype=np.int64) if res is None else np.asarray(res, dtype=np.int64).reshape(b, -1)
    n_vis = 0 if vision is None else np.asarray(vision).shape[1]
    layout = SequenceLayout(pre.shape[1], n_vis, ins.shape[1], res.shape[1])
    if layout.length > cfg.max_seq_len:
        raise ValueError(f"sequence length {layout.length} exceeds max_seq_len {cfg.max_seq_len}")
    tokens = np.concatenate([pre, ins, res], axis=1)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise ValueError("token id outside vocabulary")
    tok = ckpt["embed.tok"]
    x = np.empty((b, layout.length, cfg.hidden_dim), dtype=tok.dtype)
    text_pos = layout.text_positions
    x[:, text_pos] = tok[tokens]
    if n_vis:
        if not ckpt.has_projector:
            raise ValueError("vision features given but checkpoint has no projector")
        feats = np.asarray(vision, dtype=tok.dtype)
        if feats.shape[2] != cfg.vision_feature_dim:
            raise ValueError(f"vision feature dim {feats.shape[2]} != {cfg.vision_feature_dim}")
        x[:, layout.vis_span.start:layout.vis_span.stop] = tc.linear(feats, ckpt["projector"])
    x += ckpt["embed.pos"][: layout.length]
    return x, layout


def embed_multimodal(ckpt: Checkpoint, prompt: Prompt):
    """Single-prompt embedding; returns ``(x0 of shape (N, d), layout)``."""
    vision = np.asarray(prompt.vision)[None] if len(prompt.vision) else None
    x, layout = embed_batch(ckpt, vision, np.asarray([list(prompt.pre)]), np.asarray([list(prompt.ins)]))
    return x[0], layout


def _split_heads(x: np.ndarray, h: int) -> np.ndarray:
    b, n, d = x.shape
    return x.reshape(b, n, h, d // h).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, n, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * dh)


def affine(ckpt: Checkpoint, name: str, x: np.ndarray) -> np.ndarray:
    """``x @ W.T`` plus the optional ``<name>.bias``."""
    y = tc.linear(x, ckpt[name])
    bias = ckpt.tensors.get(name + ".bias")
    return y if bias is None else y + bias


def layer_forward(ckpt: Checkpoint, layer: int, x: np.ndarray, banned: np.ndarray,
                  past: tuple[np.ndarray, np.ndarray] | None = None,
                  record: dict | None = None):
    """One pre-norm block over ``x`` of shape ``(B, n, d)``.

    ``banned`` is ``(n, n_past + n)``. Returns ``(x_out, probs, (k, v))``
    where ``k``/``v`` include the past cache.
    """
    p = f"layers.{layer}."
    heads = ckpt.config.num_heads
    h, inv1 = tc.rms_norm_with_inv(x, ckpt[p + "norm.attn"])
    q = _split_heads(affine(ckpt, p + "attn.q", h), heads)
    k = _split_heads(affine(ckpt, p + "attn.k", h), heads)
    v = _split_heads(affine(ckpt, p + "attn.v", h), heads)
    if past is not None:
        k = np.concatenate([past[0], k], axis=2)
        v = np.concatenate([past[1], v], axis=2)
    scale = 1.0 / np.sqrt(ckpt.config.head_dim)
    scores = (q @ k.transpose(0, 1, 3, 2)) * x.dtype.type(scale)
    probs = tc.masked_softmax(scores, banned)
    ctx = _merge_heads(probs @ v)
    x1 = x + affine(ckpt, p + "attn.o", ctx)
    h2, inv2 = tc.rms_norm_with_inv(x1, ckpt[p + "norm.ffn"])
    u = affine(ckpt, p + "ffn.up", h2)
    s = tc.silu(u)
    out = x1 + affine(ckpt, p + "ffn.down", s)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError(f"non-finite hidden state at layer {layer}")
    if record is not None:
        record.update(x=x, h=h, inv1=inv1, q=q, k=k, v=v, probs=probs, ctx=ctx,
                      x1=x1, h2=h2, inv2=inv2, u=u, s=s)
    return out, probs, (k, v)


def unembed(ckpt: Checkpoint, x: np.ndarray, record: dict | None = None) -> np.ndarray:
    hf, inv = tc.rms_norm_with_inv(x, ckpt["norm.final"])
    if record is not None:
        record.update(x=x, h=hf, inv=inv)
    return tc.linear(hf, ckpt["unembed"])


def _as_batch(x0: np.ndarray):
    x0 = np.asarray(x0)
    return (x0[None], True) if x0.ndim == 2 else (x0, False)


def run_layers(ckpt: Checkpoint, x: np.ndarray, layout: SequenceLayout,
               mask_spec: MaskSpec | None, first: int, last: int,
               capture_attention: bool = False, capture_norms: bool = False,
               records: list | None = None):
    """Apply layers ``first..last`` (inclusive) to a batched residual stream."""
    attn, norms = [], []
    for l in range(first, last + 1):
        banned = apply_mask(layout, mask_spec, l).banned
        rec = {} if records is not None else None
        x, probs, _ = layer_forward(ckpt, l, x, banned, record=rec)
        if records is not None:
            records.append(rec)
        if capture_attention:
            attn.append(probs)
        if capture_norms:
            norms.append(np.linalg.norm(x, axis=-1))
    return x, attn, norms


def forward(ckpt: Checkpoint, x0: np.ndarray, layout: SequenceLayout,
            mask_spec: MaskSpec | None = None, capture_attention: bool = False,
            capture_norms: bool = False) -> ForwardTrace:
    """Full forward pass; ``x0`` is ``(N, d)`` or batched ``(B, N, d)``."""
    cfg = ckpt.config
    x, squeeze = _as_batch(x0)
    if x.shape[1:] != (layout.length, cfg.hidden_dim):
        raise ValueError(f"x0 shape {x.shape[1:]} inconsistent with layout/config")
    if mask_spec is not None:
        mask_spec.validate(cfg.num_layers)
    x, attn, norms = run_layers(ckpt, x, layout, mask_spec, 1, cfg.num_layers,
                                capture_attention, capture_norms)
    logits = unembed(ckpt, x)
    if squeeze:
        logits = logits[0]
        attn = [a[0] for a in attn]
        norms = [n[0] for n in norms]
    return ForwardTrace(logits, attn if capture_attention else None,
                        norms if capture_norms else None)


def _decode_step_inputs(ckpt: Checkpoint, token: int, position: int) -> np.ndarray:
    if position >= ckpt.config.max_seq_len:
        raise ValueError(f"context overflow at position {position}")
    return (ckpt["embed.tok"][token] + ckpt["embed.pos"][position])[None, None, :]


def decode_greedy(ckpt: Checkpoint, prompt: Prompt, mask_spec: MaskSpec | None = None,
                  max_new: int = 1, capture_attention: bool = False,
                  use_cache: bool = True) -> DecodeResult:
    """Greedy argmax decoding.

    Every generated token is also fed back through the cache once, so that
    ``steps[i]`` holds the attention of generated token ``i`` as a query.
    ``use_cache=False`` recomputes the whole sequence each step instead.
    """
    if max_new < 1:
        raise ValueError("max_new must be >= 1")
    cfg = ckpt.config
    if mask_spec is not None:
        mask_spec.validate(cfg.num_layers)
    x0, layout = embed_multimodal(ckpt, prompt)
    if layout.length + max_new > cfg.max_seq_len:
        raise ValueError("context overflow: prompt plus max_new exceeds max_seq_len")

    if not use_cache:
        return _decode_recompute(ckpt, prompt, mask_spec, max_new, capture_attention)

    x = x0[None]
    cache = []
    attn = []
    for l in range(1, cfg.num_layers + 1):
        banned = apply_mask(layout, mask_spec, l).banned
        x, probs, kv = layer_forward(ckpt, l, x, banned)
        cache.append(kv)
        if capture_attention:
            attn.append(probs[0])
    logits = unembed(ckpt, x)[0]
    prefill = ForwardTrace(logits, attn if capture_attention else None)
    tokens = [int(np.argmax(logits[-1]))]
    steps = []
    for i in range(max_new):
        pos = layout.length + i
        step_layout = layout.with_response(i + 1)
        x = _decode_step_inputs(ckpt, tokens[i], pos)
        attn = []
        for l in range(1, cfg.num_layers + 1):
            banned = apply_mask(step_layout, mask_spec, l, n_query=1).banned
            x, probs, cache[l - 1] = layer_forward(ckpt, l, x, banned, past=cache[l - 1])
            if capture_attention:
                attn.append(probs[0])
        step_logits = unembed(ckpt, x)[0]
        steps.append(ForwardTrace(step_logits, attn if capture_attention else None))
        if i + 1 < max_new:
            tokens.append(int(np.argmax(step_logits[-1])))
    return DecodeResult(tokens, prefill, steps, layout.with_response(max_new))


def _decode_recompute(ckpt, prompt, mask_spec, max_new, capture_attention):
    tokens: list[int] = []
    prefill = None
    steps = []
    pre = np.asarray([list(prompt.pre)])
    ins = np.asarray([list(prompt.ins)])
    vision = np.asarray(prompt.vision)[None] if len(prompt.vision) else None
    for i in range(max_new + 1):
        res = np.asarray([tokens], dtype=np.int64).reshape(1, -1)
        x0, layout = embed_batch(ckpt, vision, pre, ins, res)
        trace = forward(ckpt, x0, layout, mask_spec, capture_attention)
        logits = trace.logits[0]
        if i == 0:
            prefill = ForwardTrace(logits, [a[0] for a in trace.attn_weights] if capture_attention else None)
        else:
            steps.append(ForwardTrace(logits[-1:], [a[0][:, -1:] for a in trace.attn_weights]
                                      if capture_attention else None))
        if i < max_new:
            tokens.append(int(np.argmax(logits[-1])))
    return DecodeResult(tokens, prefill, steps, prompt.layout.with_response(max_new))


def predict_next(ckpt: Checkpoint, vision: np.ndarray | None, pre: np.ndarray, ins: np.ndarray,
                 mask_spec: MaskSpec | None = None) -> np.ndarray:
    """Greedy first response token for a batch of prompts sharing one layout."""
    x0, layout = embed_batch(ckpt, vision, pre, ins)
    logits = forward(ckpt, x0, layout, mask_spec).logits
    return np.argmax(logits[:, -1], axis=-1)


def parse_layer_name(name: str):
    """``(layer, group, slot)`` for per-layer tensors, else None."""
    m = LAYER_NAME.match(name)
    if not m:
        return None
    return int(m.group(1)), m.group(2), m.group(3) + (m.group(4) or "")


def backbone_names(names: Iterable[str]) -> list[str]:
    return [n for n in names if n.startswith("layers.")]
