"""Reverse-mode gradients for the transformer and an Adam training loop.

Gradients are derived by hand for each block; the forward pass reuses
:func:`plateau_lab.model.layer_forward` with intermediate recording, so the
trained function is exactly the one used at inference time.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor_core as tc
from .model import Checkpoint, ModelConfig, embed_batch, init_checkpoint, run_layers, unembed
from .taskgen import Split, Task

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """Raised on a non-finite loss; ``last_good`` holds the previous checkpoint."""

    def __init__(self, message: str, last_good: Checkpoint | None = None, step: int | None = None):
        super().__init__(message)
        self.last_good = last_good
        self.step = step


@dataclass
class Batch:
    """Prompts sharing one layout. ``targets`` is ``(B, N)``; -1 marks unsupervised positions."""

    vision: np.ndarray | None
    pre: np.ndarray
    ins: np.ndarray
    targets: np.ndarray

    @classmethod
    def from_split(cls, split: Split, idx=None, supervise: bool = True) -> "Batch":
        sp = split if idx is None else split.take(idx)
        n = sp.pre.shape[1] + sp.vision.shape[1] + sp.ins.shape[1]
        targets = np.full((len(sp), n), -1, dtype=np.int64)
        if supervise:
            targets[:, -1] = sp.answer
        return cls(sp.vision_or_none, sp.pre, sp.ins, targets)


def _rms_backward(dy, x, inv, gain):
    z = dy * gain
    inv = inv[..., None]
    dx = inv * z - x * inv ** 3 * np.mean(z * x, axis=-1, keepdims=True)
    dgain = np.sum((dy * x * inv).reshape(-1, x.shape[-1]), axis=0)
    return dx, dgain


def _split_heads(x, h):
    b, n, d = x.shape
    return x.reshape(b, n, h, d // h).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, n, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * dh)


def _outer(dy, x):
    """Sum over all leading axes of ``dy^T x`` (weight gradient of ``x @ W.T``)."""
    return dy.reshape(-1, dy.shape[-1]).T @ x.reshape(-1, x.shape[-1])


def loss_and_grads(ckpt: Checkpoint, batch: Batch, freeze=frozenset()):
    """Summed cross-entropy over supervised positions and its gradient map.

    Returns ``(loss, grads, n_supervised, correct)``. Frozen tensors are
    absent from ``grads``.
    """
    cfg = ckpt.config
    x0, layout = embed_batch(ckpt, batch.vision, batch.pre, batch.ins)
    records: list[dict] = []
    x, _, _ = run_layers(ckpt, x0, layout, None, 1, cfg.num_layers, records=records)
    final: dict = {}
    logits = unembed(ckpt, x, record=final).astype(np.float64)

    sup = batch.targets >= 0
    n_sup = int(sup.sum())
    grads: dict[str, np.ndarray] = {}
    dtype = x0.dtype
    if n_sup == 0:
        for name, arr in ckpt.tensors.items():
            if name not in freeze:
                grads[name] = np.zeros_like(arr)
        return 0.0, grads, 0, 0

    shifted = logits - logits.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logz
    tgt = np.where(sup, batch.targets, 0)
    picked = np.take_along_axis(logp, tgt[..., None], axis=-1)[..., 0]
    loss = float(-np.sum(picked[sup]))
    if not math.isfinite(loss):
        raise FloatingPointError("non-finite loss")
    correct = int(np.sum((np.argmax(logits, axis=-1) == batch.targets) & sup))

    dlogits = np.exp(logp)
    np.put_along_axis(dlogits, tgt[..., None], np.take_along_axis(dlogits, tgt[..., None], axis=-1) - 1.0, axis=-1)
    dlogits *= sup[..., None]
    dlogits = dlogits.astype(dtype)

    def put(name, value):
        if name not in freeze:
            grads[name] = grads[name] + value if name in grads else value

    def put_affine(name, dy, x):
        put(name, _outer(dy, x))
        if name + ".bias" in ckpt.tensors:
            put(name + ".bias", dy.reshape(-1, dy.shape[-1]).sum(axis=0))

    put("unembed", _outer(dlogits, final["h"]))
    dh = tc.linear(dlogits, ckpt["unembed"].T)
    dx, dg = _rms_backward(dh, final["x"], final["inv"], ckpt["norm.final"])
    put("norm.final", dg)

    heads = cfg.num_heads
    scale = dtype.type(1.0 / np.sqrt(cfg.head_dim))
    for l in range(cfg.num_layers, 0, -1):
        r = records[l - 1]
        p = f"layers.{l}."
        # feed-forward
        ds = tc.linear(dx, ckpt[p + "ffn.down"].T)
        put_affine(p + "ffn.down", dx, r["s"])
        du = tc.silu_backward(r["u"], ds)
        put_affine(p + "ffn.up", du, r["h2"])
        dh2 = tc.linear(du, ckpt[p + "ffn.up"].T)
        dx1, dg = _rms_backward(dh2, r["x1"], r["inv2"], ckpt[p + "norm.ffn"])
        put(p + "norm.ffn", dg)
        dx1 = dx1 + dx
        # attention
        put_affine(p + "attn.o", dx1, r["ctx"])
        dctx = _split_heads(tc.linear(dx1, ckpt[p + "attn.o"].T), heads)
        probs, q, k, v = r["probs"], r["q"], r["k"], r["v"]
        dprobs = dctx @ v.transpose(0, 1, 3, 2)
        dv = probs.transpose(0, 1, 3, 2) @ dctx
        dscores = probs * (dprobs - np.sum(dprobs * probs, axis=-1, keepdims=True)) * scale
        dq = _merge_heads(dscores @ k)
        dk = _merge_heads(dscores.transpose(0, 1, 3, 2) @ q)
        dv = _merge_heads(dv)
        h = r["h"]
        put_affine(p + "attn.q", dq, h)
        put_affine(p + "attn.k", dk, h)
        put_affine(p + "attn.v", dv, h)
        dh = tc.linear(dq, ckpt[p + "attn.q"].T) + tc.linear(dk, ckpt[p + "attn.k"].T) + tc.linear(dv, ckpt[p + "attn.v"].T)
        dxin, dg = _rms_backward(dh, r["x"], r["inv1"], ckpt[p + "norm.attn"])
        put(p + "norm.attn", dg)
        dx = dxin + dx1

    put("embed.pos", np.pad(dx.sum(axis=0), ((0, cfg.max_seq_len - layout.length), (0, 0))))
    if "embed.tok" not in freeze:
        tokens = np.concatenate([batch.pre, batch.ins], axis=1)
        dtok = np.zeros_like(ckpt["embed.tok"])
        np.add.at(dtok, tokens.reshape(-1), dx[:, layout.text_positions].reshape(-1, cfg.hidden_dim))
        grads["embed.tok"] = dtok
    if layout.n_vis and "projector" in ckpt.tensors:
        dxv = dx[:, layout.vis_span.start:layout.vis_span.stop]
        put("projector", _outer(dxv, np.asarray(batch.vision, dtype=dtype)))
    for name in ckpt.tensors:
        if name not in freeze and name not in grads:
            grads[name] = np.zeros_like(ckpt[name])
    return loss, grads, n_sup, correct


def backward(ckpt: Checkpoint, batch: Batch, freeze=frozenset()) -> dict[str, np.ndarray]:
    """Gradient map of the summed target-span cross-entropy."""
    return loss_and_grads(ckpt, batch, freeze)[1]


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))


@dataclass
class TrainConfig:
    steps: int = 1500
    batch_size: int = 32
    lr: float = 3e-4
    min_lr_frac: float = 0.1
    warmup: int = 50
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-8
    clip_norm: float = 1.0
    eval_every: int = 100
    eval_size: int = 256


class Adam:
    def __init__(self, params: dict[str, np.ndarray], cfg: TrainConfig):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def lr_at(self, step: int) -> float:
        c = self.cfg
        if step < c.warmup:
            return c.lr * (step + 1) / c.warmup
        frac = (step - c.warmup) / max(1, c.steps - c.warmup)
        cos = 0.5 * (1.0 + math.cos(math.pi * min(1.0, frac)))
        return c.lr * (c.min_lr_frac + (1.0 - c.min_lr_frac) * cos)

    def update(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], step: int) -> None:
        c = self.cfg
        self.t += 1
        lr = self.lr_at(step)
        b1c = 1.0 - c.beta1 ** self.t
        b2c = 1.0 - c.beta2 ** self.t
        for name, g in grads.items():
            m, v = self.m[name], self.v[name]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            params[name] -= (lr * (m / b1c) / (np.sqrt(v / b2c) + c.adam_eps)).astype(params[name].dtype)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    curve: list[dict] = field(default_factory=list)


def accuracy(ckpt: Checkpoint, split: Split, chunk: int = 512) -> float:
    from .model import predict_next

    correct = 0
    for start in range(0, len(split), chunk):
        sp = split.take(slice(start, start + chunk))
        correct += int(np.sum(predict_next(ckpt, sp.vision_or_none, sp.pre, sp.ins) == sp.answer))
    return correct / len(split)


def train(ckpt: Checkpoint, task: Task, cfg: TrainConfig, seed: int,
          freeze=frozenset(), kind: str | None = None, tag: str = "") -> TrainResult:
    """Adam with linear warmup, cosine decay and global-norm clipping."""
    params = {k: np.array(v, dtype=np.float32) for k, v in ckpt.tensors.items()}
    trainable = {k: v for k, v in params.items() if k not in freeze}
    opt = Adam(trainable, cfg)
    rng = np.random.default_rng([seed, 303])
    train_split = task.split("train")
    val_split = task.split("val").head(cfg.eval_size)
    curve: list[dict] = []
    current = Checkpoint(ckpt.config, params, kind or ckpt.kind)
    run_loss = run_correct = run_n = 0
    for step in range(cfg.steps):
        idx = rng.integers(0, len(train_split), cfg.batch_size)
        batch = Batch.from_split(train_split, idx)
        try:
            loss, grads, n_sup, correct = loss_and_grads(current, batch, freeze)
        except FloatingPointError as exc:
            raise TrainingDiverged(f"{tag} diverged at step {step}: {exc}", current, step) from exc
        scale = 1.0 / max(1, n_sup)
        norm = global_norm(grads) * scale
        clip = min(1.0, cfg.clip_norm / (norm + 1e-12))
        for g in grads.values():
            g *= scale * clip
        opt.update(params, grads, step)
        current = Checkpoint(ckpt.config, params, kind or ckpt.kind)
        run_loss += loss
        run_correct += correct
        run_n += n_sup
        last = step == cfg.steps - 1
        if (step + 1) % cfg.eval_every == 0 or last:
            curve.append({"step": step + 1, "split": "train", "loss": run_loss / run_n,
                          "accuracy": run_correct / run_n})
            vb = Batch.from_split(val_split)
            vloss, _, vn, vcorrect = loss_and_grads(current, vb, frozenset(current.tensors))
            curve.append({"step": step + 1, "split": "val", "loss": vloss / vn, "accuracy": vcorrect / vn})
            logger.info("%s step %d train loss %.4f acc %.3f | val loss %.4f acc %.3f", tag, step + 1,
                        run_loss / run_n, run_correct / run_n, vloss / vn, vcorrect / vn)
            run_loss = run_correct = run_n = 0
    return TrainResult(current, curve)


def train_base_lm(config: ModelConfig, text_task: Task, cfg: TrainConfig, seed: int) -> TrainResult:
    if text_task.kind != "text":
        raise ValueError("base LM trains on a text-only task")
    init = init_checkpoint(config, seed, "base_lm")
    return train(init, text_task, cfg, seed, kind="base_lm", tag="base")


def attach_projector(base: Checkpoint, seed: int, std: float = 0.02) -> Checkpoint:
    """Copy of ``base`` as an mllm with a freshly initialized projector."""
    rng = np.random.default_rng([seed, 404])
    cfg = base.config
    proj = tc.init_normal(rng, (cfg.hidden_dim, cfg.vision_feature_dim), std)
    return Checkpoint(cfg, {**base.tensors, "projector": proj}, "mllm")


def finetune_mllm(base: Checkpoint, grounded_task: Task, cfg: TrainConfig, seed: int,
                  freeze=frozenset()) -> TrainResult:
    """Multimodal-only fine-tuning of a trained base LM (no text replay)."""
    if base.kind != "base_lm":
        raise ValueError("fine-tuning starts from a base_lm checkpoint")
    if grounded_task.kind != "grounded":
        raise ValueError("fine-tuning uses a grounded task")
    dim = grounded_task.split("train").vision.shape[2]
    if dim != base.config.vision_feature_dim:
        raise ValueError(f"task vision dim {dim} != config {base.config.vision_feature_dim}")
    start = attach_projector(base, seed)
    if cfg.steps == 0:
        return TrainResult(start, [])
    return train(start, grounded_task, cfg, seed, freeze=frozenset(freeze), kind="mllm", tag="finetune")


def write_curve(path, rows: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["step", "split", "loss", "accuracy"])
        w.writeheader()
        for row in rows:
            w.writerow({**row, "loss": f"{row['loss']:.6f}", "accuracy": f"{row['accuracy']:.6f}"})
