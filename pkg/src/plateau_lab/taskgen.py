"""Synthetic text-only and vision-grounded tasks.

Token map (ids below 64):

====  =====================================
0     PAD
1     BOS (the single prefix token)
2     SEP (ends text instructions)
3     OP_SUM (modular-sum instruction)
4     OP_COPY (copy-with-transform instruction)
5     OP_LOOK (grounded lookup instruction)
10+a  digit / attribute value ``a`` (0..9)
20+i  position-index token ``i``
30+r  grid row ``r``
40+c  grid column ``c``
48+c  grid cell ``c`` (row-major, at most 16 cells)
====  =====================================
"""

from __future__ import annotations

import hashlib
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint_io

PAD, BOS, SEP, OP_SUM, OP_COPY, OP_LOOK = 0, 1, 2, 3, 4, 5
DIGIT0, INDEX0, ROW0, COL0, CELL0 = 10, 20, 30, 40, 48
QUESTION_FORMS = ("row_col", "cell")
MAX_CELLS = 16
SPLITS = ("train", "val", "test")
TEXT_SKILLS = ("copy_transform", "modular_sum")


@dataclass
class Split:
    """Examples sharing one layout. ``vision`` is ``(n, N_vis, F)``."""

    vision: np.ndarray
    pre: np.ndarray
    ins: np.ndarray
    answer: np.ndarray

    def __len__(self) -> int:
        return len(self.answer)

    def take(self, idx) -> "Split":
        return Split(self.vision[idx], self.pre[idx], self.ins[idx], self.answer[idx])

    def head(self, n: int) -> "Split":
        return self.take(slice(0, min(n, len(self))))

    @property
    def vision_or_none(self):
        return self.vision if self.vision.shape[1] else None


@dataclass
class Task:
    """A generated dataset with disjoint train/val/test splits."""

    task_id: str
    kind: str  # "text" or "grounded"
    skill: str
    seed: int
    splits: dict[str, Split]
    answer_vocab: list[int]
    params: dict = field(default_factory=dict)

    def split(self, name: str) -> Split:
        if name not in self.splits:
            raise KeyError(f"task {self.task_id} has no split {name!r}")
        if len(self.splits[name]) == 0:
            raise ValueError(f"split {name!r} is empty")
        return self.splits[name]

    def digest(self) -> str:
        return hashlib.sha256(to_bytes(self)).hexdigest()


def _split_sizes(n: int, n_val: int | None, n_test: int | None):
    if n < 1:
        raise ValueError("n must be >= 1")
    n_val = max(1, n // 4) if n_val is None else n_val
    n_test = max(1, n // 4) if n_test is None else n_test
    return {"train": n, "val": n_val, "test": n_test}


def _unique_draws(rng, draw, total: int, capacity: int):
    if total > capacity:
        raise ValueError(f"requested {total} distinct examples but only {capacity} exist")
    seen, out = set(), []
    while len(out) < total:
        item = draw(rng)
        key = item[0]
        if key in seen:
            continue
        seen.add(key)
        out.append(item)
    return out


def modular_sum_answer(operands, modulus: int = 10) -> int:
    return sum(operands) % modulus


def copy_transform_answer(symbols, index: int, shift: int = 1, alphabet: int = 8) -> int:
    return (symbols[index] + shift) % alphabet


def gen_text_task(seed: int, n: int, skill: str = "copy_transform", n_val: int | None = None,
                  n_test: int | None = None, modulus: int = 10, n_operands: int = 2,
                  alphabet: int = 8, length: int = 4, shift: int = 1) -> Task:
    """Text-only task. All answers are digit tokens.

    ``modular_sum``: ``[OP_SUM, a, b, SEP] -> (a + b) mod modulus``.
    ``copy_transform``: ``[OP_COPY, x1..xn, INDEX_i, SEP] -> (x_i + shift) mod alphabet``.
    """
    sizes = _split_sizes(n, n_val, n_test)
    total = sum(sizes.values())
    rng = np.random.default_rng([seed, 101])
    if skill == "modular_sum":
        if not 2 <= modulus <= 10:
            raise ValueError("modulus must be in [2, 10]")

        def draw(r):
            ops = tuple(int(v) for v in r.integers(0, modulus, n_operands))
            ins = [OP_SUM, *(DIGIT0 + v for v in ops), SEP]
            return ops, ins, DIGIT0 + modular_sum_answer(ops, modulus)

        capacity = modulus ** n_operands
        answer_vocab = [DIGIT0 + v for v in range(modulus)]
        params = {"modulus": modulus, "n_operands": n_operands}
    elif skill == "copy_transform":
        if not 2 <= alphabet <= 10 or not 1 <= length <= 8:
            raise ValueError("alphabet must be in [2, 10] and length in [1, 8]")

        def draw(r):
            syms = tuple(int(v) for v in r.integers(0, alphabet, length))
            idx = int(r.integers(0, length))
            ins = [OP_COPY, *(DIGIT0 + v for v in syms), INDEX0 + idx, SEP]
            return (syms, idx), ins, DIGIT0 + copy_transform_answer(syms, idx, shift, alphabet)

        capacity = alphabet ** length * length
        answer_vocab = [DIGIT0 + v for v in range(alphabet)]
        params = {"alphabet": alphabet, "length": length, "shift": shift}
    else:
        raise ValueError(f"unknown text skill {skill!r}; choose from {TEXT_SKILLS}")

    items = _unique_draws(rng, draw, total, capacity)
    splits, start = {}, 0
    for name in SPLITS:
        chunk = items[start:start + sizes[name]]
        start += sizes[name]
        m = len(chunk)
        splits[name] = Split(
            vision=np.zeros((m, 0, 0), dtype=np.float32),
            pre=np.full((m, 1), BOS, dtype=np.int64),
            ins=np.asarray([c[1] for c in chunk], dtype=np.int64).reshape(m, -1),
            answer=np.asarray([c[2] for c in chunk], dtype=np.int64),
        )
    return Task(f"text-{skill}-s{seed}", "text", skill, seed, splits, answer_vocab, params)


def grid_features(attributes: np.ndarray, grid_size: int, n_attributes: int, feature_dim: int) -> np.ndarray:
    """One vision token per cell: one-hot attribute, one-hot row, one-hot column, zero padding."""
    need = n_attributes + 2 * grid_size
    if feature_dim < need:
        raise ValueError(f"vision_feature_dim {feature_dim} < required {need}")
    cells = grid_size * grid_size
    attrs = np.asarray(attributes).reshape(-1, cells)
    feats = np.zeros((attrs.shape[0], cells, feature_dim), dtype=np.float32)
    cell = np.arange(cells)
    feats[np.arange(attrs.shape[0])[:, None], cell, attrs] = 1.0
    feats[:, cell, n_attributes + cell // grid_size] = 1.0
    feats[:, cell, n_attributes + grid_size + cell % grid_size] = 1.0
    return feats


def gen_grounded_task(seed: int, n: int, grid_size: int = 4, n_attributes: int = 8,
                      feature_dim: int = 16, n_val: int | None = None,
                      n_test: int | None = None, question: str = "row_col", shift: int = 0) -> Task:
    """Grounded QA: the answer is the attribute of the queried cell, plus ``shift`` mod ``n_attributes``.

    ``question="row_col"`` asks ``[OP_LOOK, ROW_r, COL_c]``; ``"cell"`` asks
    ``[OP_LOOK, CELL_i]`` with a single cell token.

    Grid attributes are drawn uniformly and independently of the question,
    so no text-only predictor beats chance in expectation.
    """
    if n_attributes < 2 or grid_size < 1:
        raise ValueError("need >= 2 attributes and >= 1 cell so answers are not inferable from text")
    if question not in QUESTION_FORMS:
        raise ValueError(f"unknown question form {question!r}")
    if n_attributes > 10 or grid_size > 8 or (question == "cell" and grid_size * grid_size > MAX_CELLS):
        raise ValueError("grid or attribute vocabulary does not fit the token map")
    sizes = _split_sizes(n, n_val, n_test)
    total = sum(sizes.values())
    rng = np.random.default_rng([seed, 202])
    cells = grid_size * grid_size

    def draw(r):
        attrs = r.integers(0, n_attributes, cells)
        row, col = (int(v) for v in r.integers(0, grid_size, 2))
        return (attrs.tobytes(), row, col), attrs, row, col

    items = _unique_draws(rng, draw, total, n_attributes ** cells * cells)
    splits, start = {}, 0
    for name in SPLITS:
        chunk = items[start:start + sizes[name]]
        start += sizes[name]
        m = len(chunk)
        attrs = np.asarray([c[1] for c in chunk], dtype=np.int64).reshape(m, cells)
        rows = np.asarray([c[2] for c in chunk], dtype=np.int64)
        cols = np.asarray([c[3] for c in chunk], dtype=np.int64)
        splits[name] = Split(
            vision=grid_features(attrs, grid_size, n_attributes, feature_dim),
            pre=np.full((m, 1), BOS, dtype=np.int64),
            ins=_question_tokens(question, rows, cols, grid_size),
            answer=DIGIT0 + (attrs[np.arange(m), rows * grid_size + cols] + shift) % n_attributes,
        )
    tag = f"-t{shift}" if shift else ""
    return Task(f"grounded-g{grid_size}a{n_attributes}{tag}-s{seed}", "grounded", "cell_attribute", seed,
                splits, [DIGIT0 + a for a in range(n_attributes)],
                {"grid_size": grid_size, "n_attributes": n_attributes, "feature_dim": feature_dim,
                 "question": question, "shift": shift})


def _question_tokens(form: str, rows: np.ndarray, cols: np.ndarray, grid_size: int) -> np.ndarray:
    look = np.full(len(rows), OP_LOOK)
    if form == "cell":
        return np.stack([look, CELL0 + rows * grid_size + cols], axis=1).astype(np.int64)
    return np.stack([look, ROW0 + rows, COL0 + cols], axis=1).astype(np.int64)


def queried_cell(split: Split, grid_size: int) -> np.ndarray:
    """Flat vision-token index each grounded question asks about."""
    if np.all(split.ins[:, -1] >= CELL0):
        return split.ins[:, -1] - CELL0
    return (split.ins[:, -2] - ROW0) * grid_size + (split.ins[:, -1] - COL0)


def text_only_majority_accuracy(task: Task, split: str = "test") -> float:
    """Accuracy of a predictor that sees only the question tokens.

    It answers with the most frequent training answer for that exact
    question (global majority for unseen questions).
    """
    train = task.split("train")
    by_question: dict[tuple, Counter] = {}
    for q, a in zip(map(tuple, train.ins), train.answer):
        by_question.setdefault(q, Counter())[int(a)] += 1
    overall = Counter(int(a) for a in train.answer)

    def pick(counter: Counter) -> int:
        top = max(counter.values())
        return min(a for a, c in counter.items() if c == top)

    fallback = pick(overall)
    target = task.split(split)
    preds = [pick(by_question[q]) if q in by_question else fallback for q in map(tuple, target.ins)]
    return float(np.mean(np.asarray(preds) == target.answer))


def to_bytes(task: Task) -> bytes:
    meta = {"task_id": task.task_id, "kind": task.kind, "skill": task.skill, "seed": task.seed,
            "answer_vocab": task.answer_vocab, "params": task.params}
    tensors = {}
    for name, sp in task.splits.items():
        tensors[f"{name}.vision"] = sp.vision.astype(np.float32)
        tensors[f"{name}.pre"] = sp.pre.astype(np.float32)
        tensors[f"{name}.ins"] = sp.ins.astype(np.float32)
        tensors[f"{name}.answer"] = sp.answer.astype(np.float32)
    return checkpoint_io.encode_tensors({"dataset": meta}, tensors)


def from_bytes(blob: bytes) -> Task:
    meta, tensors = checkpoint_io.decode_tensors(blob)
    meta = meta["dataset"]
    splits = {}
    for name in SPLITS:
        splits[name] = Split(
            vision=np.array(tensors[f"{name}.vision"], dtype=np.float32),
            pre=tensors[f"{name}.pre"].astype(np.int64),
            ins=tensors[f"{name}.ins"].astype(np.int64),
            answer=tensors[f"{name}.answer"].astype(np.int64),
        )
    return Task(meta["task_id"], meta["kind"], meta["skill"], int(meta["seed"]), splits,
                list(meta["answer_vocab"]), dict(meta["params"]))


def save_task(task: Task, path) -> None:
    checkpoint_io.atomic_write_bytes(path, to_bytes(task))


def load_task(path) -> Task:
    return from_bytes(Path(path).read_bytes())
