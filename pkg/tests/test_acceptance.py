"""End-to-end acceptance criteria; each prints one PASS/FAIL line in the terminal summary."""

import time

import numpy as np
import pytest

from plateau_lab import analysis as an
from plateau_lab import checkpoint_io as cio
from plateau_lab.interventions import prune_equivalent_forward
from plateau_lab.layout import MaskSpec
from plateau_lab.merging import MergeSpec, merge
from plateau_lab.model import Checkpoint, ModelConfig, decode_greedy, embed_multimodal, forward, init_checkpoint
from plateau_lab.pipeline import DeskConfig, run_desk
from plateau_lab.plateau import detect_plateau_onset, segmented_fit_knee

from conftest import SMALL, random_mllm, random_prompt
from gradcheck import grad_problem, finite_difference_errors
from synthetic import three_segment_curve

RESULTS: list[str] = []
DESK_SEEDS = (0, 1, 2, 3, 4)


def record(num: int, ok: bool, detail: str, elapsed: float, budget: float | None = None, extra=()):
    within = budget is None or elapsed < budget
    line = f"criterion {num:>2}: {'PASS' if ok and within else 'FAIL'}  {detail}  ({elapsed:.1f}s"
    line += f" / budget {budget:g}s)" if budget else ")"
    RESULTS.append(line)
    RESULTS.extend(extra)
    assert ok, line
    assert within, line


def test_01_merge_identity():
    t0 = time.perf_counter()
    cfg = ModelConfig()
    base, vlm = init_checkpoint(cfg, 1, gain_jitter=0.1), random_mllm(2, cfg)
    ok = True
    for layers in [(1,), (5, 6, 7), tuple(range(1, cfg.num_layers + 1)), (2, 9)]:
        for subset in ("attn_qkvo", "all_backbone"):
            d = cio.diff(merge(base, vlm, MergeSpec(layers, 0.0, 1.0, subset)), vlm)
            ok &= d.equal_bitwise and not d.nonzero()
    record(1, ok, "identity merge bitwise equals vlm", time.perf_counter() - t0, 1)


def test_02_merge_locality_and_arithmetic():
    t0 = time.perf_counter()
    cfg = ModelConfig()
    k0 = round(20 / 32 * cfg.num_layers)
    base, vlm = init_checkpoint(cfg, 3, gain_jitter=0.1), random_mllm(4, cfg)
    spec = MergeSpec.from_k0(k0, cfg.num_layers, 0.6, 0.4)
    merged = merge(base, vlm, spec)
    l1, l2 = np.float32(0.6), np.float32(0.4)
    inside = outside = 0
    ok = True
    for name in merged.tensors:
        if spec.selects(name):
            inside += 1
            ok &= merged[name].tobytes() == (l1 * base[name] + l2 * vlm[name]).astype(np.float32).tobytes()
        else:
            outside += 1
            ok &= merged[name].tobytes() == vlm[name].tobytes()
    ok &= inside == 4 * (cfg.num_layers - k0 + 1)
    record(2, ok, f"k0={k0}: {inside} tensors exact, {outside} untouched", time.perf_counter() - t0, 1)


def test_03_masking_noop():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    ok = True
    for seed in range(20):
        ck = random_mllm(seed)
        p = random_prompt(rng)
        x0, lay = embed_multimodal(ck, p)
        off = MaskSpec(SMALL.num_layers + 1)
        ok &= forward(ck, x0, lay, off).logits.tobytes() == forward(ck, x0, lay).logits.tobytes()
        a, b = decode_greedy(ck, p, off, max_new=3), decode_greedy(ck, p, None, max_new=3)
        ok &= a.tokens == b.tokens
        ok &= all(s.logits.tobytes() == u.logits.tobytes() for s, u in zip(a.steps, b.steps))
    record(3, ok, "k=L+1 forward/decode bitwise equal on 20 checkpoints", time.perf_counter() - t0, 10)


def test_04_mask_prune_equivalence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    worst = 0.0
    for trial in range(20):
        ck = random_mllm(100 + trial)
        p = random_prompt(rng)
        x0, lay = embed_multimodal(ck, p)
        for k in range(1, SMALL.num_layers + 1):
            ref = forward(ck, x0, lay, MaskSpec(k)).logits[lay.text_positions]
            got = prune_equivalent_forward(ck, p, MaskSpec(k)).logits
            worst = max(worst, float(np.max(np.abs(ref - got))))
    record(4, worst < 1e-5, f"max |masked - pruned| = {worst:.2e}", time.perf_counter() - t0, 30)


def test_05_gradient_correctness():
    t0 = time.perf_counter()
    ck, batch = grad_problem()
    errs = finite_difference_errors(ck, batch)
    worst_name = max(errs, key=errs.get)
    record(5, errs[worst_name] < 1e-4, f"{len(errs)} slots, worst rel err {errs[worst_name]:.1e} ({worst_name})",
           time.perf_counter() - t0, 60)


def test_06_attention_mass_partition():
    t0 = time.perf_counter()
    rng = np.random.default_rng(6)
    worst, masked_ok = 0.0, True
    for i in range(50):
        ck = random_mllm(i % 10)
        p = random_prompt(rng)
        prof = an.mass_profile(ck, p, "decode_res", max_new=2)
        for s in range(2):
            tot = sum(np.asarray(prof.per_step[src][s]) for src in an.SOURCES)
            worst = max(worst, float(np.max(np.abs(tot - 1.0))))
        k = int(rng.integers(1, SMALL.num_layers + 1))
        masked = an.mass_profile(ck, p, "decode_res", mask=MaskSpec(k), max_new=2)
        masked_ok &= all(v == 0.0 for step in masked.per_step["vis"] for v in step[k - 1:])
    record(6, worst <= 1e-6 and masked_ok, f"max |sum - 1| = {worst:.1e}, masked vis mass exactly 0",
           time.perf_counter() - t0, 30)


def test_07_plateau_detector_oracle():
    t0 = time.perf_counter()
    hits, invariant = 0, True
    for seed in range(200):
        y, _ = three_segment_curve(seed, sigma=0.01)
        seg = detect_plateau_onset(y)
        hits += seg.found and abs(seg.k_star - segmented_fit_knee(y)) <= 1
        a = float(np.random.default_rng(seed).uniform(0.1, 10))
        seg2 = detect_plateau_onset(a * y - 3.0)
        invariant &= (seg.found, seg.k_star) == (seg2.found, seg2.k_star)
    record(7, hits >= 190 and invariant, f"{hits}/200 within +-1 of oracle, affine invariant={invariant}",
           time.perf_counter() - t0, 10)


def test_10_format_round_trip(tmp_path):
    t0 = time.perf_counter()
    ok = True
    for seed in range(100):
        cfg = ModelConfig(num_layers=2 + seed % 3, hidden_dim=8, num_heads=2, vocab_size=32, max_seq_len=16,
                          vision_feature_dim=8, ffn_dim=16)
        ck = random_mllm(seed, cfg) if seed % 2 else init_checkpoint(cfg, seed)
        path = tmp_path / f"{seed}.ckpt"
        cio.save(ck, path)
        ok &= cio.diff(cio.load(path), ck).equal_bitwise
        names = list(ck.tensors)
        np.random.default_rng(seed).shuffle(names)
        ok &= cio.to_bytes(Checkpoint(ck.config, {n: ck[n] for n in names}, ck.kind)) == path.read_bytes()
    record(10, ok, "100 checkpoints round-trip bitwise, permutation-invariant bytes", time.perf_counter() - t0, 30)


@pytest.fixture(scope="module")
def desk_runs(tmp_path_factory):
    t0 = time.perf_counter()
    root = tmp_path_factory.mktemp("desk")
    runs = [run_desk(seed, DeskConfig(), out=root / f"seed{seed}") for seed in DESK_SEEDS]
    return runs, time.perf_counter() - t0


@pytest.mark.slow
def test_08_grid_search_floor(desk_runs):
    runs, elapsed = desk_runs
    ok = all(r["val_selected"] >= r["val_vlm"] for r in runs)
    detail = ", ".join(f"{r['val_selected']:.3f}>={r['val_vlm']:.3f}" for r in runs)
    record(8, ok, f"selected val >= vlm val on all seeds [{detail}]", elapsed)


@pytest.mark.slow
def test_09_desk_pipeline(desk_runs):
    runs, elapsed = desk_runs
    a = sum(r["sweep_gap"] >= 0.15 for r in runs)
    b = sum(r["plateau_found"] for r in runs)
    c = sum(r["test_merged"] >= r["test_vlm"] for r in runs)
    c_strict = sum(r["test_merged"] > r["test_vlm"] for r in runs)
    d = sum(r["late_mass_merged"] >= r["late_mass_vlm"] for r in runs)
    d_strict = sum(r["late_mass_merged"] > r["late_mass_vlm"] for r in runs)
    floor = sum(r["merged_is_vlm"] for r in runs)
    seeds = [f"    seed {r['seed']}: gap={r['sweep_gap']:.3f} k*={r['k_star']} k0={r['k0']} "
             f"lam=({r['lambda1']},{r['lambda2']}) test vlm={r['test_vlm']:.4f} merged={r['test_merged']:.4f} "
             f"late mass {r['late_mass_vlm']:.3f}->{r['late_mass_merged']:.3f}"
             f"{' (identity kept)' if r['merged_is_vlm'] else ''}"
             for r in runs]
    n = len(runs)
    ok = a == n and b >= 4 and c >= 4 and d >= 3
    record(9, ok, f"(a) {a}/{n} gap>=0.15, (b) {b}/{n} plateau, (c) {c}/{n} merged>=vlm "
                  f"[strict {c_strict}/{n}, soft], (d) {d}/{n} late mass >= [strict {d_strict}/{n}]; "
                  f"identity cell selected in {floor}/{n}", elapsed, 1800, seeds)
