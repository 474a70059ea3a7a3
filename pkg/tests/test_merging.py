import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from plateau_lab.checkpoint_io import diff
from plateau_lab.merging import (MergeSpec, MergedEvaluator, grid_cells, grid_search, lambda_grid, merge,
                                 parse_layer_set)
from plateau_lab.model import init_checkpoint
from plateau_lab.pipeline import PipelineConfig, plam_pipeline
from plateau_lab.taskgen import gen_grounded_task, gen_text_task
from plateau_lab.training import accuracy

from conftest import SMALL, random_mllm

L = SMALL.num_layers
ATTN = ("q", "k", "v", "o")


@pytest.fixture(scope="module")
def pair():
    base = init_checkpoint(SMALL, 11, gain_jitter=0.1)
    return base, random_mllm(12)


def test_spec_invariants():
    with pytest.raises(ValueError):
        MergeSpec((3,), 1.6, 0.0)
    with pytest.raises(ValueError):
        MergeSpec((3,), 0.5, -0.1)
    with pytest.raises(ValueError):
        MergeSpec((3,), 0.5, 0.5, "ffn_only")
    with pytest.raises(ValueError):
        MergeSpec((), 0.5, 0.5)
    with pytest.raises(ValueError):
        MergeSpec((0, 1), 0.5, 0.5).validate(L)


def test_spec_kv_round_trip():
    spec = MergeSpec.from_k0(3, L, 0.6, 0.4)
    assert spec.to_kv() == {"merge_layers": "3-4", "lambda1": "0.6", "lambda2": "0.4", "subset": "attn_qkvo"}
    assert MergeSpec.from_kv(spec.to_kv()) == spec
    gapped = MergeSpec((1, 3), 0.1, 0.2, "all_backbone")
    assert MergeSpec.from_kv(gapped.to_kv()) == gapped
    assert parse_layer_set("2-4,7") == (2, 3, 4, 7)


def test_attn_subset_selects_exactly_qkvo():
    spec = MergeSpec((2,), 0.5, 0.5)
    names = init_checkpoint(SMALL, 0).tensors
    chosen = sorted(n for n in names if spec.selects(n))
    assert chosen == sorted(f"layers.2.attn.{s}" for s in ATTN)
    assert spec.selects("layers.2.attn.q.bias") and not spec.selects("layers.2.ffn.up.bias")


@settings(max_examples=15, deadline=None)
@given(st.lists(st.integers(1, L), min_size=1, max_size=L), st.sampled_from(["attn_qkvo", "all_backbone"]))
def test_identity_is_bitwise(layers, subset):
    base, vlm = init_checkpoint(SMALL, 11), random_mllm(12)
    merged = merge(base, vlm, MergeSpec(tuple(layers), 0.0, 1.0, subset))
    rep = diff(merged, vlm)
    assert rep.equal_bitwise and not rep.nonzero()
    assert merged.kind == "merged"


def test_full_swap(pair):
    base, vlm = pair
    merged = merge(base, vlm, MergeSpec(tuple(range(1, L + 1)), 1.0, 0.0, "all_backbone"))
    for name in merged.tensors:
        src = base if name.startswith("layers.") else vlm
        assert merged[name].tobytes() == src[name].tobytes(), name


def test_arithmetic_and_locality(pair):
    base, vlm = pair
    spec = MergeSpec.from_k0(3, L, 0.6, 0.4)
    merged = merge(base, vlm, spec)
    l1, l2 = np.float32(0.6), np.float32(0.4)
    for name in merged.tensors:
        if spec.selects(name):
            w_b, w_v, w_m = base[name].ravel(), vlm[name].ravel(), merged[name].ravel()
            for i in range(0, w_m.size, 17):
                assert w_m[i] == np.float32(l1 * w_b[i] + l2 * w_v[i])
        else:
            assert merged[name].tobytes() == vlm[name].tobytes(), name
    assert merged["layers.2.attn.q"].tobytes() == vlm["layers.2.attn.q"].tobytes()


def test_linearity(pair):
    base, vlm = pair
    lay = (2, 3, 4)
    a = merge(base, vlm, MergeSpec(lay, 0.3, 0.2, "all_backbone"))
    b = merge(base, vlm, MergeSpec(lay, 0.4, 0.5, "all_backbone"))
    both = merge(base, vlm, MergeSpec(lay, 0.7, 0.7, "all_backbone"))
    zero = merge(base, vlm, MergeSpec(lay, 0.0, 0.0, "all_backbone"))
    for name in both.tensors:
        np.testing.assert_allclose(both[name], a[name] + b[name] - zero[name], atol=1e-6)


def test_biases_merged_when_present(pair):
    base, vlm = pair
    base = base.replace({"layers.3.attn.k.bias": np.ones(SMALL.hidden_dim, np.float32)})
    vlm = vlm.replace({"layers.3.attn.k.bias": np.zeros(SMALL.hidden_dim, np.float32)})
    merged = merge(base, vlm, MergeSpec((3,), 0.5, 1.0))
    np.testing.assert_array_equal(merged["layers.3.attn.k.bias"], 0.5)


def test_merge_errors(pair):
    base, vlm = pair
    other = init_checkpoint(SMALL.__class__(**{**SMALL.to_dict(), "ffn_dim": 16}), 0)
    with pytest.raises(ValueError):
        merge(other, vlm, MergeSpec((1,), 0.5, 0.5))
    with pytest.raises(ValueError):
        merge(base, base, MergeSpec((1,), 0.5, 0.5))
    with pytest.raises(ValueError):
        merge(base, vlm, MergeSpec((L + 1,), 0.5, 0.5))
    extra = base.replace({"layers.1.attn.q.bias": np.zeros(SMALL.hidden_dim, np.float32)})
    with pytest.raises(ValueError):
        merge(extra, vlm, MergeSpec((1,), 0.5, 0.5))


def test_lambda_grid_and_pruning():
    g = lambda_grid()
    assert len(g) == 16 and g[0] == 0.0 and g[-1] == 1.5 and g[3] == 0.3
    assert len(grid_cells(g, g)) == 256
    pruned = grid_cells(g, g, sum_tol=0.0)
    assert (0.0, 1.0) in pruned and all(abs(a + b - 1) < 1e-9 for a, b in pruned)
    assert (0.0, 1.0) in grid_cells([0.0, 1.5], [1.0, 1.5], sum_tol=0.0)


def test_grid_tie_breaking(pair):
    base, vlm = pair
    res = grid_search(base, vlm, [2, 3], [0.0, 0.5], [0.5, 1.0, 1.5], eval_fn=lambda s: 0.5)
    assert (res.best.k0, res.best.lambda1, res.best.lambda2) == (3, 0.0, 1.0)
    assert len(res.rows) == 12
    res = grid_search(base, vlm, [2, 3], [0.0, 0.5], [0.5, 1.5], eval_fn=lambda s: 0.5)
    assert res.best.lambda2 == 0.5  # |0.5-1| ties |1.5-1|; the smaller value wins
    res = grid_search(base, vlm, [2, 3], [0.0, 0.5], [1.0], eval_fn=lambda s: s.lambda1 + (s.k0 == 2))
    assert (res.best.k0, res.best.lambda1) == (2, 0.5)


def test_grid_single_cell_and_failures(pair):
    base, vlm = pair
    res = grid_search(base, vlm, [3], [0.2], [0.7], eval_fn=lambda s: 0.1)
    assert (res.best.k0, res.best.lambda1, res.best.lambda2, res.best_score) == (3, 0.2, 0.7, 0.1)

    def flaky(spec):
        if spec.lambda1 > 0:
            raise RuntimeError("bad cell")
        return 0.3

    res = grid_search(base, vlm, [3], [0.0, 0.4], [1.0], eval_fn=flaky)
    assert res.best.lambda1 == 0.0 and any("bad cell" in r.get("error", "") for r in res.rows)
    assert "bad cell" in res.to_csv()
    with pytest.raises(RuntimeError):
        grid_search(base, vlm, [3], [0.4], [1.0], eval_fn=flaky)


@pytest.fixture(scope="module")
def grounded():
    return gen_grounded_task(5, 96, n_val=48, n_test=48)


def test_cached_evaluator_matches_full_forward(pair, grounded):
    base, vlm = pair
    ev = MergedEvaluator(base, vlm, grounded, "val")
    spec = MergeSpec.from_k0(3, L, 0.7, 0.6)
    assert ev.score(spec) == accuracy(merge(base, vlm, spec), grounded.split("val"))
    assert ev.baseline() == accuracy(vlm, grounded.split("val"))
    gapped = MergeSpec((2, 4), 0.7, 0.6)
    assert ev.score(gapped) == accuracy(merge(base, vlm, gapped), grounded.split("val"))


def test_grid_floor_with_identity(pair, grounded):
    base, vlm = pair
    res = grid_search(base, vlm, [2, 3], [0.0, 0.5, 1.0], [0.5, 1.0], task=grounded)
    assert res.best_score >= res.baseline_score
    assert res.per_k0().keys() == {2, 3}


def test_pipeline_with_equal_inputs(grounded):
    vlm = random_mllm(3)
    text = gen_text_task(0, 40, n_val=16, n_test=16)
    cfg = PipelineConfig(radius=1, lambda_step=0.5, lambda_max=1.0, lambda_sum_tol=0.0)
    merged, report, grid = plam_pipeline(vlm, vlm, grounded, cfg, text_task=text)
    for t, by_split in report.deltas.items():
        assert all(v == 0.0 for v in by_split.values()), t
    assert report.final_spec["val_score"] >= report.final_spec["vlm_val_baseline"]
    d = report.to_dict()
    assert {"inputs", "sweep", "k_star", "k0_candidates", "final_spec", "scores"} <= d.keys()
