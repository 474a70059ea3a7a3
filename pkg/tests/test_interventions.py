import numpy as np
import pytest

from plateau_lab import harness
from plateau_lab.interventions import EquivalenceError, SweepProfile, mask_sweep, prune_equivalent_forward
from plateau_lab.layout import MaskSpec, SequenceLayout, apply_mask
from plateau_lab.model import embed_batch, embed_multimodal, forward
from plateau_lab.taskgen import gen_grounded_task

from conftest import SMALL, random_mllm, random_prompt

L = SMALL.num_layers


def test_apply_mask_examples():
    lay = SequenceLayout(2, 4, 3)
    causal = np.triu(np.ones((9, 9), bool), 1)
    for l in range(1, L + 1):
        np.testing.assert_array_equal(apply_mask(lay, MaskSpec(L + 1), l).banned, causal)
    b = apply_mask(lay, MaskSpec(1), 1).banned
    text_rows = [0, 1, 6, 7, 8]
    assert b[np.ix_(text_rows, range(2, 6))].all()
    assert apply_mask(lay, MaskSpec(5), 5, num_layers=8).banned[8, 2:6].all()
    assert not apply_mask(lay, MaskSpec(5), 4, num_layers=8).banned[8, 2:6].any()


def test_apply_mask_layer_range():
    with pytest.raises(ValueError):
        apply_mask(SequenceLayout(1, 1, 1), MaskSpec(2), 0)
    with pytest.raises(ValueError):
        apply_mask(SequenceLayout(1, 1, 1), MaskSpec(2), 5, num_layers=4)


def test_prune_matches_masked_forward(rng):
    for trial in range(4):
        ck = random_mllm(trial)
        p = random_prompt(rng)
        x0, lay = embed_multimodal(ck, p)
        for k in range(1, L + 1):
            ref = forward(ck, x0, lay, MaskSpec(k)).logits[lay.text_positions]
            got = prune_equivalent_forward(ck, p, MaskSpec(k), verify=True).logits
            assert np.max(np.abs(ref - got)) < 1e-5


def test_prune_batched_input(rng):
    ck = random_mllm(0)
    task = gen_grounded_task(0, 16, n_val=4, n_test=4)
    sp = task.split("test")
    x0, lay = embed_batch(ck, sp.vision, sp.pre, sp.ins)
    got = prune_equivalent_forward(ck, (x0, lay), MaskSpec(2)).logits
    ref = forward(ck, x0, lay, MaskSpec(2)).logits[:, lay.text_positions]
    assert got.shape == ref.shape and np.max(np.abs(got - ref)) < 1e-5


def test_prune_rejects_no_mask(small_mllm, rng):
    with pytest.raises(ValueError):
        prune_equivalent_forward(small_mllm, random_prompt(rng), MaskSpec(L + 1))


def test_equivalence_error_is_assertion():
    assert issubclass(EquivalenceError, AssertionError)


@pytest.fixture(scope="module")
def sweep_setup():
    return random_mllm(4), gen_grounded_task(1, 64, n_val=32, n_test=32)


def test_sweep_endpoint_equals_unmasked(sweep_setup):
    ck, task = sweep_setup
    prof = mask_sweep(ck, task, "test")
    assert prof.ks == list(range(1, L + 2)) and prof.complete
    prof.validate(L)
    assert prof.score_at(L + 1) == harness.evaluate(ck, task, "test").score


def test_sweep_deterministic_and_parallel(sweep_setup):
    ck, task = sweep_setup
    a = mask_sweep(ck, task, "val")
    b = mask_sweep(ck, task, "val", workers=3)
    assert a.points == b.points


def test_sweep_partial_on_failure(sweep_setup, monkeypatch):
    ck, task = sweep_setup
    real = harness.evaluate

    def flaky(ckpt, task, split, mask=None, **kw):
        if mask is not None and mask.k == 3:
            raise RuntimeError("boom")
        return real(ckpt, task, split, mask, **kw)

    monkeypatch.setattr(harness, "evaluate", flaky)
    prof = mask_sweep(ck, task, "val")
    assert not prof.complete and prof.ks == [1, 2]
    with pytest.raises(ValueError):
        prof.validate(L)


def test_sweep_stride(sweep_setup):
    ck, task = sweep_setup
    assert mask_sweep(ck, task, "val", stride=2).ks == [1, 3, 5]


def test_profile_save_load(tmp_path):
    prof = SweepProfile("m", "t", [(1, 0.1), (2, 0.5), (3, 0.75)], split="val", meta={"seeds": [0]})
    prof.save(tmp_path / "p.csv")
    assert (tmp_path / "p.csv").read_text().splitlines()[0] == "k,score"
    back = SweepProfile.load(tmp_path / "p.csv")
    assert back.points == prof.points and back.split == "val" and back.meta["seeds"] == [0]


def test_profile_score_range():
    with pytest.raises(ValueError):
        SweepProfile("m", "t", [(1, 0.1), (2, 1.5), (3, 0.2)]).validate(2)
