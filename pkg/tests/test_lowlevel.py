"""Low-level reconstruction head and the guidance substitution protocol."""

import numpy as np
import pytest

from sttm.autodiff import Tensor
from sttm.datamodel import SynthSpec, generate_synthetic
from sttm.highlevel import HighLevelModel
from sttm.lowlevel import (
    MODES,
    LowLevelModel,
    SubstitutionDraw,
    draw_substitution,
    eval_low,
    forward_low,
    loss_low,
    train_low_epoch,
)
from sttm.nn import rebind_parameters
from sttm.numerics import AdamW, LrSchedule, Rng, grad_check


def _model(gen, guidance=True, width=12, high_width=20, side=8):
    return LowLevelModel(
        {"s1": 10}, width=width, high_width=high_width, channels=2, side=side,
        rng=gen, dropout=0.0, guidance=guidance, base_channels=8,
    )


def test_substitution_frequencies(gen):
    counts = {mode: 0 for mode in MODES}
    n = 10_000
    for _ in range(n):
        counts[draw_substitution(gen).mode] += 1
    assert abs(counts["guidance_substituted"] / n - 0.30) < 0.02
    assert abs(counts["lowlevel_substituted"] / n - 0.25) < 0.02
    assert abs(counts["both_real"] / n - 0.45) < 0.02


def test_substitution_validation(gen):
    with pytest.raises(ValueError, match="invalid substitution"):
        draw_substitution(gen, p_guidance=0.8, p_lowlevel=0.3)
    with pytest.raises(ValueError, match="unknown substitution mode"):
        SubstitutionDraw("swap_everything")


def test_forward_shapes_and_projection(gen):
    model = _model(gen)
    assert model.guidance_proj is not None  # high width 20 != low width 12
    vox = gen.standard_normal((4, 10)).astype(np.float32)
    guide = gen.standard_normal((4, 20)).astype(np.float32)
    out = forward_low(model, vox, "s1", guide, SubstitutionDraw("both_real"))
    assert out.shape == (4, 2, 8, 8)


def test_no_projection_when_widths_match(gen):
    model = _model(gen, high_width=12)
    assert model.guidance_proj is None


def test_guidance_substitution_ignores_guidance_vector(gen):
    model = _model(gen)
    vox = gen.standard_normal((3, 10)).astype(np.float32)
    draw = SubstitutionDraw("guidance_substituted")
    a = forward_low(model, vox, "s1", None, draw).data
    b = forward_low(model, vox, "s1", gen.standard_normal((3, 20)).astype(np.float32), draw).data
    np.testing.assert_array_equal(a, b)


def test_lowlevel_substitution_ignores_voxel_path_differences(gen):
    # with the backbone output substituted, only guidance drives the output
    model = _model(gen)
    guide = gen.standard_normal((3, 20)).astype(np.float32)
    draw = SubstitutionDraw("lowlevel_substituted")
    a = forward_low(model, gen.standard_normal((3, 10)).astype(np.float32), "s1", guide, draw).data
    b = forward_low(model, gen.standard_normal((3, 10)).astype(np.float32), "s1", guide, draw).data
    np.testing.assert_allclose(a, b, atol=1e-6)


def test_both_real_requires_guidance_vector(gen):
    model = _model(gen)
    vox = gen.standard_normal((2, 10)).astype(np.float32)
    with pytest.raises(ValueError, match="guidance vector required"):
        forward_low(model, vox, "s1", None, SubstitutionDraw("both_real"))


def test_disabled_guidance_rejects_substitution_draws(gen):
    model = _model(gen, guidance=False)
    vox = gen.standard_normal((2, 10)).astype(np.float32)
    out = forward_low(model, vox, "s1", None, SubstitutionDraw("both_real"))
    assert out.shape == (2, 2, 8, 8)
    with pytest.raises(ValueError, match="require the guidance path"):
        forward_low(model, vox, "s1", None, SubstitutionDraw("guidance_substituted"))


def test_forward_validates_subject_and_shape(gen):
    model = _model(gen)
    with pytest.raises(ValueError, match="no adapter"):
        forward_low(model, np.zeros((2, 10), dtype=np.float32), "s9", None, SubstitutionDraw("both_real"))
    with pytest.raises(ValueError, match="does not match"):
        forward_low(model, np.zeros((2, 11), dtype=np.float32), "s1", None, SubstitutionDraw("both_real"))


def test_upsampler_rejects_bad_side(gen):
    with pytest.raises(ValueError, match="upsampling chain"):
        _model(gen, side=7)


def test_loss_low_is_mean_absolute_error(gen):
    pred = Tensor(np.zeros((2, 1, 2, 2), dtype=np.float32))
    target = np.full((2, 1, 2, 2), 0.5, dtype=np.float32)
    assert loss_low(pred, target).item() == pytest.approx(0.5)
    with pytest.raises(ValueError, match="shape mismatch"):
        loss_low(pred, np.zeros((2, 1, 2, 3), dtype=np.float32))


def test_gradients_reach_both_substitutes(gen):
    model = _model(gen, width=8, high_width=8, side=8)
    vox = Tensor(gen.standard_normal((2, 10)))
    target = gen.standard_normal((2, 2, 8, 8)).astype(np.float32)

    def loss_for(draw_mode):
        def loss_fn(work):
            rebind_parameters(model, work)
            pred = forward_low(model, vox.data, "s1", np.zeros((2, 8), dtype=np.float32), SubstitutionDraw(draw_mode))
            return loss_low(pred, target)

        return loss_fn

    names = dict(model.named_parameters())
    for mode, param in (("guidance_substituted", "sub_guidance"), ("lowlevel_substituted", "sub_lowlevel")):
        err = grad_check(loss_for(mode), {param: names[param]}, eps=1e-4, coord_limit=8)
        assert err < 1e-4, mode


def test_train_epoch_and_eval(gen):
    spec = SynthSpec(
        n_subjects=1, latent_dim=4, voxels_per_subject=10, n_train=32, n_test=8,
        n_tokens=4, embed_dim=8, latent_channels=2, latent_size=8, seed=2,
    )
    datasets, bundle, _ = generate_synthetic(spec)
    train = [d for d in datasets if d.split == "train"]
    test = [d for d in datasets if d.split == "test"]
    rng = Rng(4)
    high = HighLevelModel({"subj01": 10}, width=16, k=4, d_low=8, d=8, rng=rng.stream("h"), dropout=0.0)
    low = LowLevelModel({"subj01": 10}, width=12, high_width=16, channels=2, side=8,
                        rng=rng.stream("l"), dropout=0.0, base_channels=8)
    opt = AdamW(low.parameters())
    sched = LrSchedule(max_lr=1e-3, total_steps=16)
    metrics = train_low_epoch(low, high, train, bundle, opt, sched, epoch=0, batch_size=8, rng=rng)
    assert metrics["steps"] == 4
    assert sum(metrics[f"mode_{m}"] for m in MODES) == 4
    assert np.isfinite(metrics["l1"])

    l1, grids = eval_low(low, high, test, bundle)
    assert np.isfinite(l1)
    assert grids["subj01"].shape == (8, 2, 8, 8)


def test_train_epoch_requires_high_model_when_guided(gen):
    model = _model(gen)
    with pytest.raises(ValueError, match="no high-level model"):
        train_low_epoch(model, None, [], None, None, None, epoch=0, batch_size=4, rng=Rng(0))


def test_add_subject_collision(gen):
    model = _model(gen)
    model.add_subject("s2", 6, gen)
    with pytest.raises(ValueError, match="already has an adapter"):
        model.add_subject("s2", 6, gen)
