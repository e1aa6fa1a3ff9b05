"""Low-level latent reconstruction: adapters and a shared backbone whose
output is additively fused with projected high-level guidance, refined by a
residual block, and upsampled to a C x S x S latent grid under L1 loss.

During training the guidance vector is replaced by a learnable substitute on
30% of steps and the backbone output on another 25% (disjoint), so either
path alone must stay predictive. With guidance disabled (the ablation) the
fusion reduces to the backbone output and no substitution is drawn.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, no_grad
from .datamodel import SubjectDataset, TargetBundle, make_batches
from .highlevel import SubjectAdapter, _Backbone, forward_high
from .nn import Linear, Module, Parameter, ResidualBlock, Upsample2x, trunc_normal
from .numerics import LrSchedule, Rng, onecycle_lr

__all__ = [
    "LowLevelModel",
    "SubstitutionDraw",
    "MODES",
    "draw_substitution",
    "forward_low",
    "loss_low",
    "train_low_epoch",
    "eval_low",
]

MODES = ("both_real", "guidance_substituted", "lowlevel_substituted")


@dataclass
class SubstitutionDraw:
    mode: str

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown substitution mode {self.mode!r}")


def draw_substitution(
    rng: np.random.Generator, p_guidance: float = 0.30, p_lowlevel: float = 0.25
) -> SubstitutionDraw:
    """One uniform draw partitioned into the three mutually exclusive modes."""
    if p_guidance < 0 or p_lowlevel < 0 or p_guidance + p_lowlevel > 1:
        raise ValueError(f"invalid substitution probabilities {p_guidance}/{p_lowlevel}")
    u = rng.random()
    if u < p_guidance:
        return SubstitutionDraw("guidance_substituted")
    if u < p_guidance + p_lowlevel:
        return SubstitutionDraw("lowlevel_substituted")
    return SubstitutionDraw("both_real")


class _Upsampler(Module):
    """Linear seed grid, then stride-2 transposed convolutions up to S x S."""

    def __init__(self, width: int, channels: int, side: int, rng: np.random.Generator, base_channels: int = 32):
        n = 0
        for cand in (3, 2, 1):
            if side % (2**cand) == 0 and side // (2**cand) >= 4:
                n = cand
                break
        if n == 0:
            raise ValueError(f"latent side {side} not divisible into an upsampling chain")
        self._s0 = side // (2**n)
        chain = [max(base_channels >> i, channels) for i in range(n)] + [channels]
        self._c0 = chain[0]
        self.fc = Linear(width, self._c0 * self._s0 * self._s0, rng)
        self.convs = [Upsample2x(chain[i], chain[i + 1], rng) for i in range(n)]

    def __call__(self, h: Tensor) -> Tensor:
        b = h.shape[0]
        x = self.fc(h).reshape(b, self._c0, self._s0, self._s0)
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < len(self.convs) - 1:
                x = x.gelu()
        return x


class LowLevelModel(Module):
    def __init__(
        self,
        subject_dims: dict[str, int],
        width: int,
        high_width: int,
        channels: int,
        side: int,
        rng: np.random.Generator,
        dropout: float = 0.1,
        guidance: bool = True,
        base_channels: int = 32,
    ):
        self._width = width
        self._dropout = dropout
        self.guidance_enabled = guidance
        self.adapter = {sid: SubjectAdapter(v, width, rng, dropout) for sid, v in sorted(subject_dims.items())}
        self.backbone = _Backbone(width, rng, dropout)
        self.sub_guidance = Parameter(trunc_normal(rng, (width,)))
        self.sub_lowlevel = Parameter(trunc_normal(rng, (width,)))
        self.guidance_proj = Linear(high_width, width, rng) if high_width != width else None
        self.post_fusion = ResidualBlock(width, rng, dropout)
        self.upsampler = _Upsampler(width, channels, side, rng, base_channels)

    def add_subject(self, subject_id: str, voxel_count: int, rng: np.random.Generator) -> None:
        if subject_id in self.adapter:
            raise ValueError(f"subject {subject_id!r} already has an adapter")
        self.adapter[subject_id] = SubjectAdapter(voxel_count, self._width, rng, self._dropout)


def forward_low(
    model: LowLevelModel,
    voxels: np.ndarray,
    subject_id: str,
    guidance,
    draw: SubstitutionDraw,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Fused = (backbone output | substitute) + (projected guidance | substitute),
    refined and upsampled; returns a (B, C, S, S) grid."""
    if subject_id not in model.adapter:
        raise ValueError(f"no adapter for subject {subject_id!r}")
    adapter = model.adapter[subject_id]
    voxels = np.asarray(voxels, dtype=np.float32)
    if voxels.ndim != 2 or voxels.shape[1] != adapter._voxel_count:
        raise ValueError(f"voxel batch shape {voxels.shape} does not match subject {subject_id!r}")
    b = voxels.shape[0]
    back = model.backbone(adapter(Tensor(voxels), rng), rng)

    if not model.guidance_enabled:
        if draw.mode != "both_real":
            raise ValueError("substitution draws require the guidance path to be enabled")
        fused = back
    else:
        if draw.mode == "lowlevel_substituted":
            low = model.sub_lowlevel.reshape(1, model._width).broadcast_to((b, model._width))
        else:
            low = back
        if draw.mode == "guidance_substituted":
            guide = model.sub_guidance.reshape(1, model._width).broadcast_to((b, model._width))
        else:
            if guidance is None:
                raise ValueError("guidance vector required unless the draw substitutes it")
            g = guidance if isinstance(guidance, Tensor) else Tensor(np.asarray(guidance, dtype=np.float32))
            guide = model.guidance_proj(g) if model.guidance_proj is not None else g
        fused = low + guide

    return model.upsampler(model.post_fusion(fused, rng))


def loss_low(pred: Tensor, target) -> Tensor:
    """Mean absolute error over every grid entry."""
    target = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=np.float32))
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    return (pred - target).abs().mean()


def train_low_epoch(
    model: LowLevelModel,
    high_model,
    datasets: list[SubjectDataset],
    bundle: TargetBundle,
    optimizer,
    sched: LrSchedule,
    epoch: int,
    batch_size: int,
    rng: Rng,
    p_guidance: float = 0.30,
    p_lowlevel: float = 0.25,
) -> dict:
    """One L1 epoch; guidance comes from the frozen high-level backbone in eval
    mode (no gradient reaches it). Requires `high_model` when guidance is on."""
    if model.guidance_enabled and high_model is None:
        raise ValueError("guidance is enabled but no high-level model was provided")
    g_batch = rng.stream(f"low.e{epoch}.batches")
    g_drop = rng.stream(f"low.e{epoch}.dropout")
    g_draw = rng.stream(f"low.e{epoch}.draws")
    sums = {"l1": 0.0}
    counts = {mode: 0 for mode in MODES}
    steps = 0
    for batch in make_batches(datasets, batch_size, g_batch, with_mixup=False):
        if model.guidance_enabled:
            with no_grad():
                hid = forward_high(high_model, batch.voxels, batch.subject_id, rng=None).backbone_hidden
            guidance = hid.data
            draw = draw_substitution(g_draw, p_guidance, p_lowlevel)
        else:
            guidance = None
            draw = SubstitutionDraw("both_real")
        pred = forward_low(model, batch.voxels, batch.subject_id, guidance, draw, rng=g_drop)
        loss = loss_low(pred, bundle.latents[batch.stimulus_ids])
        optimizer.zero_grad()
        loss.backward()
        lr = onecycle_lr(min(optimizer.state.step, sched.total_steps - 1), sched)
        optimizer.step(lr)
        sums["l1"] += loss.item()
        counts[draw.mode] += 1
        steps += 1
    metrics = {"l1": sums["l1"] / max(steps, 1), "steps": steps, "epoch": epoch}
    metrics.update({f"mode_{mode}": count for mode, count in counts.items()})
    return metrics


def eval_low(
    model: LowLevelModel, high_model, datasets: list[SubjectDataset], bundle: TargetBundle
) -> tuple[float, dict[str, np.ndarray]]:
    """Deterministic test L1 (both paths real); returns (mean L1, grids per subject)."""
    total, count = 0.0, 0
    grids: dict[str, np.ndarray] = {}
    with no_grad():
        for ds in datasets:
            guidance = None
            if model.guidance_enabled:
                guidance = forward_high(high_model, ds.voxels, ds.subject_id, rng=None).backbone_hidden.data
            pred = forward_low(model, ds.voxels, ds.subject_id, guidance, SubstitutionDraw("both_real"), rng=None)
            target = bundle.latents[ds.stimulus_ids]
            total += float(np.abs(pred.data - target).mean()) * len(ds.stimulus_ids)
            count += len(ds.stimulus_ids)
            grids[ds.subject_id] = pred.data
    return total / max(count, 1), grids
