"""High-level semantic pipeline: per-subject adapters into a shared residual
MLP backbone, tokenization into K brain tokens, a per-token projector, and the
contrastive objectives (token-level and CLS-level, in mixup and soft-label
flavors) combined with the prior loss under random weighting.

Contrastive inputs are validated to be unit rows; `flatten_normalize` is the
canonical way to turn a (B, K, D) token array into unit-norm (B, K*D) rows
(per-token normalization, flatten, divide by sqrt(K)).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, no_grad
from .datamodel import Batch, MixupPlan, SubjectDataset, TargetBundle, make_batches
from .nn import Linear, Module, ResidualBlock
from .numerics import LrSchedule, Rng, l2_normalize, onecycle_lr, softmax_rows
from . import prior as prior_mod

__all__ = [
    "SubjectAdapter",
    "HighLevelModel",
    "HighLevelOutputs",
    "LossWeights",
    "forward_high",
    "flatten_normalize",
    "loss_fvc",
    "loss_gvlc",
    "loss_bimixco",
    "loss_softclip",
    "loss_high",
    "train_high_epoch",
    "bimixco_epochs",
]


class SubjectAdapter(Module):
    def __init__(self, voxel_count: int, width: int, rng: np.random.Generator, dropout: float = 0.1):
        self.proj = Linear(voxel_count, width, rng)
        self.res = ResidualBlock(width, rng, dropout)
        self._voxel_count = voxel_count

    def __call__(self, x: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        return self.res(self.proj(x), rng)


class _Backbone(Module):
    def __init__(self, width: int, rng: np.random.Generator, dropout: float = 0.1):
        self._names = []
        for i in range(4):
            setattr(self, f"block{i}", ResidualBlock(width, rng, dropout))
            self._names.append(f"block{i}")

    def __call__(self, x: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        for name in self._names:
            x = getattr(self, name)(x, rng)
        return x


class _Tokenizer(Module):
    def __init__(self, width: int, k: int, d_low: int, hidden: int, d: int, rng: np.random.Generator):
        self.to_tokens = Linear(width, k * d_low, rng)
        self.fc1 = Linear(d_low, hidden, rng)
        self.fc2 = Linear(hidden, d, rng)
        self._k = k
        self._d_low = d_low

    def __call__(self, h: Tensor) -> Tensor:
        b = h.shape[0]
        tokens = self.to_tokens(h).reshape(b, self._k, self._d_low)
        return self.fc2(self.fc1(tokens).gelu())


class _Projector(Module):
    def __init__(self, d: int, rng: np.random.Generator):
        self.fc1 = Linear(d, d, rng)
        self.fc2 = Linear(d, d, rng)

    def __call__(self, tokens: Tensor) -> Tensor:
        return self.fc2(self.fc1(tokens).gelu())


class HighLevelModel(Module):
    """Adapters are keyed by subject id; everything else is shared."""

    def __init__(
        self,
        subject_dims: dict[str, int],
        width: int,
        k: int,
        d_low: int,
        d: int,
        rng: np.random.Generator,
        dropout: float = 0.1,
        tokenizer_hidden: int | None = None,
    ):
        self._width = width
        self._dropout = dropout
        self.adapter = {
            sid: SubjectAdapter(v, width, rng, dropout) for sid, v in sorted(subject_dims.items())
        }
        self.backbone = _Backbone(width, rng, dropout)
        self.tokenizer = _Tokenizer(width, k, d_low, tokenizer_hidden or d_low, d, rng)
        self.projector = _Projector(d, rng)

    def add_subject(self, subject_id: str, voxel_count: int, rng: np.random.Generator) -> None:
        if subject_id in self.adapter:
            raise ValueError(f"subject {subject_id!r} already has an adapter")
        self.adapter[subject_id] = SubjectAdapter(voxel_count, self._width, rng, self._dropout)


@dataclass
class HighLevelOutputs:
    backbone_hidden: Tensor  # B x h
    brain_tokens: Tensor  # B x K x D
    projected: Tensor  # B x K x D, unit rows
    cls: Tensor  # B x D, projected token 0


@dataclass
class LossWeights:
    beta: float = 0.4
    tau: float = 0.05
    alpha_low: float = 0.05
    alpha_high: float = 0.95
    alpha_override: float | None = None


def forward_high(
    model: HighLevelModel, voxels: np.ndarray, subject_id: str, rng: np.random.Generator | None = None
) -> HighLevelOutputs:
    if subject_id not in model.adapter:
        raise ValueError(f"no adapter for subject {subject_id!r}")
    adapter = model.adapter[subject_id]
    voxels = np.asarray(voxels, dtype=np.float32)
    if voxels.ndim != 2 or voxels.shape[1] != adapter._voxel_count:
        raise ValueError(
            f"voxel batch shape {voxels.shape} does not match subject {subject_id!r} "
            f"width {adapter._voxel_count}"
        )
    hidden = model.backbone(adapter(Tensor(voxels), rng), rng)
    brain_tokens = model.tokenizer(hidden)
    raw = model.projector(brain_tokens)
    # eps guards the exact-zero row only; it must sit far below any real
    # squared norm (rows start near 1e-8 under the 0.02-std init)
    norms = (raw.square().sum(axis=-1, keepdims=True) + 1e-24).sqrt()
    projected = raw / norms
    return HighLevelOutputs(
        backbone_hidden=hidden,
        brain_tokens=brain_tokens,
        projected=projected,
        cls=projected[:, 0, :],
    )


def flatten_normalize(tokens: Tensor | np.ndarray) -> Tensor:
    """Per-token L2 normalization, flatten to (B, K*D), scale to unit rows."""
    if not isinstance(tokens, Tensor):
        tokens = Tensor(np.asarray(tokens, dtype=np.float32))
    b, k, d = tokens.shape
    norms = (tokens.square().sum(axis=-1, keepdims=True) + 1e-24).sqrt()
    unit = tokens / norms
    return unit.reshape(b, k * d) * (1.0 / math.sqrt(k))


def _require_unit_rows(x: Tensor, name: str, tol: float = 1e-4) -> None:
    norms = np.sqrt((x.data * x.data).sum(axis=-1))
    err = float(np.max(np.abs(norms - 1.0)))
    if err > tol:
        raise ValueError(f"{name} rows must be unit-norm (max deviation {err:.2e})")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))


def loss_bimixco(p_star: Tensor, t: Tensor | np.ndarray, plan: MixupPlan, tau: float) -> Tensor:
    """Bidirectional mixup contrastive loss.

    Row direction weights the diagonal by lambda_i and column k_i by
    (1 - lambda_i); the column direction collects the same weights transposed
    through the {l | k_l = j} terms, so one weight matrix serves both.
    """
    lam = np.asarray(plan.lam, dtype=np.float64)
    if np.any(lam <= 0.0) or np.any(lam > 1.0):
        raise ValueError("mixup factors must lie in (0, 1]")
    t = _as_tensor(t)
    b = p_star.shape[0]
    logits = (p_star @ t.transpose((1, 0))) * (1.0 / tau)
    weights = np.zeros((b, b), dtype=np.float64)
    idx = np.arange(b)
    np.add.at(weights, (idx, idx), lam)
    np.add.at(weights, (idx, np.asarray(plan.k)), 1.0 - lam)
    w = Tensor(weights.astype(p_star.dtype))
    log_rows = logits.log_softmax()
    log_cols = logits.transpose((1, 0)).log_softmax().transpose((1, 0))
    return -((log_rows + log_cols) * w).sum()


def loss_softclip(p: Tensor, t: Tensor | np.ndarray, tau: float) -> Tensor:
    """Soft-label contrastive loss: targets are softmax rows of t.t^T/tau,
    averaged over the written direction and its transpose counterpart."""
    t = _as_tensor(t)
    soft = softmax_rows(t.data @ t.data.T, tau).astype(p.dtype)
    g = Tensor(soft)
    logits = (p @ t.transpose((1, 0))) * (1.0 / tau)
    d1 = -(logits.log_softmax() * g).sum()
    d2 = -(logits.transpose((1, 0)).log_softmax() * g).sum()
    return (d1 + d2) * 0.5


def _contrast(p: Tensor, t, kind: str, tau: float, plan: MixupPlan | None) -> Tensor:
    if kind == "bimixco":
        if plan is None:
            raise ValueError("bimixco requires a MixupPlan")
        return loss_bimixco(p, t, plan, tau)
    if kind == "softclip":
        return loss_softclip(p, t, tau)
    raise ValueError(f"unknown contrast kind {kind!r}")


def loss_fvc(
    projected: Tensor, targets, tau: float, contrast_kind: str, plan: MixupPlan | None = None
) -> Tensor:
    targets = _as_tensor(targets)
    if projected.shape != targets.shape:
        raise ValueError(f"shape mismatch: {projected.shape} vs {targets.shape}")
    _require_unit_rows(projected, "projected")
    _require_unit_rows(targets, "targets")
    return _contrast(projected, targets, contrast_kind, tau, plan)


def loss_gvlc(
    b_cls: Tensor, v_cls, t_cls, tau: float, contrast_kind: str, plan: MixupPlan | None = None
) -> Tensor:
    v_cls, t_cls = _as_tensor(v_cls), _as_tensor(t_cls)
    for x, name in ((b_cls, "b_cls"), (v_cls, "v_cls"), (t_cls, "t_cls")):
        if x.shape != b_cls.shape:
            raise ValueError(f"{name} shape {x.shape} does not match {b_cls.shape}")
        _require_unit_rows(x, name)
    visual = _contrast(b_cls, v_cls, contrast_kind, tau, plan)
    textual = _contrast(b_cls, t_cls, contrast_kind, tau, plan)
    return (visual + textual) * 0.5


def loss_high(fvc, gvlc, prior_loss, weights: LossWeights, rng: np.random.Generator | None = None):
    """Combined objective: alpha*(fvc + beta*gvlc) + (1-alpha)*prior, with
    alpha drawn per step from U(alpha_low, alpha_high) unless overridden."""
    parts = []
    for x in (fvc, gvlc, prior_loss):
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
        if not np.all(np.isfinite(x.data)):
            raise ValueError("loss components must be finite")
        parts.append(x)
    fvc, gvlc, prior_loss = parts
    if weights.alpha_override is not None:
        alpha = float(weights.alpha_override)
    else:
        if rng is None:
            raise ValueError("rng required when alpha is not overridden")
        alpha = float(rng.uniform(weights.alpha_low, weights.alpha_high))
    return (fvc + gvlc * weights.beta) * alpha + prior_loss * (1.0 - alpha)


def bimixco_epochs(total_epochs: int, frac: float = 0.35) -> int:
    """Number of leading epochs trained with BiMixCo (the rest use SoftCLIP)."""
    return math.ceil(frac * total_epochs)


def train_high_epoch(
    model: HighLevelModel,
    prior_model,
    datasets: list[SubjectDataset],
    bundle: TargetBundle,
    optimizer,
    sched: LrSchedule,
    noise_sched,
    weights: LossWeights,
    epoch: int,
    total_epochs: int,
    batch_size: int,
    rng: Rng,
    bimixco_frac: float = 0.35,
    mask_ratio: float = 0.35,
    mask_mode: str = "condition",
) -> dict:
    """One joint epoch over all subjects: contrastive losses + prior MSE backed
    through a single optimizer step per batch.

    Epochs below ceil(bimixco_frac * total) run BiMixCo on mixup batches; later
    epochs run SoftCLIP on plain batches. Prior targets are always the unmixed
    per-token-normalized visual tokens of the original batch items.
    """
    phase = "bimixco" if epoch < bimixco_epochs(total_epochs, bimixco_frac) else "softclip"
    g_batch = rng.stream(f"high.e{epoch}.batches")
    g_drop = rng.stream(f"high.e{epoch}.dropout")
    g_alpha = rng.stream(f"high.e{epoch}.alpha")
    g_prior = rng.stream(f"high.e{epoch}.prior")

    token_norms = np.sqrt((bundle.visual_tokens**2).sum(axis=-1, keepdims=True)) + 1e-12
    tokens_unit = bundle.visual_tokens / token_norms
    v_cls_unit = l2_normalize(bundle.visual_cls)
    t_cls_unit = l2_normalize(bundle.text_cls)

    sums = {"fvc": 0.0, "gvlc": 0.0, "prior": 0.0, "loss": 0.0}
    steps = 0
    for batch in make_batches(datasets, batch_size, g_batch, with_mixup=phase == "bimixco"):
        ids = batch.stimulus_ids
        outs = forward_high(model, batch.voxels, batch.subject_id, rng=g_drop)
        b, k, d = outs.projected.shape
        p_flat = outs.projected.reshape(b, k * d) * (1.0 / math.sqrt(k))
        t_flat = tokens_unit[ids].reshape(b, k * d) / math.sqrt(k)
        fvc = loss_fvc(p_flat, t_flat, weights.tau, phase, batch.plan)
        gvlc = loss_gvlc(
            outs.cls, v_cls_unit[ids], t_cls_unit[ids], weights.tau, phase, batch.plan
        )
        lp = prior_mod.loss_prior(
            prior_model,
            outs.brain_tokens,
            tokens_unit[ids],
            noise_sched,
            g_prior,
            rho=mask_ratio,
            mask_mode=mask_mode,
            dropout_rng=g_drop,
        )
        total = loss_high(fvc, gvlc, lp, weights, g_alpha)
        optimizer.zero_grad()
        total.backward()
        lr = onecycle_lr(min(optimizer.state.step, sched.total_steps - 1), sched)
        optimizer.step(lr)
        sums["fvc"] += fvc.item()
        sums["gvlc"] += gvlc.item()
        sums["prior"] += lp.item()
        sums["loss"] += total.item()
        steps += 1
    metrics = {key: value / max(steps, 1) for key, value in sums.items()}
    metrics.update(phase=phase, steps=steps, epoch=epoch)
    return metrics


def encode_test(model: HighLevelModel, datasets: list[SubjectDataset]) -> dict[str, HighLevelOutputs]:
    """Deterministic forward pass per subject (dropout off, no tape)."""
    outs = {}
    with no_grad():
        for ds in datasets:
            outs[ds.subject_id] = forward_high(model, ds.voxels, ds.subject_id, rng=None)
    return outs


__all__.append("encode_test")
