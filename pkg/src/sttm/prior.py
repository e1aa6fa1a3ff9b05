"""Diffusion prior translating brain tokens into target-embedding tokens.

A 6-layer pre-norm transformer decoder predicts clean tokens (x0
parameterization) from noisy tokens, a time token, and cross-attention onto
brain tokens. During training only a drawn subset of brain tokens (keep ratio
rho, default 0.35) is visible to cross-attention; inference conditions on all
of them. `mask_mode="loss"` is the alternative reading in which conditioning
stays full and the MSE is restricted to the drawn subset of target tokens.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, concat, no_grad
from .nn import DecoderLayer, LayerNorm, Linear, Module, Parameter, make_time_token, trunc_normal

__all__ = [
    "NoiseSchedule",
    "make_schedule",
    "q_sample",
    "MaskPlan",
    "draw_mask",
    "PriorModel",
    "prior_forward",
    "loss_prior",
    "sample_prior",
    "select_best",
]


@dataclass
class NoiseSchedule:
    t_steps: int
    betas: np.ndarray  # (T,) f64
    alphas: np.ndarray
    alpha_bar: np.ndarray


def make_schedule(t_steps: int, kind: str = "linear") -> NoiseSchedule:
    if t_steps < 2:
        raise ValueError(f"need at least 2 diffusion steps, got {t_steps}")
    if kind == "linear":
        betas = np.linspace(1e-4, 0.02, t_steps)
    elif kind == "cosine":
        s = 0.008
        steps = np.arange(t_steps + 1, dtype=np.float64) / t_steps
        f = np.cos((steps + s) / (1 + s) * math.pi / 2) ** 2
        betas = np.clip(1.0 - f[1:] / f[:-1], 1e-4, 0.999)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    alphas = 1.0 - betas
    return NoiseSchedule(t_steps=t_steps, betas=betas, alphas=alphas, alpha_bar=np.cumprod(alphas))


def q_sample(x0: np.ndarray, t, sched: NoiseSchedule, rng: np.random.Generator) -> np.ndarray:
    """Forward noising: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    x0 = np.asarray(x0)
    t = np.asarray(t)
    if np.any(t < 0) or np.any(t >= sched.t_steps):
        raise ValueError(f"timestep out of range [0, {sched.t_steps})")
    abar = sched.alpha_bar[t]
    while np.ndim(abar) < x0.ndim:
        abar = np.expand_dims(abar, -1)
    eps = rng.standard_normal(x0.shape)
    return (np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps).astype(np.float32)


@dataclass
class MaskPlan:
    idx: np.ndarray  # distinct brain-token indices kept as conditioning
    ratio: float


def draw_mask(k: int, rho: float, rng: np.random.Generator) -> MaskPlan:
    """Keep ceil(rho*k) distinct uniformly-drawn token indices."""
    size = math.ceil(rho * k)
    if not 1 <= size <= k:
        raise ValueError(f"mask size {size} invalid for {k} tokens")
    return MaskPlan(idx=rng.choice(k, size=size, replace=False).astype(np.int64), ratio=rho)


class PriorModel(Module):
    def __init__(
        self,
        k: int,
        d: int,
        rng: np.random.Generator,
        layers: int = 6,
        heads: int = 4,
        dropout: float = 0.1,
    ):
        self.pos_brain = Parameter(trunc_normal(rng, (k, d)))
        self.pos_target = Parameter(trunc_normal(rng, (k, d)))
        self.time_fc1 = Linear(d, d, rng)
        self.time_fc2 = Linear(d, d, rng)
        self.layers = [DecoderLayer(d, heads, rng, dropout) for _ in range(layers)]
        self.final_ln = LayerNorm(d)
        self.out = Linear(d, d, rng)
        self._k = k
        self._d = d


def _as_batched(x, k: int, d: int) -> tuple[Tensor, bool]:
    t = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))
    if t.ndim == 2:
        return t.reshape(1, k, d), True
    if t.ndim == 3:
        return t, False
    raise ValueError(f"expected K x D or B x K x D tokens, got shape {t.shape}")


def prior_forward(
    model: PriorModel,
    brain_tokens,
    mask: MaskPlan,
    x_t,
    t,
    dropout_rng: np.random.Generator | None = None,
) -> Tensor:
    """Predict clean target tokens from (masked brain tokens, noisy tokens, t).

    Query sequence is [time token] ++ (x_t + positional embedding), length
    K+1; the time position is dropped from the output. Cross-attention sees
    only the masked-in brain tokens, each carrying its own positional
    embedding, so the conditioning is a set of (token, position) pairs.
    """
    k, d = model._k, model._d
    brain, single_b = _as_batched(brain_tokens, k, d)
    noisy, single_x = _as_batched(x_t, k, d)
    if brain.shape[0] != noisy.shape[0]:
        raise ValueError(f"batch mismatch: {brain.shape[0]} brain vs {noisy.shape[0]} noisy")
    idx = np.asarray(mask.idx, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("mask must keep at least one brain token")
    if idx.size != len(set(idx.tolist())) or idx.min() < 0 or idx.max() >= k:
        raise ValueError("mask indices must be distinct and within [0, K)")

    b = brain.shape[0]
    memory = (brain + model.pos_brain)[:, idx, :]
    t_arr = np.asarray(t)
    if t_arr.ndim == 0:
        t_arr = np.full(b, int(t_arr))
    time_tok = make_time_token(t_arr, d, model.time_fc1, model.time_fc2)
    x = concat([time_tok, noisy + model.pos_target], axis=1)
    for layer in model.layers:
        x = layer(x, memory, dropout_rng)
    out = model.out(model.final_ln(x))[:, 1:, :]
    return out.reshape(k, d) if (single_b and single_x) else out


def loss_prior(
    model: PriorModel,
    brain_tokens,
    x0: np.ndarray,
    sched: NoiseSchedule,
    rng: np.random.Generator,
    rho: float = 0.35,
    mask_mode: str = "condition",
    dropout_rng: np.random.Generator | None = None,
) -> Tensor:
    """Denoising MSE at a uniformly drawn timestep per batch element.

    mask_mode "condition": cross-attention restricted to the drawn subset,
    loss over all K tokens. mask_mode "loss": full conditioning, loss over the
    drawn subset of target tokens.
    """
    if mask_mode not in ("condition", "loss"):
        raise ValueError(f"unknown mask_mode {mask_mode!r}")
    k, d = model._k, model._d
    brain, single = _as_batched(brain_tokens, k, d)
    x0 = np.asarray(x0, dtype=np.float32)
    if x0.ndim == 2:
        x0 = x0[None]
    b = brain.shape[0]
    t = rng.integers(0, sched.t_steps, size=b)
    plan = draw_mask(k, rho, rng)
    x_t = q_sample(x0, t, sched, rng)
    if mask_mode == "condition":
        pred = prior_forward(model, brain, plan, x_t, t, dropout_rng)
        return (pred - Tensor(x0)).square().mean()
    full = MaskPlan(idx=np.arange(k, dtype=np.int64), ratio=1.0)
    pred = prior_forward(model, brain, full, x_t, t, dropout_rng)
    return (pred[:, plan.idx, :] - Tensor(x0[:, plan.idx, :])).square().mean()


def sample_prior(
    model: PriorModel,
    brain_tokens,
    sched: NoiseSchedule,
    n: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Ancestral sampling with full brain-token conditioning; n chains.

    Returns (n, K, D) for a single K x D input, else (B, n, K, D). Each step
    predicts x0, forms the DDPM posterior mean, and adds posterior noise for
    t > 0; the final step returns the prediction itself.
    """
    if n < 1:
        raise ValueError(f"need at least one chain, got {n}")
    k, d = model._k, model._d
    brain, single = _as_batched(brain_tokens, k, d)
    b = brain.shape[0]
    mem = np.repeat(brain.data, n, axis=0)
    full = MaskPlan(idx=np.arange(k, dtype=np.int64), ratio=1.0)
    x = rng.standard_normal((b * n, k, d)).astype(np.float32)
    abar = sched.alpha_bar
    with no_grad():
        for t in range(sched.t_steps - 1, -1, -1):
            pred = prior_forward(model, mem, full, x, t, None).data
            if t == 0:
                x = pred
                break
            beta = sched.betas[t]
            c_pred = math.sqrt(abar[t - 1]) * beta / (1.0 - abar[t])
            c_cur = math.sqrt(sched.alphas[t]) * (1.0 - abar[t - 1]) / (1.0 - abar[t])
            var = (1.0 - abar[t - 1]) * beta / (1.0 - abar[t])
            noise = rng.standard_normal(x.shape)
            x = (c_pred * pred + c_cur * x + math.sqrt(var) * noise).astype(np.float32)
    out = x.reshape(b, n, k, d)
    return out[0] if single else out


def select_best(candidates: np.ndarray, projected: np.ndarray) -> int:
    """Index of the candidate whose flattened, normalized embedding is most
    cosine-similar to the projected brain tokens; ties go to the lowest index."""
    candidates = np.asarray(candidates, dtype=np.float64)
    if candidates.ndim < 2:
        raise ValueError("candidates must be n x (K x D)")
    flat = candidates.reshape(candidates.shape[0], -1)
    ref = np.asarray(projected, dtype=np.float64).ravel()
    ref = ref / max(np.sqrt((ref * ref).sum()), 1e-12)
    norms = np.sqrt((flat * flat).sum(axis=1))
    cos = (flat @ ref) / np.maximum(norms, 1e-12)
    return int(np.argmax(cos))
