"""Deterministic numerical primitives: normalization helpers, AdamW with a
one-cycle learning-rate schedule, seeded Beta sampling, and a finite-difference
gradient checker used as the correctness oracle for every trainable module.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .autodiff import Tensor
from .rng import Rng

__all__ = [
    "Rng",
    "l2_normalize",
    "softmax_rows",
    "cosine_sim_matrix",
    "OptimizerState",
    "init_opt_state",
    "adamw_step",
    "AdamW",
    "LrSchedule",
    "onecycle_lr",
    "sample_beta",
    "grad_check",
]

log = logging.getLogger(__name__)


def l2_normalize(v: np.ndarray, axis: int = -1, eps: float = 1e-12) -> np.ndarray:
    """Scale vectors along `axis` to unit L2 norm; near-zero norms are an error."""
    v = np.asarray(v)
    norms = np.sqrt((v * v).sum(axis=axis, keepdims=True))
    if np.any(norms <= eps):
        raise ValueError("cannot normalize a vector with near-zero norm")
    return v / norms


def softmax_rows(m: np.ndarray, tau: float = 1.0) -> np.ndarray:
    """Row-wise softmax of m/tau; rows sum to 1, invariant to per-row shifts."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    x = np.asarray(m, dtype=np.float64) / tau
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    out = e / e.sum(axis=-1, keepdims=True)
    return out.astype(np.asarray(m).dtype, copy=False)


def cosine_sim_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """All-pairs cosine similarity between rows of a (N x D) and b (M x D)."""
    return l2_normalize(a) @ l2_normalize(b).T


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    decay: list[bool]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    skipped: int = 0


def init_opt_state(params: list[np.ndarray], weight_decay: float = 0.01, **hyper) -> OptimizerState:
    """Fresh moments; weight decay applies to matrices only (ndim >= 2)."""
    return OptimizerState(
        m=[np.zeros_like(p) for p in params],
        v=[np.zeros_like(p) for p in params],
        decay=[p.ndim >= 2 for p in params],
        weight_decay=weight_decay,
        **hyper,
    )


def adamw_step(
    params: list[np.ndarray], grads: list[np.ndarray | None], state: OptimizerState, lr: float
) -> tuple[list[np.ndarray], OptimizerState]:
    """One decoupled-weight-decay Adam step, in place on `params`.

    A non-finite gradient anywhere skips the whole step (reported via the
    `skipped` counter and a log warning) so one bad batch cannot poison the
    moments.
    """
    if len(grads) != len(params):
        raise ValueError(f"got {len(grads)} gradients for {len(params)} parameters")
    for p, g in zip(params, grads):
        if g is not None and g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter shape {p.shape}")
    if any(g is not None and not np.all(np.isfinite(g)) for g in grads):
        state.skipped += 1
        log.warning("non-finite gradient encountered; optimizer step %d skipped", state.step + 1)
        return params, state
    state.step += 1
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p)
        wd = state.weight_decay if state.decay[i] else 0.0
        kernels.adamw_update(
            p.ravel(), g.ravel(), state.m[i].ravel(), state.v[i].ravel(),
            state.step, lr, state.beta1, state.beta2, state.eps, wd,
        )
    return params, state


class AdamW:
    """Convenience wrapper binding an OptimizerState to a module's parameters."""

    def __init__(self, params: list[Tensor], weight_decay: float = 0.01, **hyper):
        self.params = [p for p in params if p.requires_grad]
        self.state = init_opt_state([p.data for p in self.params], weight_decay, **hyper)

    def step(self, lr: float) -> None:
        grads = [p.grad for p in self.params]
        adamw_step([p.data for p in self.params], grads, self.state, lr)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------------------
# OneCycle learning rate
# ---------------------------------------------------------------------------


@dataclass
class LrSchedule:
    max_lr: float = 5e-4
    total_steps: int = 1
    warmup_frac: float = 0.3
    floor_frac: float = 1e-4
    init_frac: float = 0.04  # max_lr / 25


def onecycle_lr(step: int, sched: LrSchedule) -> float:
    """Cosine ramp from max_lr*init_frac up to max_lr, then cosine anneal down
    to max_lr*floor_frac at the final step."""
    if not 0 <= step < sched.total_steps:
        raise ValueError(f"step {step} outside schedule range [0, {sched.total_steps})")
    warmup = int(sched.warmup_frac * sched.total_steps)
    peak = sched.max_lr
    if step < warmup:
        lo = peak * sched.init_frac
        frac = 0.5 * (1.0 - math.cos(math.pi * step / warmup))
        return lo + (peak - lo) * frac
    span = sched.total_steps - 1 - warmup
    if span <= 0:
        return peak if step == warmup else peak * sched.floor_frac
    lo = peak * sched.floor_frac
    frac = 0.5 * (1.0 + math.cos(math.pi * (step - warmup) / span))
    return lo + (peak - lo) * frac


def sample_beta(a: float, b: float, rng: np.random.Generator, size=None):
    """Beta(a, b) draw(s) in the open interval (0, 1)."""
    if a <= 0 or b <= 0:
        raise ValueError(f"Beta parameters must be positive, got a={a}, b={b}")
    out = np.clip(rng.beta(a, b, size=size), 1e-12, 1.0 - 1e-12)
    return float(out) if size is None else out


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


def _rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-6)


def grad_check(
    loss_fn,
    params: dict[str, Tensor],
    eps: float = 1e-5,
    coord_limit: int = 64,
    n_dirs: int = 8,
    seed: int = 0,
) -> float:
    """Worst relative error between backprop gradients and central differences.

    `loss_fn` must be a pure function of the parameter dict returning a scalar
    Tensor. Parameters are evaluated in float64 internally so the difference
    quotient is well conditioned regardless of the caller's storage dtype;
    small parameters are checked coordinate-wise, large ones along `n_dirs`
    random unit directions.
    """
    work = {k: Tensor(t.data.astype(np.float64), requires_grad=True) for k, t in params.items()}

    def evaluate() -> float:
        value = loss_fn(work)
        if value.data.size != 1 or not np.isfinite(value.data):
            raise ValueError("loss_fn must return a finite scalar")
        return float(value.data)

    loss = loss_fn(work)
    if loss.data.size != 1 or not np.isfinite(loss.data):
        raise ValueError("loss_fn must return a finite scalar")
    loss.backward()
    analytic = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in work.items()}

    rng = np.random.Generator(np.random.Philox(key=seed))
    worst = 0.0
    for name, t in work.items():
        if t.data.size <= coord_limit:
            for idx in np.ndindex(t.data.shape):
                orig = t.data[idx]
                t.data[idx] = orig + eps
                lp = evaluate()
                t.data[idx] = orig - eps
                lm = evaluate()
                t.data[idx] = orig
                worst = max(worst, _rel_err(float(analytic[name][idx]), (lp - lm) / (2 * eps)))
        else:
            for _ in range(n_dirs):
                d = rng.standard_normal(t.data.shape)
                d /= np.sqrt((d * d).sum())
                orig = t.data.copy()
                t.data = orig + eps * d
                lp = evaluate()
                t.data = orig - eps * d
                lm = evaluate()
                t.data = orig
                worst = max(worst, _rel_err(float((analytic[name] * d).sum()), (lp - lm) / (2 * eps)))
    return worst
