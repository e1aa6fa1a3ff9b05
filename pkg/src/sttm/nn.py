"""Neural-network building blocks on top of the autodiff Tensor.

Modules register parameters by walking instance attributes (dicts and lists
of submodules included, underscore-prefixed attributes skipped), which gives
dotted checkpoint names like ``adapter.subj01.proj.w``. Dropout is driven by
an explicit numpy Generator argument: pass one while training, pass None for
deterministic evaluation. There is no train/eval flag.
"""

from __future__ import annotations

import math

import numpy as np

from .autodiff import Tensor, concat

__all__ = [
    "Parameter",
    "Module",
    "Linear",
    "LayerNorm",
    "ResidualBlock",
    "MultiheadAttention",
    "DecoderLayer",
    "Upsample2x",
    "trunc_normal",
    "sinusoidal_embedding",
    "rebind_parameters",
]


class Parameter(Tensor):
    def __init__(self, data):
        super().__init__(np.asarray(data), requires_grad=True)


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float32) -> np.ndarray:
    """Normal(0, std) with draws outside 2 std resampled."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out.astype(dtype)


class Module:
    def named_parameters(self, prefix: str = ""):
        for name, value in self.__dict__.items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            yield from _walk(full, value)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise ValueError(f"state dict mismatch: missing {missing}, unexpected {extra}")
        for name, p in own.items():
            value = np.asarray(state[name])
            if value.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}: {value.shape} vs {p.data.shape}")
            p.data = value.astype(p.data.dtype, copy=True)


def _walk(prefix: str, value):
    if isinstance(value, Parameter) or (isinstance(value, Tensor) and value.requires_grad):
        # grad-requiring plain tensors count as leaves so a rebound module
        # (see rebind_parameters) still enumerates its substituted weights
        yield prefix, value
    elif isinstance(value, Module):
        yield from value.named_parameters(prefix + ".")
    elif isinstance(value, dict):
        for key in sorted(value):
            yield from _walk(f"{prefix}.{key}", value[key])
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(f"{prefix}.{i}", item)


def rebind_parameters(module: Module, mapping: dict[str, Tensor]) -> None:
    """Swap parameter objects by dotted name (gradient checking hooks the
    module's forward up to externally owned leaf tensors this way)."""
    names = {n for n, _ in module.named_parameters()}
    unknown = set(mapping) - names
    if unknown:
        raise KeyError(f"unknown parameter names {sorted(unknown)[:5]}")
    for name, tensor in mapping.items():
        target = module
        *parents, last = name.split(".")
        for part in parents:
            if isinstance(target, dict):
                target = target[part]
            elif isinstance(target, (list, tuple)):
                target = target[int(part)]
            else:
                target = getattr(target, part)
        if isinstance(target, dict):
            target[last] = tensor
        elif isinstance(target, list):
            target[int(last)] = tensor
        else:
            setattr(target, last, tensor)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        self.w = Parameter(trunc_normal(rng, (d_in, d_out)))
        self.b = Parameter(np.zeros(d_out, dtype=np.float32))

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.w + self.b


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = Parameter(np.ones(dim, dtype=np.float32))
        self.beta = Parameter(np.zeros(dim, dtype=np.float32))
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return x.layer_norm(self.gamma, self.beta, self._eps)


class ResidualBlock(Module):
    """LayerNorm -> Linear -> GELU -> Dropout -> Linear, with additive skip."""

    def __init__(self, dim: int, rng: np.random.Generator, dropout: float = 0.1):
        self.ln = LayerNorm(dim)
        self.fc1 = Linear(dim, dim, rng)
        self.fc2 = Linear(dim, dim, rng)
        self._p = dropout

    def __call__(self, x: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        h = self.fc1(self.ln(x)).gelu().dropout(self._p, rng)
        return x + self.fc2(h)


class MultiheadAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads != 0:
            raise ValueError(f"dim {dim} must be divisible by heads {heads}")
        self.wq = Linear(dim, dim, rng)
        self.wk = Linear(dim, dim, rng)
        self.wv = Linear(dim, dim, rng)
        self.wo = Linear(dim, dim, rng)
        self._heads = heads
        self._dh = dim // heads

    def __call__(self, q_in: Tensor, kv_in: Tensor) -> Tensor:
        b, nq, dim = q_in.shape
        nk = kv_in.shape[1]
        h, dh = self._heads, self._dh
        q = self.wq(q_in).reshape(b, nq, h, dh).transpose((0, 2, 1, 3))
        k = self.wk(kv_in).reshape(b, nk, h, dh).transpose((0, 2, 3, 1))
        v = self.wv(kv_in).reshape(b, nk, h, dh).transpose((0, 2, 1, 3))
        attn = ((q @ k) * (1.0 / math.sqrt(dh))).softmax()
        out = (attn @ v).transpose((0, 2, 1, 3)).reshape(b, nq, dim)
        return self.wo(out)


class DecoderLayer(Module):
    """Pre-norm transformer decoder layer: self-attention, cross-attention, FF."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, dropout: float = 0.1, ff_mult: int = 4):
        self.ln1 = LayerNorm(dim)
        self.self_attn = MultiheadAttention(dim, heads, rng)
        self.ln2 = LayerNorm(dim)
        self.cross_attn = MultiheadAttention(dim, heads, rng)
        self.ln3 = LayerNorm(dim)
        self.fc1 = Linear(dim, ff_mult * dim, rng)
        self.fc2 = Linear(ff_mult * dim, dim, rng)
        self._p = dropout

    def __call__(self, x: Tensor, memory: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        h = self.ln1(x)
        x = x + self.self_attn(h, h)
        x = x + self.cross_attn(self.ln2(x), memory)
        h = self.fc1(self.ln3(x)).gelu().dropout(self._p, rng)
        return x + self.fc2(h)


class Upsample2x(Module):
    """Transposed convolution, kernel 2, stride 2: each cell becomes a 2x2 block."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        self.w = Parameter(trunc_normal(rng, (c_in, c_out * 4)))
        self.b = Parameter(np.zeros(c_out * 4, dtype=np.float32))
        self._c_out = c_out

    def __call__(self, x: Tensor) -> Tensor:
        b, c_in, hh, ww = x.shape
        c_out = self._c_out
        h = x.transpose((0, 2, 3, 1)).reshape(b * hh * ww, c_in) @ self.w + self.b
        h = h.reshape(b, hh, ww, c_out, 2, 2).transpose((0, 3, 1, 4, 2, 5))
        return h.reshape(b, c_out, 2 * hh, 2 * ww)


def sinusoidal_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    """Standard sin/cos position code for timestep values; shape (len(t), dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    args = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if emb.shape[1] < dim:
        emb = np.concatenate([emb, np.zeros((emb.shape[0], dim - emb.shape[1]))], axis=1)
    return emb.astype(np.float32)


def make_time_token(t: np.ndarray, dim: int, fc1: Linear, fc2: Linear) -> Tensor:
    """Sinusoidal embedding of t passed through a 2-layer MLP; (B, 1, dim)."""
    emb = Tensor(sinusoidal_embedding(t, dim))
    out = fc2(fc1(emb).gelu())
    b = out.shape[0]
    return out.reshape(b, 1, dim)


__all__.append("make_time_token")
