"""Neural building blocks on top of :mod:`geonew.autodiff`.

Parameters live in a :class:`ParamBundle` (an ordered name -> array mapping).
Forward functions take ``p``, a mapping from the same names to tape leaves,
so one bundle can be evaluated on many tapes.  Weights use the row-vector
convention ``y = x @ w + b``.
"""
from __future__ import annotations

import math
import zlib
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var


class ParamBundle(OrderedDict):
    """Ordered mapping of parameter name to float64 array."""

    def __setitem__(self, name, value):
        if name in self:
            raise KeyError(f"duplicate parameter name {name!r}")
        super().__setitem__(name, np.asarray(value, dtype=np.float64))

    def update_values(self, values: dict) -> None:
        for k, v in values.items():
            if k not in self:
                raise KeyError(k)
            OrderedDict.__setitem__(self, k, np.asarray(v, dtype=np.float64))

    def to_tape(self, tape: Tape, requires_grad: bool = True) -> dict[str, Var]:
        return {k: tape.leaf(v, requires_grad) for k, v in self.items()}

    def n_params(self) -> int:
        return int(sum(v.size for v in self.values()))

    def copy(self) -> "ParamBundle":
        out = ParamBundle()
        for k, v in self.items():
            out[k] = v.copy()
        return out

    def check_finite(self) -> None:
        for k, v in self.items():
            if not np.all(np.isfinite(v)):
                raise FloatingPointError(f"parameter {k!r} has non-finite entries")


def module_rng(seed: int, name: str) -> np.random.Generator:
    """Independent generator per (seed, module name)."""
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_linear(params: ParamBundle, name: str, d_in: int, d_out: int, seed: int,
                bias: bool = True, zero: bool = False) -> None:
    w = np.zeros((d_in, d_out)) if zero else xavier(module_rng(seed, name), d_in, d_out)
    params[f"{name}.w"] = w
    if bias:
        params[f"{name}.b"] = np.zeros(d_out)


def linear(p, name: str, x: Var) -> Var:
    y = x @ p[f"{name}.w"]
    b = p.get(f"{name}.b")
    return y if b is None else y + b


def init_mlp(params: ParamBundle, name: str, widths, seed: int, zero_last: bool = False) -> None:
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        last = i == len(widths) - 2
        init_linear(params, f"{name}.{i}", a, b, seed, zero=zero_last and last)


def mlp_forward(p, name: str, x: Var, n_layers: int, activation=ad.gelu) -> Var:
    """Affine-activation stack with an affine final layer."""
    for i in range(n_layers):
        x = linear(p, f"{name}.{i}", x)
        if i < n_layers - 1:
            x = activation(x)
    return x


def init_layer_norm(params: ParamBundle, name: str, d: int) -> None:
    params[f"{name}.g"] = np.ones(d)
    params[f"{name}.b"] = np.zeros(d)


def layer_norm(p, name: str, x: Var) -> Var:
    return ad.layer_norm(x, p[f"{name}.g"], p[f"{name}.b"])


def init_attention(params: ParamBundle, name: str, d_model: int, seed: int) -> None:
    for k in ("q", "k", "v", "o"):
        init_linear(params, f"{name}.{k}", d_model, d_model, seed, bias=False)


def attention(p, name: str, q_tokens: Var, kv_tokens: Var, n_heads: int) -> Var:
    """Multi-head scaled dot-product attention with an output projection."""
    d = q_tokens.shape[1]
    if d % n_heads:
        raise ad.ShapeError(f"d_model={d} is not divisible by n_heads={n_heads}")
    if kv_tokens.shape[1] != d:
        raise ad.ShapeError(f"attention: query width {d} vs key/value width {kv_tokens.shape[1]}")
    q = linear(p, f"{name}.q", q_tokens)
    k = linear(p, f"{name}.k", kv_tokens)
    v = linear(p, f"{name}.v", kv_tokens)
    dh = d // n_heads
    scale = 1.0 / math.sqrt(dh)
    heads = []
    for h in range(n_heads):
        cols = slice(h * dh, (h + 1) * dh)
        qh, kh, vh = q[:, cols], k[:, cols], v[:, cols]
        a = ad.softmax((qh @ kh.T) * scale, axis=1)
        heads.append(a @ vh)
    out = heads[0] if n_heads == 1 else ad.concat(heads, axis=1)
    return linear(p, f"{name}.o", out)


@dataclass(frozen=True)
class EncoderConfig:
    n_blocks: int = 2
    n_heads: int = 2
    d_model: int = 32
    n_anchors: int = 16
    ffn_mult: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} must be divisible by n_heads={self.n_heads}")
        if self.n_anchors < 1:
            raise ValueError("n_anchors must be >= 1")


def init_encoder(params: ParamBundle, name: str, d_in: int, cfg: EncoderConfig) -> None:
    d = cfg.d_model
    init_linear(params, f"{name}.in", d_in, d, cfg.seed)
    for b in range(cfg.n_blocks):
        pre = f"{name}.blk{b}"
        init_layer_norm(params, f"{pre}.ln_a", d)
        init_attention(params, f"{pre}.self", d, cfg.seed)
        init_layer_norm(params, f"{pre}.ln_z", d)
        init_layer_norm(params, f"{pre}.ln_c", d)
        init_attention(params, f"{pre}.cross", d, cfg.seed)
        init_layer_norm(params, f"{pre}.ln_f", d)
        init_mlp(params, f"{pre}.ffn", [d, cfg.ffn_mult * d, d], cfg.seed)


def anchor_encoder(p, name: str, features: Var, cfg: EncoderConfig, rng: np.random.Generator) -> Var:
    """Inducing-point transformer: anchors self-attend, then tokens cross-attend to anchors.

    Anchors are resampled independently in each block.  Memory is
    ``O(N M + M^2)`` for ``N`` tokens and ``M`` anchors.
    """
    z = linear(p, f"{name}.in", features)
    n = z.shape[0]
    m = min(cfg.n_anchors, n)
    for b in range(cfg.n_blocks):
        pre = f"{name}.blk{b}"
        idx = np.sort(rng.choice(n, size=m, replace=False))
        a = ad.gather_rows(z, idx)
        a_n = layer_norm(p, f"{pre}.ln_a", a)
        a = a + attention(p, f"{pre}.self", a_n, a_n, cfg.n_heads)
        z = z + attention(p, f"{pre}.cross", layer_norm(p, f"{pre}.ln_z", z),
                          layer_norm(p, f"{pre}.ln_c", a), cfg.n_heads)
        z = z + mlp_forward(p, f"{pre}.ffn", layer_norm(p, f"{pre}.ln_f", z), 2)
    return z


def init_pool(params: ParamBundle, name: str, n_c: int, d_model: int, seed: int) -> None:
    params[f"{name}.latents"] = module_rng(seed, f"{name}.latents").standard_normal((n_c, d_model)) * 0.02
    init_attention(params, f"{name}.attn", d_model, seed)


def perceiver_pool(p, name: str, z: Var, n_heads: int) -> Var:
    """Context tokens ``Attn(L, z, z)`` from learned latent queries ``L``."""
    return attention(p, f"{name}.attn", p[f"{name}.latents"], z, n_heads)


def bounded_weight(a: Var) -> tuple[Var, float]:
    """Rescale ``a`` so its spectral norm is certified to be at most 1.

    Uses ``||A||_2 <= sqrt(rows) * ||A||_inf`` with ``||A||_inf`` the max
    absolute row sum; the weight is divided by ``max(1, sqrt(rows) ||A||_inf)``
    inside the graph.  Returns the effective weight and its certified bound.
    """
    rows = a.shape[0]
    inf_norm = ad.amax(ad.sum(ad.absolute(a), axis=1))
    raw = inf_norm * math.sqrt(rows)
    scale = ad.maximum(raw, 1.0)
    eff = a / scale
    return eff, float(raw.value / scale.value)


def bounded_linear(a: Var, x: Var) -> tuple[Var, float]:
    """Apply the certified-bounded map ``y = A_eff x`` to the rows of ``x``."""
    eff, bound = bounded_weight(a)
    return x @ eff.T, bound
