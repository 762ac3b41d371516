"""Differentiable building blocks: MLP, GRU cell, attention layers, cyclic
positional encodings, and finite-difference gradient verification.

Everything runs in float64 so the central-difference checks are decisive.
Parameters are initialized from an explicit numpy generator (uniform in
[-1/sqrt(fan_in), 1/sqrt(fan_in)]) so runs are reproducible end to end.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import InvalidArgumentError

DTYPE = torch.float64


def init_tensor(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> torch.Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return torch.from_numpy(rng.uniform(-bound, bound, size=shape)).to(DTYPE)


class Linear(nn.Module):
    """Affine map with explicit init; y = x @ W + b."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.weight = nn.Parameter(init_tensor(rng, (d_in, d_out), d_in))
        self.bias = nn.Parameter(init_tensor(rng, (d_out,), d_in)) if bias else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class MLP(nn.Module):
    """Affine stack with ReLU between hidden layers, linear final layer."""

    def __init__(self, sizes: tuple[int, ...], rng: np.random.Generator):
        super().__init__()
        if len(sizes) < 2:
            raise InvalidArgumentError("MLP needs at least input and output sizes")
        self.layers = nn.ModuleList(
            Linear(a, b, rng) for a, b in zip(sizes, sizes[1:])
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i + 1 < len(self.layers):
                x = torch.relu(x)
        return x


def mlp_apply(mlp: MLP, x: torch.Tensor) -> torch.Tensor:
    return mlp(x)


class GRUCell(nn.Module):
    """Gated recurrent cell with update gate z, reset gate r:

    new_state = (1 - z) * state + z * candidate,  z = 0 keeps the state.
    """

    def __init__(self, d: int, rng: np.random.Generator):
        super().__init__()
        self.w_z = Linear(d, d, rng)
        self.u_z = Linear(d, d, rng, bias=False)
        self.w_r = Linear(d, d, rng)
        self.u_r = Linear(d, d, rng, bias=False)
        self.w_c = Linear(d, d, rng)
        self.u_c = Linear(d, d, rng, bias=False)

    def forward(self, x: torch.Tensor, state: torch.Tensor) -> torch.Tensor:
        z = torch.sigmoid(self.w_z(x) + self.u_z(state))
        r = torch.sigmoid(self.w_r(x) + self.u_r(state))
        cand = torch.tanh(self.w_c(x) + self.u_c(r * state))
        return (1.0 - z) * state + z * cand


def gru_step(cell: GRUCell, x: torch.Tensor, state: torch.Tensor) -> torch.Tensor:
    return cell(x, state)


def _split_heads(x: torch.Tensor, heads: int) -> torch.Tensor:
    # (..., n, d) -> (..., heads, n, d/heads)
    *lead, n, d = x.shape
    return x.reshape(*lead, n, heads, d // heads).transpose(-3, -2)


class MultiHeadAttention(nn.Module):
    """Plain multi-head self-attention (projection in, scaled dot-product,
    projection out); used stand-alone by the critic."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        super().__init__()
        if d % heads:
            raise InvalidArgumentError("d must be divisible by heads")
        self.heads = heads
        self.w_q = Linear(d, d, rng, bias=False)
        self.w_k = Linear(d, d, rng, bias=False)
        self.w_v = Linear(d, d, rng, bias=False)
        self.w_o = Linear(d, d, rng, bias=False)

    def forward(self, h: torch.Tensor, extra_logits: torch.Tensor | None = None) -> torch.Tensor:
        d_k = h.shape[-1] // self.heads
        q = _split_heads(self.w_q(h), self.heads)
        k = _split_heads(self.w_k(h), self.heads)
        v = _split_heads(self.w_v(h), self.heads)
        logits = q @ k.transpose(-2, -1) / np.sqrt(d_k)
        if extra_logits is not None:
            logits = logits + extra_logits
        attn = torch.softmax(logits, dim=-1)
        out = attn @ v
        out = out.transpose(-3, -2).reshape(h.shape)
        return self.w_o(out)


class AttentionLayer(nn.Module):
    """Encoder layer: multi-head attention whose logits are the sum of a
    node-embedding stream and a positional-embedding stream, then residual +
    layer normalization and a feed-forward sublayer (residual + norm)."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        super().__init__()
        if d % heads:
            raise InvalidArgumentError("d must be divisible by heads")
        self.heads = heads
        self.attn = MultiHeadAttention(d, heads, rng)
        self.w_q_pos = Linear(d, d, rng, bias=False)
        self.w_k_pos = Linear(d, d, rng, bias=False)
        self.norm1 = nn.LayerNorm(d, dtype=DTYPE)
        self.norm2 = nn.LayerNorm(d, dtype=DTYPE)
        self.ff = nn.Sequential(
            Linear(d, 2 * d, rng), nn.ReLU(), Linear(2 * d, d, rng)
        )

    def forward(self, h: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
        if h.shape != g.shape:
            raise InvalidArgumentError("node and positional embeddings must align")
        d_k = h.shape[-1] // self.heads
        qp = _split_heads(self.w_q_pos(g), self.heads)
        kp = _split_heads(self.w_k_pos(g), self.heads)
        pos_logits = qp @ kp.transpose(-2, -1) / np.sqrt(d_k)
        h = self.norm1(h + self.attn(h, extra_logits=pos_logits))
        return self.norm2(h + self.ff(h))


def attention_layer(layer: AttentionLayer, h: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
    return layer(h, g)


def cpe_row(i: int, n: int, d: int) -> np.ndarray:
    """Row i of the cyclic positional encoding: interleaved sin/cos pairs at
    angular frequencies j*(2*pi/n), j = 1..d/2. Angles are reduced modulo n in
    integer arithmetic, so periodicity in i is exact in floating point."""
    if d % 2:
        raise InvalidArgumentError("d must be even")
    out = np.empty(d, dtype=np.float64)
    for j in range(d // 2):
        angle = 2.0 * np.pi * ((i * (j + 1)) % n) / n
        out[2 * j] = np.sin(angle)
        out[2 * j + 1] = np.cos(angle)
    return out


def cpe_table(n: int, d: int) -> np.ndarray:
    """n x d table of cyclic positional encodings (rows by tour position)."""
    if d % 2:
        raise InvalidArgumentError("d must be even")
    j = np.arange(1, d // 2 + 1)
    i = np.arange(n)
    angles = 2.0 * np.pi * ((i[:, None] * j[None, :]) % n) / n
    table = np.empty((n, d), dtype=np.float64)
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles)
    return table


@dataclass(frozen=True)
class GradCheckReport:
    per_block: dict[str, float]
    max_rel_err: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance


def grad_check(
    function,
    params: dict[str, torch.Tensor],
    tolerance: float = 1e-4,
    step: float = 1e-5,
    entries_per_block: int | None = 200,
    seed: int = 0,
) -> GradCheckReport:
    """Central finite differences vs autograd for a scalar `function()` that
    reads `params` by reference. Reports the max relative error per block;
    relative error uses denominator max(|analytic|, |numeric|, 1)."""
    for p in params.values():
        if p.grad is not None:
            p.grad = None
    value = function()
    value.backward()
    analytic = {
        name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for name, p in params.items()
    }
    rng = np.random.default_rng(seed)
    report: dict[str, float] = {}
    with torch.no_grad():
        for name, p in params.items():
            flat = p.reshape(-1)
            total = flat.numel()
            if entries_per_block is None or total <= entries_per_block:
                idx = np.arange(total)
            else:
                idx = rng.choice(total, size=entries_per_block, replace=False)
            worst = 0.0
            a_flat = analytic[name].reshape(-1)
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + step
                up = float(function())
                flat[i] = orig - step
                down = float(function())
                flat[i] = orig
                numeric = (up - down) / (2.0 * step)
                a = float(a_flat[i])
                err = abs(a - numeric) / max(abs(a), abs(numeric), 1.0)
                worst = max(worst, err)
            report[name] = worst
    return GradCheckReport(
        per_block=report,
        max_rel_err=max(report.values()) if report else 0.0,
        tolerance=tolerance,
    )
