"""Differentiable building blocks (torch, float64), Adam, gradient checking and
the binary parameter checkpoint format."""
from __future__ import annotations

import math
import struct
from typing import Callable

import numpy as np
import torch
from torch import Tensor, nn

from .errors import FormatError, InvalidInputError, InvalidMaskError

DTYPE = torch.float64
MASK_FILL = -1e30

CHECKPOINT_MAGIC = b"SARM"
CHECKPOINT_VERSION = 1


def masked_softmax(logits: Tensor, mask: Tensor) -> Tensor:
    """Softmax over the last axis restricted to ``mask``; masked entries are exactly 0."""
    mask = torch.as_tensor(mask, dtype=torch.bool)
    if not bool(mask.any(dim=-1).all()):
        raise InvalidMaskError("every mask row needs at least one allowed entry")
    z = logits.masked_fill(~mask, MASK_FILL)
    return torch.softmax(z, dim=-1).masked_fill(~mask, 0.0)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.mean(dim=-1, keepdim=True)
    var = ((x - mu) ** 2).mean(dim=-1, keepdim=True)
    return (x - mu) / torch.sqrt(var + eps) * gain + bias


def sinusoidal_position_encoding(N: int, D: int) -> Tensor:
    """Entry ``(n, 2k) = sin(n / 10000^(2k/D))``, ``(n, 2k+1) = cos(...)``."""
    if D % 2:
        raise InvalidInputError(f"encoding width must be even, got {D}")
    pos = torch.arange(N, dtype=DTYPE)[:, None]
    freq = torch.exp(-math.log(10000.0) * torch.arange(0, D, 2, dtype=DTYPE) / D)
    pe = torch.zeros(N, D, dtype=DTYPE)
    pe[:, 0::2] = torch.sin(pos * freq)
    pe[:, 1::2] = torch.cos(pos * freq)
    return pe


def _uniform(gen: torch.Generator, shape, bound: float) -> nn.Parameter:
    return nn.Parameter((torch.rand(shape, generator=gen, dtype=DTYPE) * 2 - 1) * bound)


class Linear(nn.Module):
    def __init__(self, d_in: int, d_out: int, gen: torch.Generator, bias: bool = True):
        super().__init__()
        bound = 1.0 / math.sqrt(d_in)
        self.weight = _uniform(gen, (d_in, d_out), bound)
        self.bias = _uniform(gen, (d_out,), bound) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y if self.bias is None else y + self.bias


class LayerNorm(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(d, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(d, dtype=DTYPE))

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias)


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention; one boolean mask shared by every head.

    The key projection has no bias: a key bias only shifts each row's logits
    by a constant and so has identically zero gradient.
    """

    def __init__(self, d: int, n_heads: int, gen: torch.Generator):
        super().__init__()
        if d % n_heads:
            raise InvalidInputError(f"width {d} is not divisible by {n_heads} heads")
        self.d, self.n_heads = d, n_heads
        self.q = Linear(d, d, gen)
        self.k = Linear(d, d, gen, bias=False)
        self.v = Linear(d, d, gen)
        self.out = Linear(d, d, gen)

    def forward(self, x: Tensor, mask: Tensor | None = None) -> Tensor:
        # x: (..., L, d); mask: (L, L) or broadcastable to (..., L, L)
        if x.shape[-1] != self.d:
            raise InvalidInputError(f"expected width {self.d}, got {x.shape[-1]}")
        L = x.shape[-2]
        h, dh = self.n_heads, self.d // self.n_heads

        def split(t):
            return t.reshape(*t.shape[:-1], h, dh).transpose(-3, -2)

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        logits = q @ k.transpose(-1, -2) / math.sqrt(dh)
        if mask is None:
            att = torch.softmax(logits, dim=-1)
        else:
            mask = torch.as_tensor(mask, dtype=torch.bool)
            if mask.shape[-2:] != (L, L):
                raise InvalidInputError(f"mask shape {tuple(mask.shape)} does not match length {L}")
            att = masked_softmax(logits, mask.unsqueeze(-3))
        y = (att @ v).transpose(-3, -2).reshape(*x.shape[:-1], self.d)
        return self.out(y)


class FeedForward(nn.Module):
    def __init__(self, d: int, d_hidden: int, gen: torch.Generator):
        super().__init__()
        self.fc1 = Linear(d, d_hidden, gen)
        self.fc2 = Linear(d_hidden, d, gen)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(torch.nn.functional.gelu(self.fc1(x)))


class Block(nn.Module):
    """Pre-norm transformer block (GPT-2 layout)."""

    def __init__(self, d: int, n_heads: int, ff_multiplier: int, gen: torch.Generator):
        super().__init__()
        self.ln1 = LayerNorm(d)
        self.attn = MultiHeadAttention(d, n_heads, gen)
        self.ln2 = LayerNorm(d)
        self.ff = FeedForward(d, ff_multiplier * d, gen)

    def forward(self, x: Tensor, mask: Tensor | None = None) -> Tensor:
        x = x + self.attn(self.ln1(x), mask)
        return x + self.ff(self.ln2(x))


class ParamStore:
    """A module's parameters together with Adam moment buffers."""

    def __init__(self, module: nn.Module):
        self.module = module
        self.params = dict(module.named_parameters())
        self.m = {k: torch.zeros_like(p) for k, p in self.params.items()}
        self.v = {k: torch.zeros_like(p) for k, p in self.params.items()}
        self.step = 0

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


@torch.no_grad()
def adam_step(store: ParamStore, lr: float = 1e-4, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> ParamStore:
    store.step += 1
    c1 = 1 - beta1 ** store.step
    c2 = 1 - beta2 ** store.step
    for name, p in store.params.items():
        g = p.grad if p.grad is not None else torch.zeros_like(p)
        m, v = store.m[name], store.v[name]
        m.mul_(beta1).add_(g, alpha=1 - beta1)
        v.mul_(beta2).addcmul_(g, g, value=1 - beta2)
        p.sub_(lr * (m / c1) / (torch.sqrt(v / c2) + eps))
    store.zero_grad()
    return store


def numeric_gradient(f: Callable[[Tensor], Tensor], theta: Tensor, h: float = 1e-5,
                     coords=None, chunk: int = 0) -> np.ndarray:
    """Central differences of scalar ``f`` at flat ``theta``, per coordinate.

    With ``chunk > 0`` the perturbed points are evaluated ``chunk`` at a time
    through ``torch.func.vmap``; ``f`` must then be vmap-compatible.
    """
    theta = theta.detach().clone().reshape(-1)
    idx = np.arange(theta.numel()) if coords is None else np.asarray(list(coords), dtype=np.int64)
    out = np.zeros(theta.numel())
    with torch.no_grad():
        if chunk > 0:
            fv = torch.func.vmap(f)
            for lo in range(0, len(idx), chunk):
                sel = torch.as_tensor(idx[lo:lo + chunk])
                rows = torch.arange(len(sel))
                plus = theta.repeat(len(sel), 1)
                minus = plus.clone()
                plus[rows, sel] += h
                minus[rows, sel] -= h
                out[sel.numpy()] = ((fv(plus) - fv(minus)) / (2 * h)).numpy()
            return out
        for i in idx:
            old = theta[i].item()
            theta[i] = old + h
            fp = float(f(theta))
            theta[i] = old - h
            fm = float(f(theta))
            theta[i] = old
            out[i] = (fp - fm) / (2 * h)
    return out


def gradient_check(f: Callable[[Tensor], Tensor], theta: Tensor, h: float = 1e-5,
                   coords=None, chunk: int = 0) -> float:
    """Max over coordinates of ``|a - n| / max(1e-8, |a| + |n|)`` between the
    autograd gradient ``a`` and the central difference ``n``."""
    theta = torch.as_tensor(theta, dtype=DTYPE).detach().reshape(-1)
    x = theta.clone().requires_grad_(True)
    (analytic,) = torch.autograd.grad(f(x), x)
    analytic = analytic.detach().numpy()
    numeric = numeric_gradient(f, theta, h, coords, chunk)
    idx = np.arange(theta.numel()) if coords is None else np.asarray(list(coords))
    a, n = analytic[idx], numeric[idx]
    rel = np.abs(a - n) / np.maximum(1e-8, np.abs(a) + np.abs(n))
    return float(rel.max()) if rel.size else 0.0


def module_gradient_check(module: nn.Module, loss: Callable[[nn.Module], Tensor],
                          h: float = 1e-5, coords=None, chunk: int = 0) -> float:
    """:func:`gradient_check` over all parameters of ``module`` flattened."""
    names = [n for n, _ in module.named_parameters()]
    shapes = [p.shape for _, p in module.named_parameters()]
    sizes = [p.numel() for _, p in module.named_parameters()]
    theta0 = torch.cat([p.detach().reshape(-1) for _, p in module.named_parameters()])

    def f(theta):
        params = {n: c.reshape(s) for n, c, s in zip(names, torch.split(theta, sizes), shapes)}
        return loss(lambda *a, **kw: torch.func.functional_call(module, params, a, kw))

    return gradient_check(f, theta0, h, coords, chunk)


def _write_record(fh, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    arr = np.ascontiguousarray(arr, dtype="<f8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(arr.tobytes())


def write_checkpoint(path, tensors: dict) -> None:
    """Layout: ``b"SARM"``, u32 version, then per record: u32 name length, name
    (utf-8), u32 rank, rank x u64 dims, little-endian float64 data."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        for name, t in tensors.items():
            arr = t.detach().cpu().numpy() if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
            _write_record(fh, name, arr)


def read_checkpoint(path) -> dict:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a SARM checkpoint")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    pos, out = 8, {}
    try:
        while pos < len(data):
            (n,) = struct.unpack_from("<I", data, pos)
            name = data[pos + 4:pos + 4 + n].decode("utf-8")
            pos += 4 + n
            (rank,) = struct.unpack_from("<I", data, pos)
            dims = struct.unpack_from(f"<{rank}Q", data, pos + 4)
            pos += 4 + 8 * rank
            count = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(dims)
            pos += 8 * count
            out[name] = arr.astype(np.float64)
    except (struct.error, ValueError) as e:
        raise FormatError(f"{path}: truncated checkpoint ({e})") from None
    return out


def save_store(store: ParamStore, path) -> None:
    tensors = dict(store.params)
    for k in store.params:
        tensors[f"adam.m/{k}"] = store.m[k]
        tensors[f"adam.v/{k}"] = store.v[k]
    tensors["adam.step"] = np.array(float(store.step))
    write_checkpoint(path, tensors)


def load_store(store: ParamStore, path) -> ParamStore:
    tensors = read_checkpoint(path)
    with torch.no_grad():
        for k, p in store.params.items():
            if k not in tensors:
                raise FormatError(f"{path}: missing parameter {k!r}")
            arr = tensors[k]
            if tuple(arr.shape) != tuple(p.shape):
                raise FormatError(f"{path}: {k!r} has shape {arr.shape}, model expects {tuple(p.shape)}")
            p.copy_(torch.from_numpy(arr))
            if f"adam.m/{k}" in tensors:
                store.m[k].copy_(torch.from_numpy(tensors[f"adam.m/{k}"]))
                store.v[k].copy_(torch.from_numpy(tensors[f"adam.v/{k}"]))
    store.step = int(np.asarray(tensors.get("adam.step", 0.0)).item())
    return store
