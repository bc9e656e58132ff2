"""Parameterized layers: dense, conv, normalization, attention.

Layers compose tape primitives from `tensor.py`, so their backward passes come
from the tape; only conv2d and upsampling implement custom gradients for speed.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, concat, log_softmax


class Parameter(Tensor):
    def __init__(self, data):
        super().__init__(data, requires_grad=True)


class Module:
    """Base class: recursive parameter discovery over attributes."""

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}" if not prefix else f"{prefix}.{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full)
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}")
                    elif isinstance(item, Parameter):
                        yield f"{full}.{i}", item

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def param_checksum(self) -> int:
        """CRC of all parameter bytes, for frozen-backbone verification."""
        import zlib

        crc = 0
        for name, p in sorted(self.named_parameters()):
            crc = zlib.crc32(name.encode(), crc)
            crc = zlib.crc32(np.ascontiguousarray(p.data).tobytes(), crc)
        return crc


def _init_dense(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(np.float32)


class Dense(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        self.weight = Parameter(_init_dense(rng, in_dim, out_dim))
        self.bias = Parameter(np.zeros(out_dim, dtype=np.float32))

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.weight.shape[0]:
            raise ValueError(f"dense input dim {x.shape[-1]} != {self.weight.shape[0]}")
        return x @ self.weight + self.bias


class Conv2d(Module):
    """3x3 convolution, same padding, stride 1 or 2, NCHW layout."""

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator, stride: int = 1):
        if stride not in (1, 2):
            raise ValueError("stride must be 1 or 2")
        fan_in = in_ch * 9
        bound = np.sqrt(6.0 / (fan_in + out_ch * 9))
        self.weight = Parameter(rng.uniform(-bound, bound, size=(out_ch, in_ch, 3, 3)).astype(np.float32))
        self.bias = Parameter(np.zeros(out_ch, dtype=np.float32))
        self.stride = stride

    def forward(self, x: Tensor) -> Tensor:
        w, b, s = self.weight, self.bias, self.stride
        B, C, H, W = x.shape
        O = w.shape[0]
        if C != w.shape[1]:
            raise ValueError(f"conv input channels {C} != {w.shape[1]}")
        Ho = (H + s - 1) // s
        Wo = (W + s - 1) // s

        xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
        # patches: (B, C, 3, 3, Ho, Wo) gathered via strided slices
        sb, sc, sh, sw = xp.strides
        view = np.lib.stride_tricks.as_strided(
            xp,
            shape=(B, C, 3, 3, Ho, Wo),
            strides=(sb, sc, sh, sw, sh * s, sw * s),
            writeable=False,
        )
        cols = np.ascontiguousarray(view.transpose(0, 4, 5, 1, 2, 3)).reshape(B * Ho * Wo, C * 9)
        wflat = w.data.reshape(O, C * 9)
        out_data = (cols @ wflat.T + b.data).reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)

        out = Tensor._make(np.ascontiguousarray(out_data), (x, w, b), None)
        if out.requires_grad:
            def bwd(g):
                gflat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(B * Ho * Wo, O)
                if b.requires_grad:
                    b._accumulate(gflat.sum(axis=0))
                if w.requires_grad:
                    w._accumulate((gflat.T @ cols).reshape(w.shape))
                if x.requires_grad:
                    dcols = (gflat @ wflat).reshape(B, Ho, Wo, C, 3, 3).transpose(0, 3, 4, 5, 1, 2)
                    dxp = np.zeros_like(xp)
                    for ki in range(3):
                        for kj in range(3):
                            dxp[:, :, ki:ki + s * Ho:s, kj:kj + s * Wo:s] += dcols[:, :, ki, kj]
                    x._accumulate(dxp[:, :, 1:H + 1, 1:W + 1])
            out._backward = bwd
        return out


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x upsampling on NCHW."""
    B, C, H, W = x.shape
    out_data = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    out = Tensor._make(out_data, (x,), None)
    if out.requires_grad:
        def bwd(g):
            x._accumulate(g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)))
        out._backward = bwd
    return out


class GroupNorm(Module):
    def __init__(self, groups: int, channels: int, eps: float = 1e-5):
        if channels % groups != 0:
            raise ValueError(f"channels {channels} not divisible by groups {groups}")
        self.groups = groups
        self.eps = eps
        self.gamma = Parameter(np.ones(channels, dtype=np.float32))
        self.beta = Parameter(np.zeros(channels, dtype=np.float32))

    def forward(self, x: Tensor) -> Tensor:
        B, C, H, W = x.shape
        G = self.groups
        xg = x.reshape(B, G, C // G * H * W)
        mu = xg.mean(axis=2, keepdims=True)
        var = ((xg - mu) ** 2).mean(axis=2, keepdims=True)
        norm = (xg - mu) / (var + self.eps).sqrt()
        norm = norm.reshape(B, C, H, W)
        return norm * self.gamma.reshape(1, C, 1, 1) + self.beta.reshape(1, C, 1, 1)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.eps = eps
        self.gamma = Parameter(np.ones(dim, dtype=np.float32))
        self.beta = Parameter(np.zeros(dim, dtype=np.float32))

    def forward(self, x: Tensor) -> Tensor:
        mu = x.mean(axis=-1, keepdims=True)
        var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
        return (x - mu) / (var + self.eps).sqrt() * self.gamma + self.beta


class MultiHeadSelfAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator, causal: bool = False):
        if dim % heads != 0:
            raise ValueError("dim must divide heads")
        self.dim = dim
        self.heads = heads
        self.causal = causal
        self.wq = Dense(dim, dim, rng)
        self.wk = Dense(dim, dim, rng)
        self.wv = Dense(dim, dim, rng)
        self.wo = Dense(dim, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        B, T, D = x.shape
        h, dk = self.heads, D // self.heads
        q = self.wq(x).reshape(B, T, h, dk).transpose(0, 2, 1, 3)
        k = self.wk(x).reshape(B, T, h, dk).transpose(0, 2, 1, 3)
        v = self.wv(x).reshape(B, T, h, dk).transpose(0, 2, 1, 3)
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dk))
        if self.causal:
            mask = np.triu(np.full((T, T), -1e9, dtype=np.float32), k=1)
            scores = scores + Tensor(mask)
        attn = log_softmax(scores, axis=-1).exp()
        out = (attn @ v).transpose(0, 2, 1, 3).reshape(B, T, D)
        return self.wo(out)


class TransformerBlock(Module):
    """Pre-norm block: LN -> MHSA -> residual, LN -> MLP(4x, GeLU) -> residual."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, causal: bool = False):
        self.ln1 = LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, heads, rng, causal=causal)
        self.ln2 = LayerNorm(dim)
        self.fc1 = Dense(dim, 4 * dim, rng)
        self.fc2 = Dense(4 * dim, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.ln1(x))
        return x + self.fc2(self.fc1(self.ln2(x)).gelu())


class Transformer(Module):
    """Token projection + learned positions + N blocks + final LayerNorm."""

    def __init__(self, in_dim: int, dim: int, depth: int, heads: int, max_len: int,
                 rng: np.random.Generator, causal: bool = False):
        self.proj = Dense(in_dim, dim, rng)
        self.pos = Parameter((0.02 * rng.standard_normal((max_len, dim))).astype(np.float32))
        self.blocks = [TransformerBlock(dim, heads, rng, causal=causal) for _ in range(depth)]
        self.ln_f = LayerNorm(dim)
        self.max_len = max_len

    def forward(self, tokens: Tensor) -> Tensor:
        B, T, _ = tokens.shape
        if T > self.max_len:
            raise ValueError(f"sequence length {T} exceeds context {self.max_len}")
        x = self.proj(tokens) + self.pos[:T]
        for block in self.blocks:
            x = block(x)
        return self.ln_f(x)


class Sequential(Module):
    def __init__(self, *layers):
        self.layers = list(layers)

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x) if isinstance(layer, Module) else layer(x)
        return x


class Lambda(Module):
    """Stateless activation wrapper for use inside Sequential."""

    def __init__(self, fn):
        self.fn = fn

    def forward(self, x: Tensor) -> Tensor:
        return self.fn(x)
