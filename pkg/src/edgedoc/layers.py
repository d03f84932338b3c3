"""Parameterized blocks built from the tensor primitives.

Each block is a pure function ``block(x, params, prefix)``; parameters live in
a flat :class:`ParamBundle` under dot-separated names, which double as the
checkpoint keys.  ``init_*`` functions add a block's parameters to a bundle.
"""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class LayerKind(enum.Enum):
    CONV_STEM = "ConvStem"
    CONV_ENCODER_BLOCK = "ConvEncoderBlock"
    TRANSPOSE_ATTENTION_BLOCK = "TransposeAttentionBlock"
    DOWNSAMPLE = "Downsample"
    UP_BLOCK = "UpBlock"
    CLS_HEAD = "ClsHead"
    MASK_HEAD = "MaskHead"


@dataclass(frozen=True)
class LayerSpec:
    kind: LayerKind
    in_channels: int
    out_channels: int
    kernel: int = 3
    expansion: int = 4

    def __post_init__(self):
        if self.in_channels <= 0 or self.out_channels <= 0:
            raise ValueError(f"{self.kind.value}: channels must be positive")
        if self.kernel % 2 == 0 and self.kind not in (LayerKind.CONV_STEM, LayerKind.DOWNSAMPLE):
            raise ValueError(f"{self.kind.value}: kernel must be odd, got {self.kernel}")
        if self.expansion <= 0:
            raise ValueError("expansion must be positive")


class ParamBundle:
    """Name -> Tensor map iterated in lexicographic name order."""

    def __init__(self, tensors: dict[str, Tensor] | None = None):
        self._t: dict[str, Tensor] = {}
        for k, v in (tensors or {}).items():
            self[k] = v

    def __setitem__(self, name: str, t: Tensor) -> None:
        if name in self._t:
            raise KeyError(f"duplicate parameter name {name!r}")
        self._t[name] = t

    def __getitem__(self, name: str) -> Tensor:
        return self._t[name]

    def __contains__(self, name: str) -> bool:
        return name in self._t

    def __len__(self) -> int:
        return len(self._t)

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._t))

    def names(self) -> list[str]:
        return sorted(self._t)

    def items(self) -> list[tuple[str, Tensor]]:
        return [(k, self._t[k]) for k in sorted(self._t)]

    def num_params(self) -> int:
        return sum(t.size for t in self._t.values())

    def requires_grad_(self, flag: bool = True) -> "ParamBundle":
        for t in self._t.values():
            t.requires_grad = flag
        return self

    def zero_grad(self) -> None:
        for t in self._t.values():
            t.grad = None

    def copy(self) -> "ParamBundle":
        return ParamBundle({k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.items()})

    def checksums(self) -> dict[str, str]:
        return {k: hashlib.sha256(v.data.tobytes()).hexdigest() for k, v in self.items()}


# ---------------------------------------------------------------------------
# initialisation


def he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    bound = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(np.float32), requires_grad=True)


def _zeros(*shape) -> Tensor:
    return Tensor(np.zeros(shape, np.float32), requires_grad=True)


def _ones(*shape) -> Tensor:
    return Tensor(np.ones(shape, np.float32), requires_grad=True)


def init_conv(p: ParamBundle, rng, name: str, cin: int, cout: int, k: int) -> None:
    p[f"{name}.weight"] = he_uniform(rng, (cout, cin, k, k), cin * k * k)
    p[f"{name}.bias"] = _zeros(cout)


def init_dwconv(p: ParamBundle, rng, name: str, c: int, k: int) -> None:
    p[f"{name}.weight"] = he_uniform(rng, (c, 1, k, k), k * k)
    p[f"{name}.bias"] = _zeros(c)


def init_norm(p: ParamBundle, name: str, c: int) -> None:
    p[f"{name}.weight"] = _ones(c)
    p[f"{name}.bias"] = _zeros(c)


def init_linear(p: ParamBundle, rng, name: str, cin: int, cout: int) -> None:
    # stored (in, out) so the forward is x @ W
    p[f"{name}.weight"] = he_uniform(rng, (cin, cout), cin)
    p[f"{name}.bias"] = _zeros(cout)


# ---------------------------------------------------------------------------
# small helpers


def conv(x: Tensor, p: ParamBundle, name: str, stride: int = 1, padding: int = 0) -> Tensor:
    return T.conv2d(x, p[f"{name}.weight"], p[f"{name}.bias"], stride=stride, padding=padding)


def dwconv(x: Tensor, p: ParamBundle, name: str) -> Tensor:
    return T.depthwise_conv2d(x, p[f"{name}.weight"], p[f"{name}.bias"])


def norm2d(x: Tensor, p: ParamBundle, name: str) -> Tensor:
    """Layer norm over the channel axis of an NCHW tensor."""
    return T.layer_norm(x, p[f"{name}.weight"], p[f"{name}.bias"], axis=1)


def linear(x: Tensor, p: ParamBundle, name: str) -> Tensor:
    return T.add(T.matmul(x, p[f"{name}.weight"]), p[f"{name}.bias"])


def _check_channels(block: str, x: Tensor, expected: int) -> None:
    if x.ndim != 4 or x.shape[1] != expected:
        raise T.ShapeError(block, x.shape, (None, expected, None, None), detail="channel mismatch")


# ---------------------------------------------------------------------------
# encoder blocks


def init_stem(p, rng, prefix, cin, cout, patch=4):
    init_conv(p, rng, f"{prefix}.conv", cin, cout, patch)
    init_norm(p, f"{prefix}.norm", cout)


def stem(x, p, prefix, patch=4):
    return norm2d(conv(x, p, f"{prefix}.conv", stride=patch), p, f"{prefix}.norm")


def init_downsample(p, rng, prefix, cin, cout):
    init_norm(p, f"{prefix}.norm", cin)
    init_conv(p, rng, f"{prefix}.conv", cin, cout, 2)


def downsample(x, p, prefix):
    return conv(norm2d(x, p, f"{prefix}.norm"), p, f"{prefix}.conv", stride=2)


def init_conv_encoder_block(p, rng, prefix, c, kernel=3, expansion=4):
    init_dwconv(p, rng, f"{prefix}.dw", c, kernel)
    init_norm(p, f"{prefix}.norm", c)
    init_conv(p, rng, f"{prefix}.pw1", c, expansion * c, 1)
    init_conv(p, rng, f"{prefix}.pw2", expansion * c, c, 1)


def conv_encoder_block(x: Tensor, p: ParamBundle, prefix: str) -> Tensor:
    """Residual block x + pw2(gelu(pw1(norm(dw(x)))))."""
    _check_channels("conv_encoder_block", x, p[f"{prefix}.dw.weight"].shape[0])
    h = dwconv(x, p, f"{prefix}.dw")
    h = norm2d(h, p, f"{prefix}.norm")
    h = T.gelu(conv(h, p, f"{prefix}.pw1"))
    h = conv(h, p, f"{prefix}.pw2")
    return T.add(x, h)


def init_transpose_attention_block(p, rng, prefix, c, expansion=4, temperature=1.0):
    init_norm(p, f"{prefix}.norm1", c)
    for proj in ("q", "k", "v", "proj"):
        init_conv(p, rng, f"{prefix}.{proj}", c, c, 1)
    p[f"{prefix}.temperature"] = Tensor(np.full((1,), temperature, np.float32), requires_grad=True)
    init_norm(p, f"{prefix}.norm2", c)
    init_conv(p, rng, f"{prefix}.pw1", c, expansion * c, 1)
    init_conv(p, rng, f"{prefix}.pw2", expansion * c, c, 1)


def channel_attention(q: Tensor, k: Tensor, v: Tensor, temperature: Tensor) -> tuple[Tensor, Tensor]:
    """Cross-covariance attention over channels.

    q, k, v are N x C x L.  Rows of q and k are L2-normalized along L, the
    C x C map softmax(t * q k^T) mixes the rows of v.  Returns (output, attention).
    """
    qn = T.l2_normalize_lastdim(q)
    kn = T.l2_normalize_lastdim(k)
    logits = T.mul(T.matmul(qn, T.transpose(kn)), temperature)
    attn = T.softmax_lastdim(logits)
    return T.matmul(attn, v), attn


def transpose_attention_block(x: Tensor, p: ParamBundle, prefix: str) -> Tensor:
    _check_channels("transpose_attention_block", x, p[f"{prefix}.q.weight"].shape[0])
    n, c, h, w = x.shape
    xn = norm2d(x, p, f"{prefix}.norm1")
    q, k, v = (T.reshape(conv(xn, p, f"{prefix}.{name}"), (n, c, h * w)) for name in ("q", "k", "v"))
    out, _ = channel_attention(q, k, v, p[f"{prefix}.temperature"])
    out = conv(T.reshape(out, (n, c, h, w)), p, f"{prefix}.proj")
    x = T.add(x, out)
    m = norm2d(x, p, f"{prefix}.norm2")
    m = conv(T.gelu(conv(m, p, f"{prefix}.pw1")), p, f"{prefix}.pw2")
    return T.add(x, m)


# ---------------------------------------------------------------------------
# decoder and heads


def init_up_block(p, rng, prefix, cin, cskip, cout, kernel=3):
    init_dwconv(p, rng, f"{prefix}.dw", cin + cskip, kernel)
    init_conv(p, rng, f"{prefix}.pw", cin + cskip, cout, 1)
    init_norm(p, f"{prefix}.norm", cout)


def up_block(x: Tensor, p: ParamBundle, prefix: str, skip: Tensor | None = None) -> Tensor:
    """relu(norm(pw(dw(concat(upsample2x(x), skip)))))."""
    h = T.upsample_nearest2x(x)
    if skip is not None:
        if skip.shape[0] != h.shape[0] or skip.shape[2:] != h.shape[2:]:
            raise T.ShapeError("up_block", h.shape, skip.shape, detail="skip must match upsampled input")
        h = T.concat_channels([h, skip])
    _check_channels("up_block", h, p[f"{prefix}.dw.weight"].shape[0])
    h = dwconv(h, p, f"{prefix}.dw")
    h = conv(h, p, f"{prefix}.pw")
    return T.relu(norm2d(h, p, f"{prefix}.norm"))


def init_cls_head(p, rng, prefix, c):
    hidden = max(1, c // 4)
    init_linear(p, rng, f"{prefix}.fc1", c, hidden)
    init_linear(p, rng, f"{prefix}.fc2", hidden, 1)


def cls_head(x: Tensor, p: ParamBundle, prefix: str) -> Tensor:
    """Global average pool then FC -> ReLU -> FC; returns N x 1 raw logits."""
    pooled = T.mean_reduce(x, axis=(2, 3))
    return linear(T.relu(linear(pooled, p, f"{prefix}.fc1")), p, f"{prefix}.fc2")


def init_mask_head(p, rng, prefix, c):
    init_conv(p, rng, f"{prefix}.conv", c, 1, 1)


def mask_head(x: Tensor, p: ParamBundle, prefix: str) -> Tensor:
    return conv(x, p, f"{prefix}.conv")
