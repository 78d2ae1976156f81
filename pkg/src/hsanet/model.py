"""HSANet: siamese hierarchical encoder, hybrid self/cross attention,
HSC-AFM fusion and a coarse-to-fine decoder.

Parameters live in a flat :class:`ParamStore` keyed by dotted names; the
functions here are pure given ``(params, config)``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .tensor import ConvSpec, ShapeError, Tensor

# query stream for cross-attention; keys/values come from the other one
CROSS_QUERY_STREAM = "t1"


@dataclass
class ModelConfig:
    num_scales: int = 4
    base_channels: int = 16
    channel_schedule: list[int] | None = None
    attention_dim: list[int] | None = None
    attention_max_tokens: int = 256
    input_channels: int = 3
    threshold: float = 0.5

    def __post_init__(self):
        if self.num_scales < 2:
            raise ValueError(f"num_scales must be >= 2, got {self.num_scales}")
        if self.channel_schedule is None:
            self.channel_schedule = [self.base_channels * 2**s for s in range(self.num_scales)]
        self.channel_schedule = [int(c) for c in self.channel_schedule]
        if len(self.channel_schedule) != self.num_scales:
            raise ValueError(
                f"channel_schedule has {len(self.channel_schedule)} entries, "
                f"expected num_scales={self.num_scales}"
            )
        if self.attention_dim is None:
            self.attention_dim = list(self.channel_schedule)
        self.attention_dim = [int(d) for d in self.attention_dim]
        if len(self.attention_dim) != self.num_scales:
            raise ValueError("attention_dim must have one entry per scale")
        r = math.isqrt(self.attention_max_tokens)
        if self.attention_max_tokens < 1 or r * r != self.attention_max_tokens:
            raise ValueError(
                f"attention_max_tokens must be a perfect square, got {self.attention_max_tokens}"
            )
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must lie in (0, 1), got {self.threshold}")

    @property
    def divisor(self) -> int:
        return 2 ** (self.num_scales - 1)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class ParamStore:
    """Ordered, uniquely named collection of learnable tensors."""

    def __init__(self, entries: Sequence[tuple[str, Tensor]] = ()):
        self._entries: dict[str, Tensor] = {}
        for name, t in entries:
            self.add(name, t)

    def add(self, name: str, t: Tensor) -> Tensor:
        if name in self._entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        t.requires_grad = True
        t.name = name
        self._entries[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __iter__(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._entries.items())

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return list(self._entries)

    def tensors(self) -> list[Tensor]:
        return list(self._entries.values())

    def num_scalars(self) -> int:
        return sum(t.size for t in self._entries.values())

    def zero_grad(self) -> None:
        for t in self._entries.values():
            t.grad = None

    def conv(self, prefix: str, stride: int = 1) -> ConvSpec:
        k = self[f"{prefix}.weight"]
        return ConvSpec(k, self[f"{prefix}.bias"], stride=stride, padding=(k.shape[-1] - 1) // 2)

    def lin(self, prefix: str) -> tuple[Tensor, Tensor]:
        return self[f"{prefix}.weight"], self[f"{prefix}.bias"]


def _layer_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Weight shapes in canonical order; each is followed by its bias."""
    ch = cfg.channel_schedule
    out: list[tuple[str, tuple[int, ...]]] = []
    prev = cfg.input_channels
    for s, c in enumerate(ch):
        out.append((f"encoder.s{s}.conv1", (c, prev, 3, 3)))
        out.append((f"encoder.s{s}.conv2", (c, c, 3, 3)))
        prev = c
    for s, c in enumerate(ch):
        d = cfg.attention_dim[s]
        for kind in ("self", "cross"):
            for proj in ("q", "k", "v"):
                out.append((f"attn.s{s}.{kind}.{proj}", (d, c)))
            out.append((f"attn.s{s}.{kind}.out", (c, d)))
    for s, c in enumerate(ch):
        out.append((f"afm.s{s}.conv", (c, 3 * c, 3, 3)))
        out.append((f"afm.s{s}.lin1", (c, c)))
        out.append((f"afm.s{s}.lin2", (c, c)))
        out.append((f"afm.s{s}.refine", (c, c, 3, 3)))
    for s in range(len(ch) - 2, -1, -1):
        out.append((f"decoder.s{s}.conv", (ch[s], ch[s + 1] + ch[s], 3, 3)))
    out.append(("decoder.head", (1, ch[0], 1, 1)))
    return out


def init_params(config: ModelConfig, seed: int) -> ParamStore:
    """Uniform(+-sqrt(6/fan_in)) weights, zero biases, fully determined by ``seed``."""
    rng = np.random.default_rng(seed)
    store = ParamStore()
    for prefix, shape in _layer_shapes(config):
        fan_in = int(np.prod(shape[1:]))
        bound = math.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=shape).astype(np.float32)
        store.add(f"{prefix}.weight", Tensor(w))
        store.add(f"{prefix}.bias", Tensor(np.zeros(shape[0], dtype=np.float32)))
    return store


# ----------------------------------------------------------------------------
# encoder


@dataclass
class FeaturePyramid:
    levels: list[Tensor] = field(default_factory=list)

    def shapes(self) -> list[tuple[int, ...]]:
        return [lv.shape for lv in self.levels]


def check_divisible(h: int, w: int, config: ModelConfig) -> None:
    d = config.divisor
    if h % d or w % d:
        raise ShapeError(
            f"spatial extents {h}x{w} must be divisible by {d} "
            f"(2^(num_scales-1) with num_scales={config.num_scales})"
        )


def encode(image: Tensor, params: ParamStore, config: ModelConfig) -> FeaturePyramid:
    image = T._as_tensor(image)
    if image.ndim != 4 or image.shape[1] != config.input_channels:
        raise ShapeError(
            f"encode expects N x {config.input_channels} x H x W input, got {image.shape}"
        )
    check_divisible(image.shape[2], image.shape[3], config)
    levels = []
    x = image
    for s in range(config.num_scales):
        if s:
            x = T.resample(x, 2, "down")
        x = T.relu(T.conv2d(x, params.conv(f"encoder.s{s}.conv1")))
        x = T.relu(T.conv2d(x, params.conv(f"encoder.s{s}.conv2")))
        levels.append(x)
    return FeaturePyramid(levels)


# ----------------------------------------------------------------------------
# attention


def pool_factor(h: int, w: int, max_tokens: int) -> int:
    """Smallest factor dividing h and w that brings h*w/f^2 under the cap."""
    f = 1
    while (h // f) * (w // f) > max_tokens or h % f or w % f:
        f += 1
        if f > max(h, w):
            raise ShapeError(f"cannot pool {h}x{w} under {max_tokens} tokens")
    return f


def _attend(query: Tensor, context: Tensor, params: ParamStore, prefix: str, max_tokens: int) -> Tensor:
    if query.shape != context.shape:
        raise ShapeError(
            f"attention: query {query.shape} and context {context.shape} differ in shape"
        )
    N, C, H, W = query.shape
    wq, bq = params.lin(f"{prefix}.q")
    if wq.shape[1] != C:
        raise ShapeError(f"attention {prefix}: {C} input channels but weights expect {wq.shape[1]}")
    f = pool_factor(H, W, max_tokens)
    q_in, c_in = query, context
    if f > 1:
        q_in = T.resample(query, f, "down")
        c_in = q_in if context is query else T.resample(context, f, "down")
    h, w = H // f, W // f

    def tokens(x: Tensor) -> Tensor:
        return T.transpose(T.reshape(x, (N, C, h * w)), (0, 2, 1))

    q_tok = tokens(q_in)
    c_tok = q_tok if c_in is q_in else tokens(c_in)
    q = T.linear(q_tok, wq, bq)
    k = T.linear(c_tok, *params.lin(f"{prefix}.k"))
    v = T.linear(c_tok, *params.lin(f"{prefix}.v"))
    d = q.shape[-1]
    scores = T.matmul(q, T.transpose(k, (0, 2, 1)))
    attn = T.softmax(T.mul(scores, 1.0 / math.sqrt(d)), axis=-1)
    mixed = T.linear(T.matmul(attn, v), *params.lin(f"{prefix}.out"))
    out = T.reshape(T.transpose(mixed, (0, 2, 1)), (N, C, h, w))
    if f > 1:
        out = T.resample(out, f, "up")
    return T.add(query, out)


def self_attention(feat: Tensor, params: ParamStore, scale: int, config: ModelConfig) -> Tensor:
    return _attend(feat, feat, params, f"attn.s{scale}.self", config.attention_max_tokens)


def cross_attention(
    query_feat: Tensor, context_feat: Tensor, params: ParamStore, scale: int, config: ModelConfig,
    prefix: str | None = None,
) -> Tensor:
    """Queries from ``query_feat``, keys and values from ``context_feat``.

    ``prefix`` overrides which parameter group is used; passing the self
    attention prefix gives the same computation as :func:`self_attention`.
    """
    prefix = prefix or f"attn.s{scale}.cross"
    return _attend(query_feat, context_feat, params, prefix, config.attention_max_tokens)


# ----------------------------------------------------------------------------
# fusion and decoding


def hsc_afm(self_t1: Tensor, self_t2: Tensor, cross: Tensor, params: ParamStore, scale: int) -> Tensor:
    if not (self_t1.shape == self_t2.shape == cross.shape):
        raise ShapeError(
            f"hsc_afm: input shapes differ: {self_t1.shape}, {self_t2.shape}, {cross.shape}"
        )
    p = f"afm.s{scale}"
    a = T.conv2d(T.concat([self_t1, self_t2, cross], axis=1), params.conv(f"{p}.conv"))
    weighted = T.mul(a, T.softmax(a, axis=1))
    tok = T.transpose(weighted, (0, 2, 3, 1))  # channels last for pointwise linears
    h = T.linear(T.relu(T.linear(tok, *params.lin(f"{p}.lin1"))), *params.lin(f"{p}.lin2"))
    fused = T.add(a, T.transpose(h, (0, 3, 1, 2)))
    return T.relu(T.conv2d(fused, params.conv(f"{p}.refine")))


def decode(fused: Sequence[Tensor], params: ParamStore, config: ModelConfig) -> Tensor:
    if len(fused) != config.num_scales:
        raise ShapeError(f"decode expects {config.num_scales} levels, got {len(fused)}")
    for s in range(1, len(fused)):
        fine, coarse = fused[s - 1].shape, fused[s].shape
        if fine[0] != coarse[0] or fine[2] != 2 * coarse[2] or fine[3] != 2 * coarse[3]:
            raise ShapeError(f"decode: level {s} shape {coarse} inconsistent with level {s-1} {fine}")
    x = fused[-1]
    for s in range(config.num_scales - 2, -1, -1):
        x = T.concat([T.resample(x, 2, "up"), fused[s]], axis=1)
        x = T.relu(T.conv2d(x, params.conv(f"decoder.s{s}.conv")))
    return T.sigmoid(T.conv2d(x, params.conv("decoder.head")))


def forward(t1: Tensor, t2: Tensor, params: ParamStore, config: ModelConfig) -> Tensor:
    """Change probability map of shape (N, 1, H, W)."""
    t1, t2 = T._as_tensor(t1), T._as_tensor(t2)
    if t1.shape != t2.shape:
        raise ShapeError(f"t1 {t1.shape} and t2 {t2.shape} must share shape")
    p1 = encode(t1, params, config)
    p2 = encode(t2, params, config)
    fused = []
    for s in range(config.num_scales):
        f1, f2 = p1.levels[s], p2.levels[s]
        s1 = self_attention(f1, params, s, config)
        s2 = self_attention(f2, params, s, config)
        if CROSS_QUERY_STREAM == "t1":
            c = cross_attention(f1, f2, params, s, config)
        else:
            c = cross_attention(f2, f1, params, s, config)
        fused.append(hsc_afm(s1, s2, c, params, s))
    return decode(fused, params, config)
