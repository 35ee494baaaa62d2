"""The noise predictor: a small conv encoder-decoder with one self-attention
block at the lowest resolution, switchable between standard attention and the
hole-suppressing variant.

Conditioning follows the inpainting convention: the noised latent, the binary
hole mask, and the visible (masked) image are concatenated along the channel
axis, giving 2C + 1 input channels.  The hole-suppressing attention replaces
every hole-to-hole logit with a large negative number before the softmax, so
hole tokens can only aggregate background information while background tokens
see the full key set and reproduce standard attention exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tz
from .rng import stream
from .tensor import Tensor

_NEG_LOGIT = -1e9


@dataclass(frozen=True)
class DenoiserConfig:
    image_size: int = 32
    image_channels: int = 3
    base_channels: int = 16
    channel_mult: tuple[int, ...] = (1, 2, 4)
    attn_resolution: int = 8
    time_embed_dim: int = 32
    sra_enabled: bool = True
    dtype: str = "float32"

    @property
    def depth(self) -> int:
        return len(self.channel_mult) - 1

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(self.base_channels * m for m in self.channel_mult)

    @property
    def cond_channels(self) -> int:
        return 2 * self.image_channels + 1

    def validate(self) -> "DenoiserConfig":
        if self.depth < 1:
            raise ValueError("zero-depth config rejected: need at least one downsampling level")
        if self.base_channels < 1 or self.time_embed_dim < 2 or self.time_embed_dim % 2:
            raise ValueError(f"bad widths: base={self.base_channels}, time={self.time_embed_dim}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype}")
        res = self.image_size
        for _ in range(self.depth):
            if res % 2:
                raise ValueError(f"resolution {res} not divisible by 2 in the downsampling stack")
            res //= 2
        if res != self.attn_resolution:
            raise ValueError(
                f"attention resolution {self.attn_resolution} not reachable: "
                f"{self.image_size} downsampled {self.depth}x gives {res}"
            )
        return self

    def to_dict(self) -> dict:
        return {
            "image_size": self.image_size, "image_channels": self.image_channels,
            "base_channels": self.base_channels, "channel_mult": list(self.channel_mult),
            "attn_resolution": self.attn_resolution, "time_embed_dim": self.time_embed_dim,
            "sra_enabled": self.sra_enabled, "dtype": self.dtype,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        d = dict(d)
        d["channel_mult"] = tuple(d["channel_mult"])
        return cls(**d).validate()


@dataclass(frozen=True)
class ExtendedMask:
    """Flattened token mask plus the pairwise keep/suppress table.

    ``pairwise[i, j]`` is 1 when token i or token j is background and -inf
    when both are holes; it is symmetric by construction.
    """

    tokens: np.ndarray  # (n,) of {0., 1.}; 1 = hole
    pairwise: np.ndarray  # (n, n) of {1., -inf}

    @property
    def keep(self) -> np.ndarray:
        return np.isfinite(self.pairwise).astype(np.float64)


def extended_mask(mask_image: np.ndarray, h: int, w: int) -> ExtendedMask:
    """Max-pool the image mask to (h, w), flatten row-major, build the table.

    Max-pooling is conservative: a token is a hole if any covered pixel is.
    An all-hole token mask is rejected because every attention row would lose
    its full key set.
    """
    mh, mw = mask_image.shape
    if mh % h or mw % w:
        raise ValueError(f"token grid {h}x{w} must divide mask resolution {mh}x{mw}")
    if not np.all((mask_image == 0.0) | (mask_image == 1.0)):
        raise ValueError("mask must be binary")
    pooled = mask_image.reshape(h, mh // h, w, mw // w).max(axis=(1, 3))
    tokens = pooled.reshape(-1)
    if tokens.all():
        raise ValueError("degenerate mask: every token is a hole")
    both_hole = (tokens[:, None] == 1.0) & (tokens[None, :] == 1.0)
    pairwise = np.where(both_hole, -np.inf, 1.0)
    return ExtendedMask(tokens=tokens, pairwise=pairwise)


def sra_attention(q: Tensor, k: Tensor, v: Tensor, ext: ExtendedMask) -> Tensor:
    """Scaled dot-product attention with hole-to-hole logits suppressed.

    Suppressed positions have their logit replaced by -1e9 before the softmax
    (the only numerically meaningful reading of a multiplicative -inf mask),
    so their post-softmax weight underflows to exactly zero whenever the row
    retains at least one background key.  Background rows are untouched and
    match standard attention bit for bit.
    """
    n, d = q.shape
    if k.shape != (n, d) or v.shape[0] != n:
        raise tz.ShapeError(f"attention shapes disagree: q{q.shape} k{k.shape} v{v.shape}")
    if ext.tokens.shape != (n,):
        raise tz.ShapeError(f"mask has {ext.tokens.shape[0]} tokens for {n} queries")
    keep = ext.keep
    if not keep.any(axis=1).all():
        raise ValueError("a query row has every key suppressed")
    logits = tz.scale(tz.matmul(q, k, transpose_b=True), 1.0 / math.sqrt(d))
    keep_t = Tensor(keep.astype(q.dtype))
    fill_t = Tensor(((1.0 - keep) * _NEG_LOGIT).astype(q.dtype))
    masked = tz.add(tz.mul(logits, keep_t), fill_t)
    return tz.matmul(tz.softmax_lastdim(masked), v)


def standard_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    n, d = q.shape
    logits = tz.scale(tz.matmul(q, k, transpose_b=True), 1.0 / math.sqrt(d))
    return tz.matmul(tz.softmax_lastdim(logits), v)


def condition_input(x_t: Tensor | np.ndarray, mask: np.ndarray, masked_image: np.ndarray) -> Tensor:
    """Channel concatenation [x_t | mask | masked_image]."""
    x = x_t if isinstance(x_t, Tensor) else Tensor(x_t)
    if not np.all((mask == 0.0) | (mask == 1.0)):
        raise ValueError("mask must be binary")
    if mask.shape != x.shape[1:] or masked_image.shape != x.shape:
        raise tz.ShapeError(
            f"conditioning shapes disagree: x{x.shape} mask{mask.shape} masked{masked_image.shape}"
        )
    mask_t = Tensor(mask[None, :, :].astype(x.dtype))
    masked_t = Tensor(masked_image.astype(x.dtype))
    return tz.concat_channels([x, mask_t, masked_t])


def timestep_embedding(t: int, dim: int, dtype) -> np.ndarray:
    """Sinusoidal features of the integer step index."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half, dtype=np.float64) / half)
    angles = float(t) * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)]).astype(dtype)


class DenoiserModel:
    """Weights plus the forward pass; training mutates weights in place."""

    def __init__(self, config: DenoiserConfig, seed: int, params: dict[str, Tensor]):
        self.config = config
        self.seed = int(seed)
        self.params = params
        self.sra_enabled = config.sra_enabled

    # -- construction -------------------------------------------------------

    @classmethod
    def build(cls, config: DenoiserConfig, seed: int) -> "DenoiserModel":
        config = config.validate()
        dt = np.float32 if config.dtype == "float32" else np.float64
        rng = stream(seed, "init")
        params: dict[str, Tensor] = {}

        def conv_param(name: str, cout: int, cin: int, k: int = 3, zero: bool = False):
            fan_in = cin * k * k
            w = np.zeros((cout, cin, k, k)) if zero else rng.standard_normal((cout, cin, k, k)) * math.sqrt(2.0 / fan_in)
            params[f"{name}.w"] = Tensor(w.astype(dt), requires_grad=True)
            params[f"{name}.b"] = Tensor(np.zeros(cout, dtype=dt), requires_grad=True)

        def norm_param(name: str, c: int):
            params[f"{name}.g"] = Tensor(np.ones(c, dtype=dt), requires_grad=True)
            params[f"{name}.b"] = Tensor(np.zeros(c, dtype=dt), requires_grad=True)

        def linear_param(name: str, cin: int, cout: int):
            w = rng.standard_normal((cin, cout)) * math.sqrt(2.0 / cin)
            params[f"{name}.w"] = Tensor(w.astype(dt), requires_grad=True)
            params[f"{name}.b"] = Tensor(np.zeros(cout, dtype=dt), requires_grad=True)

        widths = config.widths
        conv_param("stem", widths[0], config.cond_channels)
        norm_param("stem.norm", widths[0])
        for lvl in range(1, len(widths)):
            conv_param(f"down{lvl}", widths[lvl], widths[lvl - 1])
            norm_param(f"down{lvl}.norm", widths[lvl])
        deep = widths[-1]
        linear_param("temb1", config.time_embed_dim, deep)
        linear_param("temb2", deep, deep)
        conv_param("mid1", deep, deep)
        norm_param("mid1.norm", deep)
        linear_param("attn.q", deep, deep)
        linear_param("attn.k", deep, deep)
        linear_param("attn.v", deep, deep)
        linear_param("attn.out", deep, deep)
        conv_param("mid2", deep, deep)
        norm_param("mid2.norm", deep)
        for lvl in range(len(widths) - 1, 0, -1):
            conv_param(f"up{lvl}", widths[lvl - 1], widths[lvl] + widths[lvl - 1])
            norm_param(f"up{lvl}.norm", widths[lvl - 1])
        conv_param("head", config.image_channels, widths[0], zero=True)
        return cls(config=config, seed=seed, params=params)

    # -- parameter plumbing --------------------------------------------------

    def parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    def param_tensors(self) -> list[Tensor]:
        return [p for _, p in self.params.items()]

    @property
    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(np.float32 if self.config.dtype == "float32" else np.float64)

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    # -- forward -------------------------------------------------------------

    def _conv_block(self, name: str, h: Tensor, stride: int = 1) -> Tensor:
        p = self.params
        h = tz.conv2d(h, p[f"{name}.w"], p[f"{name}.b"], stride=stride, pad=1)
        h = tz.group_norm_lite(h, p[f"{name}.norm.g"], p[f"{name}.norm.b"])
        return tz.silu(h)

    def _broadcast_channelwise(self, vec: Tensor, hh: int, ww: int) -> Tensor:
        ones = Tensor(np.ones((1, hh * ww), dtype=self.dtype))
        tiled = tz.matmul(tz.reshape(vec, (vec.size, 1)), ones)
        return tz.reshape(tiled, (vec.size, hh, ww))

    def _attention(self, h: Tensor, mask: np.ndarray) -> Tensor:
        p = self.params
        c, hh, ww = h.shape
        tokens = tz.transpose2d(tz.reshape(h, (c, hh * ww)))
        q = tz.linear(tokens, p["attn.q.w"], p["attn.q.b"])
        k = tz.linear(tokens, p["attn.k.w"], p["attn.k.b"])
        v = tz.linear(tokens, p["attn.v.w"], p["attn.v.b"])
        if self.sra_enabled:
            out = sra_attention(q, k, v, extended_mask(mask, hh, ww))
        else:
            out = standard_attention(q, k, v)
        out = tz.linear(out, p["attn.out.w"], p["attn.out.b"])
        return tz.add(h, tz.reshape(tz.transpose2d(out), (c, hh, ww)))

    def predict_noise(
        self,
        x_t: Tensor | np.ndarray,
        mask: np.ndarray,
        masked_image: np.ndarray,
        t: int,
    ) -> Tensor:
        """Noise estimate with x_t's shape; differentiable through the weights."""
        if t < 1:
            raise ValueError(f"step index must be >= 1, got {t}")
        if mask.all():
            raise ValueError("degenerate conditioning: full-image hole mask")
        cfg = self.config
        x = x_t if isinstance(x_t, Tensor) else Tensor(np.asarray(x_t, dtype=self.dtype))
        if x.dtype != self.dtype:
            x = Tensor(x.data.astype(self.dtype))
        expected = (cfg.image_channels, cfg.image_size, cfg.image_size)
        if x.shape != expected:
            raise tz.ShapeError(f"latent shape {x.shape} != configured {expected}")

        h = condition_input(x, mask.astype(np.float64), masked_image)
        h = self._conv_block("stem", h)
        skips = [h]
        for lvl in range(1, len(cfg.widths)):
            h = self._conv_block(f"down{lvl}", h, stride=2)
            skips.append(h)

        emb = Tensor(timestep_embedding(t, cfg.time_embed_dim, self.dtype)[None, :])
        emb = tz.linear(emb, self.params["temb1.w"], self.params["temb1.b"])
        emb = tz.silu(emb)
        emb = tz.linear(emb, self.params["temb2.w"], self.params["temb2.b"])
        hh = ww = cfg.attn_resolution
        h = tz.add(h, self._broadcast_channelwise(tz.reshape(emb, (emb.size,)), hh, ww))

        h = self._conv_block("mid1", h)
        h = self._attention(h, mask)
        h = self._conv_block("mid2", h)

        for lvl in range(len(cfg.widths) - 1, 0, -1):
            h = tz.upsample_nearest2x(h)
            h = tz.concat_channels([h, skips[lvl - 1]])
            h = self._conv_block(f"up{lvl}", h)
        return tz.conv2d(h, self.params["head.w"], self.params["head.b"], pad=1)


def build_denoiser(config: DenoiserConfig, seed: int) -> DenoiserModel:
    """Deterministically initialized model; same (config, seed) gives identical weights."""
    return DenoiserModel.build(config, seed)
