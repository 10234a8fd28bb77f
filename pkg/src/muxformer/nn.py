"""ViT-style building blocks: attention, encoder layer, patchifier, head.

Parameters live in flat ``{path: Tensor}`` dicts; the small dataclasses here
are typed views over a prefix of such a dict.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

INIT_STD = 0.02


class ConfigError(ValueError):
    """An architecture configuration violates one of its constraints."""


@dataclass(frozen=True)
class ParamSpec:
    shape: tuple[int, ...]
    init: str = "trunc_normal"  # trunc_normal | fan_in | zeros | ones | orthogonal
    trainable: bool = True


def trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    """Normal(0, std) truncated at two standard deviations by resampling."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(np.float32)


def init_param(spec: ParamSpec, rng: np.random.Generator) -> np.ndarray:
    if spec.init == "zeros":
        return np.zeros(spec.shape, dtype=np.float32)
    if spec.init == "ones":
        return np.ones(spec.shape, dtype=np.float32)
    if spec.init == "trunc_normal":
        return trunc_normal(rng, spec.shape)
    if spec.init == "fan_in":
        # weights are stored (inputs..., out)
        return trunc_normal(rng, spec.shape, std=1.0 / math.sqrt(math.prod(spec.shape[:-1])))
    raise ValueError(f"unknown init {spec.init!r}")


def _view(cls, params: Mapping[str, Tensor], prefix: str):
    return cls(**{f.name: params[f"{prefix}.{f.name}"] for f in fields(cls)})


# --------------------------------------------------------------- parameters


@dataclass
class EncoderLayerParams:
    ln1_gain: Tensor
    ln1_bias: Tensor
    qkv_weight: Tensor
    qkv_bias: Tensor
    proj_weight: Tensor
    proj_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    fc1_weight: Tensor
    fc1_bias: Tensor
    fc2_weight: Tensor
    fc2_bias: Tensor

    @classmethod
    def view(cls, params: Mapping[str, Tensor], prefix: str) -> "EncoderLayerParams":
        return _view(cls, params, prefix)

    @staticmethod
    def specs(prefix: str, dim: int, mlp_ratio: int) -> dict[str, ParamSpec]:
        hidden = dim * mlp_ratio
        return {
            f"{prefix}.ln1_gain": ParamSpec((dim,), "ones"),
            f"{prefix}.ln1_bias": ParamSpec((dim,), "zeros"),
            f"{prefix}.qkv_weight": ParamSpec((dim, 3 * dim)),
            f"{prefix}.qkv_bias": ParamSpec((3 * dim,), "zeros"),
            f"{prefix}.proj_weight": ParamSpec((dim, dim)),
            f"{prefix}.proj_bias": ParamSpec((dim,), "zeros"),
            f"{prefix}.ln2_gain": ParamSpec((dim,), "ones"),
            f"{prefix}.ln2_bias": ParamSpec((dim,), "zeros"),
            f"{prefix}.fc1_weight": ParamSpec((dim, hidden)),
            f"{prefix}.fc1_bias": ParamSpec((hidden,), "zeros"),
            f"{prefix}.fc2_weight": ParamSpec((hidden, dim)),
            f"{prefix}.fc2_bias": ParamSpec((dim,), "zeros"),
        }


@dataclass
class MLPParams:
    """Two-layer GELU MLP (in -> hidden -> out)."""

    fc1_weight: Tensor
    fc1_bias: Tensor
    fc2_weight: Tensor
    fc2_bias: Tensor

    @classmethod
    def view(cls, params: Mapping[str, Tensor], prefix: str) -> "MLPParams":
        return _view(cls, params, prefix)

    @staticmethod
    def specs(prefix: str, dim: int, hidden: int, out: int | None = None,
              init: str = "trunc_normal") -> dict[str, ParamSpec]:
        out = dim if out is None else out
        return {
            f"{prefix}.fc1_weight": ParamSpec((dim, hidden), init),
            f"{prefix}.fc1_bias": ParamSpec((hidden,), "zeros"),
            f"{prefix}.fc2_weight": ParamSpec((hidden, out), init),
            f"{prefix}.fc2_bias": ParamSpec((out,), "zeros"),
        }


@dataclass
class PatchifierParams:
    """Conv patch embedding plus learned positional table; ``layers`` is the TrE stack."""

    weight: Tensor
    bias: Tensor
    pos_embed: Tensor
    layers: list[EncoderLayerParams]

    @staticmethod
    def specs(prefix: str, channels: int, patch: int, dim: int, length: int) -> dict[str, ParamSpec]:
        return {
            f"{prefix}.weight": ParamSpec((dim, channels, patch, patch)),
            f"{prefix}.bias": ParamSpec((dim,), "zeros"),
            f"{prefix}.pos_embed": ParamSpec((length, dim)),
        }


# --------------------------------------------------------------- operations


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    y = ad.matmul(x, weight)
    return y if bias is None else ad.add(y, bias)


def mlp(x: Tensor, p: MLPParams) -> Tensor:
    return linear(ad.gelu(linear(x, p.fc1_weight, p.fc1_bias)), p.fc2_weight, p.fc2_bias)


def multi_head_attention(x: Tensor, p: EncoderLayerParams, heads: int, return_weights: bool = False):
    """Pre-norm self-attention sublayer with the residual added.

    With ``return_weights`` the attention probabilities (b, heads, L, L) are
    returned alongside the output.
    """
    b, length, dim = x.shape
    if dim % heads:
        raise ConfigError(f"dim {dim} is not divisible by heads {heads}")
    if p.qkv_weight.shape != (dim, 3 * dim):
        raise ad.DimensionError(f"qkv weight {p.qkv_weight.shape} does not match width {dim}")
    dh = dim // heads
    h = ad.layernorm(x, p.ln1_gain, p.ln1_bias)
    qkv = linear(h, p.qkv_weight, p.qkv_bias).reshape(b, length, 3, heads, dh)
    qkv = qkv.transpose(2, 0, 3, 1, 4)  # (3, b, heads, L, dh)
    q, k, v = (ad.slice(qkv, 0, i, i + 1).reshape(b, heads, length, dh) for i in range(3))
    scores = ad.scale(ad.matmul(q, k.transpose(0, 1, 3, 2)), 1.0 / math.sqrt(dh))
    weights = ad.softmax(scores)
    ctx = ad.matmul(weights, v).transpose(0, 2, 1, 3).reshape(b, length, dim)
    out = ad.add(x, linear(ctx, p.proj_weight, p.proj_bias))
    return (out, weights) if return_weights else out


def encoder_layer(x: Tensor, p: EncoderLayerParams, heads: int) -> Tensor:
    """Attention then MLP sublayer, both pre-norm residual; shape is preserved."""
    if x.ndim != 3:
        raise ad.DimensionError(f"encoder_layer expects (b, L, dim), got {x.shape}")
    x = multi_head_attention(x, p, heads)
    h = ad.layernorm(x, p.ln2_gain, p.ln2_bias)
    h = linear(ad.gelu(linear(h, p.fc1_weight, p.fc1_bias)), p.fc2_weight, p.fc2_bias)
    return ad.add(x, h)


def encoder_stack(x: Tensor, layers: list[EncoderLayerParams], heads: int) -> Tensor:
    for p in layers:
        x = encoder_layer(x, p, heads)
    return x


def cnn_patchify(images: Tensor, p: PatchifierParams, patch: int) -> Tensor:
    """(b, C, H, W) images -> (b, L, dim) tokens with positions added."""
    if images.ndim != 4:
        raise ad.DimensionError(f"cnn_patchify expects (b, C, H, W), got {images.shape}")
    b, _, height, width = images.shape
    if height % patch or width % patch:
        raise ConfigError(f"image size {(height, width)} is not divisible by patch {patch}")
    dim = p.weight.shape[0]
    length = (height // patch) * (width // patch)
    if p.pos_embed.shape != (length, dim):
        raise ad.DimensionError(f"positional table {p.pos_embed.shape} does not match {(length, dim)}")
    grid = ad.conv2d(images, p.weight, stride=patch)  # (b, dim, h, w)
    tokens = grid.reshape(b, dim, length).transpose(0, 2, 1)
    return ad.add(ad.add(tokens, p.bias), p.pos_embed)


def tre_patchify(images: Tensor, p: PatchifierParams, patch: int, heads: int) -> Tensor:
    """CNN patchify followed by the patchifier's own encoder layers."""
    return encoder_stack(cnn_patchify(images, p, patch), p.layers, heads)


def classifier_head(cls: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    if cls.ndim != 2 or cls.shape[1] != weight.shape[0] or bias.shape != (weight.shape[1],):
        raise ad.DimensionError(
            f"classifier_head: features {cls.shape}, weight {weight.shape}, bias {bias.shape}"
        )
    return linear(cls, weight, bias)
