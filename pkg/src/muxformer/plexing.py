"""Multiplexers and demultiplexers.

Two ways of folding ``n`` images into one backbone sequence:

* :func:`multiplex` - token-wise average of per-slot MLPs applied after a
  fixed random orthogonal rotation (the Image Multiplexer baseline).
* :func:`concat_multiplex` - a strided conv1d shortens each image's token
  sequence to ``L / n`` and the shortened sequences are concatenated.

:func:`demultiplex` pulls slot ``i`` back out of a shared representation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, DimensionError, Tensor
from .nn import ConfigError, MLPParams, mlp

__all__ = [
    "ProjectionSet",
    "ReducerParams",
    "DemuxParams",
    "Codebook",
    "make_orthogonal_projections",
    "multiplex",
    "demultiplex",
    "concat_multiplex",
    "make_codebook",
    "toy_discrete_patchify",
]


@dataclass
class ProjectionSet:
    """Fixed orthogonal rotations ``matrices[i]`` plus trainable residual MLPs.

    The rotations are never updated by the optimizer.
    """

    matrices: np.ndarray  # (n, dim, dim)
    seed: int
    mlps: list[MLPParams] = field(default_factory=list)

    @property
    def n(self) -> int:
        return self.matrices.shape[0]


@dataclass
class ReducerParams:
    weight: Tensor  # (n_mux, dim, dim): kernel, in, out
    bias: Tensor
    slot_embed: Tensor | None  # (n_mux, dim)


@dataclass
class DemuxParams:
    heads: list[MLPParams]

    @property
    def n(self) -> int:
        return len(self.heads)


@dataclass
class Codebook:
    vectors: np.ndarray  # (K, patch_dim), unit rows
    seed: int


def make_orthogonal_projections(n: int, dim: int, seed: int) -> ProjectionSet:
    """``n`` independent Haar-distributed orthogonal matrices.

    QR of a seeded Gaussian sample in float64, with columns sign-fixed so that
    R has a positive diagonal; then cast to float32.
    """
    if n < 1 or dim < 1:
        raise ConfigError(f"need n >= 1 and dim >= 1, got n={n}, dim={dim}")
    rng = np.random.default_rng(seed)
    mats = np.empty((n, dim, dim), dtype=np.float32)
    for i in range(n):
        q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
        signs = np.sign(np.diag(r))
        signs[signs == 0] = 1.0
        mats[i] = (q * signs).astype(np.float32)
    return ProjectionSet(matrices=mats, seed=seed)


def multiplex(inputs: list[Tensor], proj: ProjectionSet, rotations: Tensor | None = None) -> Tensor:
    """Token-wise ``(1/n) sum_i MLP_i(phi_i w_j^i)``; MLPs are residual.

    ``rotations`` optionally supplies ``proj.matrices`` as a tensor (e.g. in
    float64); it is treated as a constant.
    """
    n = len(inputs)
    if n != proj.n or len(proj.mlps) != n:
        raise ContractError(f"got {n} inputs for a projection set of size {proj.n}")
    shape = inputs[0].shape
    for x in inputs[1:]:
        if x.shape != shape:
            raise DimensionError(f"multiplex inputs are ragged: {[t.shape for t in inputs]}")
    phis = rotations if rotations is not None else Tensor(proj.matrices)
    total = None
    for i, x in enumerate(inputs):
        phi_t = Tensor(np.ascontiguousarray(phis.data[i].T))
        rotated = ad.matmul(x, phi_t)
        term = ad.add(rotated, mlp(rotated, proj.mlps[i]))
        total = term if total is None else ad.add(total, term)
    return ad.scale(total, 1.0 / n)


def demultiplex(h: Tensor, index: int, p: DemuxParams) -> Tensor:
    """Representation of slot ``index`` extracted by that slot's MLP head."""
    if not 0 <= index < p.n:
        raise ContractError(f"demux index {index} out of range for {p.n} slots")
    return mlp(h, p.heads[index])


def reduce_tokens(tokens: Tensor, r: ReducerParams) -> Tensor:
    """Strided conv1d shortening (b, L, dim) to (b, L / n, dim)."""
    n = r.weight.shape[0]
    if tokens.shape[1] % n:
        raise ConfigError(f"token length {tokens.shape[1]} is not divisible by n_mux {n}")
    return ad.add(ad.conv1d(tokens, r.weight, stride=n), r.bias)


def add_slot_embedding(tokens: Tensor, r: ReducerParams, slot: int) -> Tensor:
    if r.slot_embed is None:
        return tokens
    dim = r.slot_embed.shape[1]
    return ad.add(tokens, ad.slice(r.slot_embed, 0, slot, slot + 1).reshape(dim))


def concat_multiplex(groups: list[Tensor], r: ReducerParams) -> Tensor:
    """Reduce each group to ``L / n`` tokens, tag with its slot, concatenate.

    ``groups[i]`` is (b/n, L, dim); the result is (b/n, L, dim) with slot i
    occupying tokens ``[i L/n, (i+1) L/n)``.
    """
    n = r.weight.shape[0]
    if len(groups) != n:
        raise ContractError(f"got {len(groups)} groups for a reducer of n_mux {n}")
    shape = groups[0].shape
    for g in groups[1:]:
        if g.shape != shape:
            raise DimensionError(f"concat_multiplex groups are ragged: {[t.shape for t in groups]}")
    if shape[1] % n:
        raise ConfigError(f"token length {shape[1]} is not divisible by n_mux {n}")
    if n == 1:
        return add_slot_embedding(reduce_tokens(groups[0], r), r, 0)
    # one conv over all groups, then split back into slots
    reduced = reduce_tokens(ad.concat(groups, axis=0), r)
    b = shape[0]
    parts = [add_slot_embedding(ad.slice(reduced, 0, i * b, (i + 1) * b), r, i) for i in range(n)]
    return ad.concat(parts, axis=1)


def make_codebook(size: int, patch_dim: int, seed: int) -> Codebook:
    if size < 2:
        raise ConfigError(f"codebook needs at least 2 codes, got {size}")
    rng = np.random.default_rng(seed)
    vecs = rng.standard_normal((size, patch_dim))
    vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
    return Codebook(vectors=vecs.astype(np.float32), seed=seed)


def image_patches(images: np.ndarray, patch: int) -> np.ndarray:
    """(b, C, H, W) -> (b, L, C*patch*patch), patches in row-major grid order."""
    b, c, h, w = images.shape
    if h % patch or w % patch:
        raise ConfigError(f"image size {(h, w)} is not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    x = images.reshape(b, c, gh, patch, gw, patch).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(b, gh * gw, c * patch * patch)


def toy_discrete_patchify(images, cb: Codebook, patch: int) -> np.ndarray:
    """Nearest-code index for every unit-normalised patch; ties go to the lowest index."""
    data = images.data if isinstance(images, Tensor) else np.asarray(images)
    patches = image_patches(data.astype(np.float64), patch)
    if patches.shape[-1] != cb.vectors.shape[1]:
        raise DimensionError(
            f"patch dimension {patches.shape[-1]} != codebook dimension {cb.vectors.shape[1]}"
        )
    norms = np.linalg.norm(patches, axis=-1, keepdims=True)
    unit = np.divide(patches, norms, out=np.zeros_like(patches), where=norms > 0)
    codes = cb.vectors.astype(np.float64)
    # |u - c|^2 = |u|^2 + 1 - 2 u.c ; argmin over c
    dist = (unit * unit).sum(-1, keepdims=True) + 1.0 - 2.0 * unit @ codes.T
    return np.argmin(dist, axis=-1).astype(np.int64)
