"""Model configurations, parameter layout and forward passes.

Variants
--------
``concatplexer``
    patchify -> ``concat_point`` per-image encoder layers -> conv reduce +
    concatenate -> CLS -> shared backbone layers -> per-slot demux -> head.
``image-multiplexer``
    patchify (conv or toy discrete codes) -> per-image layers (usually none)
    -> orthogonal-projection multiplex -> CLS -> backbone -> demux -> head.
``vit``
    plain ViT with every layer in the backbone; ``n_mux`` is forced to 1.
``reduced-no-concat``
    like ``concatplexer`` but the reduced sequences stay separate (thicker
    batch, no multiplexing).
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .nn import (
    ConfigError,
    EncoderLayerParams,
    MLPParams,
    ParamSpec,
    PatchifierParams,
    classifier_head,
    cnn_patchify,
    encoder_stack,
    init_param,
)
from .plexing import (
    DemuxParams,
    ProjectionSet,
    ReducerParams,
    add_slot_embedding,
    concat_multiplex,
    demultiplex,
    make_codebook,
    make_orthogonal_projections,
    multiplex,
    reduce_tokens,
    toy_discrete_patchify,
)

VARIANTS = ("concatplexer", "image-multiplexer", "vit", "reduced-no-concat")
TOKENIZERS = ("cnn", "tre", "toy-discrete")


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "concatplexer"
    image_size: int = 32
    channels: int = 1
    patch_size: int = 4
    dim: int = 128
    heads: int = 4
    total_layers: int = 6
    concat_point: int = 2
    n_mux: int = 2
    num_classes: int = 10
    demux_hidden: int = 128
    mlp_ratio: int = 4
    tokenizer: str = "tre"
    codebook_size: int = 512
    slot_embeddings: bool = True
    teacher_dim: int = 0

    def __post_init__(self):
        if self.variant == "vit" and self.n_mux != 1:
            object.__setattr__(self, "n_mux", 1)

    @property
    def tokens_per_image(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def projection_layers(self) -> int:
        return 0 if self.variant == "vit" else self.concat_point

    @property
    def backbone_layers(self) -> int:
        return self.total_layers - self.projection_layers

    @property
    def backbone_length(self) -> int:
        """Sequence length seen by the backbone, CLS included."""
        if self.variant == "reduced-no-concat":
            return self.tokens_per_image // self.n_mux + 1
        return self.tokens_per_image + 1

    def validate(self) -> "ModelConfig":
        def fail(msg):
            raise ConfigError(msg)

        if self.variant not in VARIANTS:
            fail(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.tokenizer not in TOKENIZERS:
            fail(f"tokenizer must be one of {TOKENIZERS}, got {self.tokenizer!r}")
        if self.tokenizer == "toy-discrete" and self.variant != "image-multiplexer":
            fail("tokenizer 'toy-discrete' is only available for the image-multiplexer variant")
        for name in ("image_size", "channels", "patch_size", "dim", "heads", "total_layers",
                     "n_mux", "num_classes", "demux_hidden", "mlp_ratio"):
            if getattr(self, name) < 1:
                fail(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.image_size % self.patch_size:
            fail(f"image_size {self.image_size} must be divisible by patch_size {self.patch_size}")
        if self.dim % self.heads:
            fail(f"dim {self.dim} must be divisible by heads {self.heads}")
        if not 0 <= self.concat_point <= self.total_layers:
            fail(f"concat_point must satisfy 0 <= {self.concat_point} <= total_layers {self.total_layers}")
        if self.tokens_per_image % self.n_mux:
            fail(f"token length L={self.tokens_per_image} must be divisible by n_mux {self.n_mux}")
        if self.tokenizer == "toy-discrete" and self.codebook_size < 2:
            fail(f"codebook_size must be >= 2, got {self.codebook_size}")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**dict(data))

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


def param_specs(cfg: ModelConfig) -> dict[str, ParamSpec]:
    """Every parameter name and shape for ``cfg``, in initialisation order."""
    cfg.validate()
    d, n, length = cfg.dim, cfg.n_mux, cfg.tokens_per_image
    specs: dict[str, ParamSpec] = {}
    if cfg.tokenizer == "toy-discrete":
        specs["patchify.embed"] = ParamSpec((cfg.codebook_size, d))
        specs["patchify.pos_embed"] = ParamSpec((length, d))
    else:
        specs.update(PatchifierParams.specs("patchify", cfg.channels, cfg.patch_size, d, length))
    for i in range(cfg.projection_layers):
        specs.update(EncoderLayerParams.specs(f"proj_layers.{i}", d, cfg.mlp_ratio))
    if cfg.variant in ("concatplexer", "reduced-no-concat"):
        specs["reducer.weight"] = ParamSpec((n, d, d), "fan_in")
        specs["reducer.bias"] = ParamSpec((d,), "zeros")
        if cfg.slot_embeddings:
            specs["reducer.slot_embed"] = ParamSpec((n, d))
    if cfg.variant == "image-multiplexer":
        specs["multiplexer.rotations"] = ParamSpec((n, d, d), "orthogonal", trainable=False)
        for i in range(n):
            specs.update(MLPParams.specs(f"multiplexer.mlp.{i}", d, d))
    specs["cls_token"] = ParamSpec((1, d))
    if cfg.variant in ("concatplexer", "reduced-no-concat"):
        specs["backbone.pos_embed"] = ParamSpec((cfg.backbone_length, d))
    for i in range(cfg.backbone_layers):
        specs.update(EncoderLayerParams.specs(f"backbone.{i}", d, cfg.mlp_ratio))
    specs["norm.gain"] = ParamSpec((d,), "ones")
    specs["norm.bias"] = ParamSpec((d,), "zeros")
    if cfg.variant != "vit":
        for i in range(n):
            # fan-in init keeps the non-residual demux from shrinking the CLS signal
            specs.update(MLPParams.specs(f"demux.{i}", d, cfg.demux_hidden, init="fan_in"))
    specs["head.weight"] = ParamSpec((d, cfg.num_classes))
    specs["head.bias"] = ParamSpec((cfg.num_classes,), "zeros")
    if cfg.variant == "image-multiplexer":
        specs["retrieval.weight"] = ParamSpec((d, cfg.codebook_size))
        specs["retrieval.bias"] = ParamSpec((cfg.codebook_size,), "zeros")
    if cfg.teacher_dim > 0:
        specs["teacher_proj.weight"] = ParamSpec((d, cfg.teacher_dim))
    return specs


@dataclass
class ModelState:
    """Configuration, seed and every parameter array keyed by path."""

    config: ModelConfig
    seed: int
    params: dict[str, np.ndarray]
    codebook: object = field(default=None, repr=False)

    @property
    def trainable(self) -> list[str]:
        specs = param_specs(self.config)
        return [k for k, s in specs.items() if s.trainable]

    def leaves(self, requires_grad: bool = True) -> dict[str, Tensor]:
        """Wrap parameters as tensors; fixed buffers never require grad."""
        trainable = set(self.trainable) if requires_grad else set()
        return {k: Tensor(v, requires_grad=k in trainable) for k, v in self.params.items()}

    def astype(self, dtype) -> "ModelState":
        return ModelState(self.config, self.seed,
                          {k: v.astype(dtype) for k, v in self.params.items()}, self.codebook)

    def num_parameters(self, trainable_only: bool = True) -> int:
        names = self.trainable if trainable_only else list(self.params)
        return int(sum(self.params[k].size for k in names))


def build_model(cfg: ModelConfig, seed: int = 0) -> ModelState:
    """Deterministically initialise every parameter of ``cfg`` from ``seed``."""
    specs = param_specs(cfg)
    rng = np.random.default_rng(seed)
    params = {}
    for name, spec in specs.items():
        if spec.init == "orthogonal":
            params[name] = make_orthogonal_projections(spec.shape[0], spec.shape[1], seed).matrices
        else:
            params[name] = init_param(spec, rng)
    return ModelState(cfg, seed, params, _codebook_for(cfg, seed))


def _codebook_for(cfg: ModelConfig, seed: int):
    if cfg.variant != "image-multiplexer":
        return None
    return make_codebook(cfg.codebook_size, cfg.channels * cfg.patch_size ** 2, seed)


# ------------------------------------------------------------------ forward


@dataclass
class MuxBatch:
    """``n_mux`` equally sized image groups; slot ``i`` is ``groups[i]``."""

    groups: list[np.ndarray]
    labels: list[np.ndarray] = field(default_factory=list)
    ids: list[np.ndarray] = field(default_factory=list)

    @property
    def n_mux(self) -> int:
        return len(self.groups)

    @property
    def group_size(self) -> int:
        return self.groups[0].shape[0]

    def flat_images(self) -> np.ndarray:
        return np.concatenate(self.groups, axis=0)

    def flat_labels(self) -> np.ndarray:
        return np.concatenate(self.labels, axis=0)

    def flat_ids(self) -> np.ndarray:
        return np.concatenate(self.ids, axis=0)


@dataclass
class ForwardOutput:
    logits: Tensor  # (B, classes), group-major rows
    cls_embeddings: Tensor  # (B, dim), demuxed per slot
    pre_concat_tokens: list[Tensor]  # n x (g, L, dim)
    backbone_tokens: Tensor | None = None  # (g, S, dim) after the final norm
    codes: np.ndarray | None = None  # toy discrete codes (B, L) when computed


def _layers(params: Mapping[str, Tensor], prefix: str, count: int) -> list[EncoderLayerParams]:
    return [EncoderLayerParams.view(params, f"{prefix}.{i}") for i in range(count)]


def demux_params(params, n) -> DemuxParams:
    return DemuxParams([MLPParams.view(params, f"demux.{i}") for i in range(n)])


def _reducer_params(params, cfg) -> ReducerParams:
    return ReducerParams(params["reducer.weight"], params["reducer.bias"],
                         params.get("reducer.slot_embed") if cfg.slot_embeddings else None)


def _prepend_cls(tokens: Tensor, cls_token: Tensor) -> Tensor:
    cls = ad.embedding(cls_token, np.zeros((tokens.shape[0], 1), dtype=np.int64))
    return ad.concat([cls, tokens], axis=1)


def embed_images(state: ModelState, params: Mapping[str, Tensor], images: np.ndarray):
    """Patchify and run the per-image projection layers: (B, C, H, W) -> (B, L, dim).

    Returns ``(tokens, codes)``; ``codes`` are the toy discrete codes when the
    tokenizer is discrete, else ``None``.
    """
    cfg = state.config
    dtype = params["cls_token"].dtype
    codes = None
    if cfg.tokenizer == "toy-discrete":
        codes = toy_discrete_patchify(images, state.codebook, cfg.patch_size)
        tokens = ad.add(ad.embedding(params["patchify.embed"], codes), params["patchify.pos_embed"])
    else:
        pp = PatchifierParams(params["patchify.weight"], params["patchify.bias"],
                              params["patchify.pos_embed"], [])
        tokens = cnn_patchify(Tensor(np.asarray(images, dtype=dtype)), pp, cfg.patch_size)
    tokens = encoder_stack(tokens, _layers(params, "proj_layers", cfg.projection_layers), cfg.heads)
    return tokens, codes


def run_backbone(state: ModelState, params: Mapping[str, Tensor], groups: list[Tensor]) -> Tensor:
    """Fold slot groups into backbone sequences and run the shared layers.

    Returns the normalised backbone output; CLS is at token 0. For
    ``reduced-no-concat`` the sequences are stacked group-major on the batch
    axis instead of being concatenated.
    """
    cfg = state.config
    if cfg.variant == "concatplexer":
        seq = concat_multiplex(groups, _reducer_params(params, cfg))
    elif cfg.variant == "reduced-no-concat":
        r = _reducer_params(params, cfg)
        reduced = reduce_tokens(ad.concat(groups, axis=0), r)
        g = groups[0].shape[0]
        seq = ad.concat(
            [add_slot_embedding(ad.slice(reduced, 0, i * g, (i + 1) * g), r, i)
             for i in range(cfg.n_mux)], axis=0)
    elif cfg.variant == "image-multiplexer":
        proj = ProjectionSet(params["multiplexer.rotations"].data, state.seed,
                             [MLPParams.view(params, f"multiplexer.mlp.{i}") for i in range(cfg.n_mux)])
        seq = multiplex(groups, proj, rotations=params["multiplexer.rotations"])
    else:
        seq = groups[0]
    seq = _prepend_cls(seq, params["cls_token"])
    if "backbone.pos_embed" in params:
        seq = ad.add(seq, params["backbone.pos_embed"])
    seq = encoder_stack(seq, _layers(params, "backbone", cfg.backbone_layers), cfg.heads)
    return ad.layernorm(seq, params["norm.gain"], params["norm.bias"])


def demux_cls(state: ModelState, params: Mapping[str, Tensor], cls: Tensor) -> Tensor:
    """Per-slot representations stacked group-major: (g, dim) -> (n*g, dim).

    For ``reduced-no-concat`` ``cls`` is already (n*g, dim) and slot ``i``
    occupies rows ``[i g, (i+1) g)``.
    """
    cfg = state.config
    if cfg.variant == "vit":
        return cls
    demux = demux_params(params, cfg.n_mux)
    if cfg.variant == "reduced-no-concat":
        g = cls.shape[0] // cfg.n_mux
        parts = [demultiplex(ad.slice(cls, 0, i * g, (i + 1) * g), i, demux) for i in range(cfg.n_mux)]
    else:
        parts = [demultiplex(cls, i, demux) for i in range(cfg.n_mux)]
    return parts[0] if len(parts) == 1 else ad.concat(parts, axis=0)


def _split_groups(tokens: Tensor, n: int) -> list[Tensor]:
    g = tokens.shape[0] // n
    if n == 1:
        return [tokens]
    return [ad.slice(tokens, 0, i * g, (i + 1) * g) for i in range(n)]


def _check_batch(cfg: ModelConfig, batch: MuxBatch) -> None:
    if batch.n_mux != cfg.n_mux:
        raise ContractError(f"batch has {batch.n_mux} groups but the model multiplexes {cfg.n_mux}")
    sizes = {g.shape[0] for g in batch.groups}
    if len(sizes) != 1:
        raise ContractError(f"group sizes differ: {sorted(sizes)}")


def forward(state: ModelState, batch: MuxBatch, params: Mapping[str, Tensor] | None = None) -> ForwardOutput:
    """Logits for every image in ``batch``, rows ordered group-major.

    ``params`` defaults to constant tensors over ``state.params``; pass
    ``state.leaves()`` inside a :class:`~muxformer.autodiff.Tape` to train.
    """
    cfg = state.config
    _check_batch(cfg, batch)
    params = state.leaves(requires_grad=False) if params is None else params
    tokens, codes = embed_images(state, params, batch.flat_images())
    groups = _split_groups(tokens, cfg.n_mux)
    out = run_backbone(state, params, groups)
    cls = ad.slice(out, 1, 0, 1).reshape(out.shape[0], cfg.dim)
    emb = demux_cls(state, params, cls)
    logits = classifier_head(emb, params["head.weight"], params["head.bias"])
    return ForwardOutput(logits, emb, groups, out, codes)


def reduced_no_concat_forward(state: ModelState, batch: MuxBatch, params=None) -> Tensor:
    """Logits of the thicker-batch ablation (groups reduced but not concatenated)."""
    if state.config.variant != "reduced-no-concat":
        raise ConfigError(f"expected variant 'reduced-no-concat', got {state.config.variant!r}")
    return forward(state, batch, params).logits


def predict_logits(state: ModelState, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Logits for an arbitrary image array, padding the last group with zeros."""
    n = state.config.n_mux
    total = images.shape[0]
    step = max(n, batch_size - batch_size % n)
    out = []
    for start in range(0, total, step):
        chunk = images[start:start + step]
        pad = (-chunk.shape[0]) % n
        if pad:
            chunk = np.concatenate([chunk, np.zeros((pad,) + chunk.shape[1:], chunk.dtype)])
        g = chunk.shape[0] // n
        batch = MuxBatch([chunk[i * g:(i + 1) * g] for i in range(n)])
        logits = forward(state, batch).logits.data
        out.append(logits[: logits.shape[0] - pad])
    return np.concatenate(out, axis=0)


# --------------------------------------------------------------- checkpoint

MAGIC = b"MUXF"
VERSION = 1


class CheckpointError(Exception):
    """A checkpoint file is malformed or incompatible."""


def save_checkpoint(state: ModelState, path) -> None:
    """Little-endian: magic, u32 version, u32-length JSON header, then params sorted by key."""
    header = json.dumps({"config": state.config.to_dict(), "seed": state.seed},
                        sort_keys=True).encode("utf-8")
    chunks = [MAGIC, np.uint32(VERSION).tobytes(), np.uint32(len(header)).tobytes(), header,
              np.uint32(len(state.params)).tobytes()]
    for key in sorted(state.params):
        arr = np.ascontiguousarray(state.params[key], dtype="<f4")
        kb = key.encode("utf-8")
        chunks += [np.uint32(len(kb)).tobytes(), kb, np.uint32(arr.ndim).tobytes(),
                   np.asarray(arr.shape, dtype="<u4").tobytes(), arr.tobytes()]
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path, expected: ModelConfig | None = None) -> ModelState:
    with open(path, "rb") as fh:
        blob = fh.read()
    pos = 0

    def take(count: int) -> bytes:
        nonlocal pos
        if pos + count > len(blob):
            raise CheckpointError(f"{path}: truncated at byte {pos} (needed {count} more bytes)")
        chunk = blob[pos:pos + count]
        pos += count
        return chunk

    def u32() -> int:
        return int(np.frombuffer(take(4), dtype="<u4")[0])

    if take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a muxformer checkpoint")
    version = u32()
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(take(u32()).decode("utf-8"))
        cfg = ModelConfig.from_dict(header["config"]).validate()
        seed = int(header["seed"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: unreadable config header ({exc})") from exc
    if expected is not None and expected != cfg:
        raise CheckpointError(f"{path}: config {cfg} does not match expected {expected}")
    specs = param_specs(cfg)
    params = {}
    for _ in range(u32()):
        key = take(u32()).decode("utf-8")
        shape = tuple(int(s) for s in np.frombuffer(take(4 * u32()), dtype="<u4"))
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
        if key not in specs:
            raise CheckpointError(f"{path}: unexpected parameter {key!r} for this config")
        if shape != specs[key].shape:
            raise CheckpointError(
                f"{path}: parameter {key!r} has shape {shape}, config expects {specs[key].shape}"
            )
        params[key] = arr
    missing = set(specs) - set(params)
    if missing:
        raise CheckpointError(f"{path}: missing parameters {sorted(missing)[:5]}")
    if pos != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - pos} trailing bytes")
    return ModelState(cfg, seed, params, _codebook_for(cfg, seed))
