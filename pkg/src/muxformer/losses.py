"""Training objectives: classification, mixed-slot smoothing, teacher contrastive, token retrieval."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .models import ModelState, demux_params, run_backbone
from .nn import classifier_head, linear
from .plexing import demultiplex, toy_discrete_patchify


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 1.0
    temperature: float = 0.07
    lambda_ce: float = 1.0
    lambda_smooth: float = 0.0
    lambda_clip: float = 0.0
    lambda_retrieval: float = 0.0

    def validate(self, n_mux: int = 1) -> "LossConfig":
        if not 1.0 / n_mux - 1e-12 <= self.alpha <= 1.0:
            raise ContractError(f"alpha must lie in [1/{n_mux}, 1], got {self.alpha}")
        if self.temperature <= 0:
            raise ContractError(f"temperature must be positive, got {self.temperature}")
        for name in ("lambda_ce", "lambda_smooth", "lambda_clip", "lambda_retrieval"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be >= 0")
        return self

    @classmethod
    def from_dict(cls, data: Mapping) -> "LossConfig":
        return cls(**dict(data))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _one_hot(labels: np.ndarray, k: int, dtype) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ContractError(f"class index out of range [0, {k})")
    out = np.zeros((labels.size, k), dtype=dtype)
    out[np.arange(labels.size), labels.reshape(-1)] = 1
    return out


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean over rows of ``-sum(target * log_softmax(logits))``.

    ``targets`` is either integer class indices (b,) or a distribution (b, K)
    whose rows sum to one.
    """
    targets = np.asarray(targets)
    k = logits.shape[-1]
    if np.issubdtype(targets.dtype, np.integer):
        dist = _one_hot(targets, k, logits.dtype)
    else:
        dist = targets.astype(logits.dtype)
        if dist.shape != logits.shape:
            raise ContractError(f"soft targets {dist.shape} do not match logits {logits.shape}")
        if not np.allclose(dist.sum(axis=-1), 1.0, atol=1e-5):
            raise ContractError("soft target rows must sum to 1 within 1e-5")
    logits2 = logits.reshape(-1, k)
    nll = ad.mul(ad.log_softmax(logits2), Tensor(dist.reshape(-1, k)))
    return ad.scale(ad.sum(nll), -1.0 / logits2.shape[0])


def mixed_targets(labels: list[np.ndarray], alpha: float, num_classes: int, slot: int, dtype=np.float32):
    """alpha on slot ``slot``'s class, (1 - alpha)/(n - 1) on each other slot's class."""
    n = len(labels)
    out = alpha * _one_hot(labels[slot], num_classes, np.float64)
    if n > 1:
        w = (1.0 - alpha) / (n - 1)
        for m in range(n):
            if m != slot:
                out += w * _one_hot(labels[m], num_classes, np.float64)
    return out.astype(dtype)


def mix_smooth_loss(pre_concat_tokens: list[Tensor], labels: list[np.ndarray], alpha: float,
                    m: ModelState, params: Mapping[str, Tensor]) -> Tensor:
    """Cross-entropy of mixed-token inputs against equally mixed labels, averaged over slots.

    For slot i the group tokens are replaced by ``alpha T_i + sum_{n != i}
    (1 - alpha)/(N - 1) T_n`` while other slots keep their own tokens; the
    result goes through the backbone, demux head i and classifier. All N
    variants run as one stacked backbone pass.
    """
    n = len(pre_concat_tokens)
    if not 1.0 / n - 1e-12 <= alpha <= 1.0:
        raise ContractError(f"alpha must lie in [1/{n}, 1], got {alpha}")
    cfg = m.config
    g = pre_concat_tokens[0].shape[0]
    other = (1.0 - alpha) / (n - 1) if n > 1 else 0.0
    mixes = []
    for i in range(n):
        mix = ad.scale(pre_concat_tokens[i], alpha)
        for j in range(n):
            if j != i and other:
                mix = ad.add(mix, ad.scale(pre_concat_tokens[j], other))
        mixes.append(mix)
    # variant i uses the mix in slot i, originals elsewhere; stacked on the batch axis
    stacked = [ad.concat([mixes[i] if i == s else pre_concat_tokens[s] for i in range(n)], axis=0)
               if n > 1 else mixes[0] for s in range(n)]
    out = run_backbone(m, params, stacked)
    cls = ad.slice(out, 1, 0, 1).reshape(out.shape[0], cfg.dim)
    total = None
    for i in range(n):
        if cfg.variant == "reduced-no-concat":
            # rows are slot-major blocks of size n*g; slot i of variant i
            rows = ad.slice(cls, 0, i * n * g + i * g, i * n * g + (i + 1) * g)
        else:
            rows = ad.slice(cls, 0, i * g, (i + 1) * g)
        if cfg.variant == "vit":
            emb = rows
        else:
            emb = demultiplex(rows, i, demux_params(params, n))
        logits = classifier_head(emb, params["head.weight"], params["head.bias"])
        ce = cross_entropy(logits, mixed_targets(labels, alpha, cfg.num_classes, i, logits.dtype))
        total = ce if total is None else ad.add(total, ce)
    return ad.scale(total, 1.0 / n)


def contrastive_teacher_loss(cls: Tensor, teacher: Tensor, proj: Tensor, temperature: float) -> Tensor:
    """Symmetric InfoNCE between projected embeddings and teacher vectors.

    Similarities are cosine / temperature; row ``k`` of ``cls`` and row ``k``
    of ``teacher`` are the positive pair.
    """
    b = cls.shape[0]
    if b < 2:
        raise ContractError("contrastive loss needs a batch of at least 2")
    if temperature <= 0:
        raise ContractError(f"temperature must be positive, got {temperature}")
    if teacher.shape[0] != b:
        raise ContractError(f"teacher batch {teacher.shape[0]} != embedding batch {b}")
    z = ad.l2_normalize(linear(cls, proj))
    t = ad.l2_normalize(teacher)
    sim = ad.scale(ad.matmul(z, t.transpose(1, 0)), 1.0 / temperature)
    idx = np.arange(b)
    rows = cross_entropy(sim, idx)
    cols = cross_entropy(sim.transpose(1, 0), idx)
    return ad.scale(ad.add(rows, cols), 0.5)


def token_retrieval_loss(demuxed_tokens: Tensor, discrete_targets, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Mean cross-entropy of a shared code classifier over every token position."""
    targets = np.asarray(discrete_targets)
    k = weight.shape[1]
    if targets.size and (targets.min() < 0 or targets.max() >= k):
        raise ContractError(f"discrete target out of range [0, {k})")
    if targets.shape != demuxed_tokens.shape[:-1]:
        raise ContractError(f"targets {targets.shape} do not match tokens {demuxed_tokens.shape}")
    logits = linear(demuxed_tokens, weight, bias)
    return cross_entropy(logits.reshape(-1, k), targets.reshape(-1))


def retrieval_loss_for_batch(m: ModelState, params: Mapping[str, Tensor], out, images: np.ndarray) -> Tensor:
    """Token retrieval for the image multiplexer: demux every backbone token per slot."""
    cfg = m.config
    codes = out.codes
    if codes is None:
        codes = toy_discrete_patchify(images, m.codebook, cfg.patch_size)
    tokens = out.backbone_tokens  # (g, L+1, dim)
    g, s, d = tokens.shape
    body = ad.slice(tokens, 1, 1, s)
    demux = demux_params(params, cfg.n_mux)
    per_slot = [demultiplex(body, i, demux) for i in range(cfg.n_mux)]
    stacked = per_slot[0] if cfg.n_mux == 1 else ad.concat(per_slot, axis=0)
    return token_retrieval_loss(stacked, codes, params["retrieval.weight"], params["retrieval.bias"])


# -------------------------------------------------------- teacher embeddings

TEACHER_MAGIC = b"MUXT"
TEACHER_VERSION = 1


class TeacherFileError(Exception):
    pass


@dataclass
class TeacherEmbeddings:
    vectors: dict[int, np.ndarray]
    dim: int
    source: str | None = None

    def lookup(self, ids) -> np.ndarray:
        try:
            return np.stack([self.vectors[int(i)] for i in np.asarray(ids).reshape(-1)])
        except KeyError as exc:
            raise ContractError(f"no teacher embedding for image id {exc.args[0]}") from None


def random_teacher(ids, dim: int, seed: int) -> TeacherEmbeddings:
    """Seeded unit vectors standing in for an external encoder's features."""
    ids = np.asarray(ids, dtype=np.int64).reshape(-1)
    rng = np.random.default_rng(seed)
    vecs = rng.standard_normal((ids.size, dim))
    vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
    return TeacherEmbeddings({int(i): v.astype(np.float32) for i, v in zip(ids, vecs)}, dim)


def save_teacher(t: TeacherEmbeddings, path) -> None:
    """magic, u32 version, u64 count, u32 dim, then (u64 id, dim x f32) rows; little-endian."""
    ids = sorted(t.vectors)
    rows = [np.uint64(i).tobytes() + np.asarray(t.vectors[i], dtype="<f4").tobytes() for i in ids]
    header = TEACHER_MAGIC + np.uint32(TEACHER_VERSION).tobytes() + np.uint64(len(ids)).tobytes() \
        + np.uint32(t.dim).tobytes()
    Path(path).write_bytes(header + b"".join(rows))


def load_teacher(path) -> TeacherEmbeddings:
    blob = Path(path).read_bytes()
    if len(blob) < 20 or blob[:4] != TEACHER_MAGIC:
        raise TeacherFileError(f"{path}: not a teacher embedding file")
    version = int(np.frombuffer(blob[4:8], "<u4")[0])
    if version != TEACHER_VERSION:
        raise TeacherFileError(f"{path}: unsupported version {version}")
    count = int(np.frombuffer(blob[8:16], "<u8")[0])
    dim = int(np.frombuffer(blob[16:20], "<u4")[0])
    row = 8 + 4 * dim
    if len(blob) != 20 + count * row:
        raise TeacherFileError(f"{path}: expected {20 + count * row} bytes, found {len(blob)}")
    vectors = {}
    for k in range(count):
        off = 20 + k * row
        vid = int(np.frombuffer(blob[off:off + 8], "<u8")[0])
        vec = np.frombuffer(blob[off + 8:off + row], "<f4").astype(np.float32)
        if abs(float(np.linalg.norm(vec)) - 1.0) > 1e-4:
            raise TeacherFileError(f"{path}: vector for id {vid} is not unit-norm")
        vectors[vid] = vec
    return TeacherEmbeddings(vectors, dim, str(path))


# ------------------------------------------------------------------- totals


def total_loss(m: ModelState, params: Mapping[str, Tensor], batch, out, cfg: LossConfig,
               teacher: TeacherEmbeddings | None = None) -> tuple[Tensor, dict[str, Tensor]]:
    """Lambda-weighted sum of the enabled terms; terms with zero weight are never built."""
    terms: dict[str, Tensor] = {}
    labels = batch.flat_labels()
    if cfg.lambda_ce:
        terms["ce"] = cross_entropy(out.logits, labels)
    if cfg.lambda_smooth:
        terms["smooth"] = mix_smooth_loss(out.pre_concat_tokens, batch.labels, cfg.alpha, m, params)
    if cfg.lambda_clip:
        if teacher is None or "teacher_proj.weight" not in params:
            raise ContractError("lambda_clip > 0 needs teacher embeddings and teacher_dim > 0")
        tvec = Tensor(teacher.lookup(batch.flat_ids()).astype(out.cls_embeddings.dtype))
        terms["clip"] = contrastive_teacher_loss(out.cls_embeddings, tvec,
                                                 params["teacher_proj.weight"], cfg.temperature)
    if cfg.lambda_retrieval:
        if m.config.variant != "image-multiplexer":
            raise ContractError("token retrieval loss is only defined for the image multiplexer")
        terms["retrieval"] = retrieval_loss_for_batch(m, params, out, batch.flat_images())
    weights = {"ce": cfg.lambda_ce, "smooth": cfg.lambda_smooth,
               "clip": cfg.lambda_clip, "retrieval": cfg.lambda_retrieval}
    total = None
    for name, term in terms.items():
        w = ad.scale(term, weights[name])
        total = w if total is None else ad.add(total, w)
    if total is None:
        raise ContractError("every loss weight is zero")
    return total, terms
