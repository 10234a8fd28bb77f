"""Analytic per-image FLOPs for any :class:`ModelConfig`.

One multiply-accumulate counts as one FLOP. Counted: qkv/output/MLP
projections, the two attention products (QK^T and AV), the patchify conv,
the reducer conv or orthogonal multiplexer, demux MLPs and the classifier
head. Softmax, normalisation, activations and bias additions are ignored.
Work done on a shared backbone sequence is split evenly over its ``n_mux``
images.
"""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field

from .models import ModelConfig, param_specs

STAGES = ("patchify", "projection_layers", "reducer", "backbone_layers", "demux", "head")


@dataclass
class FlopsReport:
    patchify: float
    projection_layers: float
    reducer: float
    backbone_layers: float
    demux: float
    head: float
    params: int
    config: dict = field(default_factory=dict)

    @property
    def total(self) -> float:
        return sum(getattr(self, s) for s in STAGES)

    @property
    def gflops(self) -> float:
        return self.total / 1e9

    def stages(self) -> dict[str, float]:
        return {s: getattr(self, s) for s in STAGES}

    def as_text(self, name: str = "") -> str:
        total = self.total
        lines = [f"{name or self.config.get('variant', 'model')}: {total / 1e9:.3f} GFLOPs per image, "
                 f"{self.params / 1e6:.2f} M params"]
        for stage, value in self.stages().items():
            share = value / total if total else 0.0
            lines.append(f"  {stage:<18} {value / 1e9:10.4f} G  {100 * share:6.2f}%")
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["stage", "flops", "share"])
        total = self.total
        for stage, value in self.stages().items():
            writer.writerow([stage, repr(float(value)), repr(value / total if total else 0.0)])
        writer.writerow(["total", repr(float(total)), "1.0"])
        return buf.getvalue()


def encoder_layer_macs(length: int, dim: int, mlp_ratio: int = 4) -> int:
    """MACs of one pre-norm encoder layer over a single sequence."""
    linear = (3 + 1 + 2 * mlp_ratio) * length * dim * dim
    attention = 2 * length * length * dim
    return linear + attention


def flops_per_image(cfg: ModelConfig) -> FlopsReport:
    cfg.validate()
    d, n, length = cfg.dim, cfg.n_mux, cfg.tokens_per_image
    patch_dim = cfg.channels * cfg.patch_size ** 2
    if cfg.tokenizer == "toy-discrete":
        patchify = length * cfg.codebook_size * patch_dim  # nearest-code search
    else:
        patchify = length * patch_dim * d
    projection = cfg.projection_layers * encoder_layer_macs(length, d, cfg.mlp_ratio)

    if cfg.variant in ("concatplexer", "reduced-no-concat"):
        reducer = (length // n) * n * d * d
    elif cfg.variant == "image-multiplexer":
        reducer = length * d * d + 2 * length * d * d  # rotation + residual MLP (hidden = dim)
    else:
        reducer = 0

    seq_layer = encoder_layer_macs(cfg.backbone_length, d, cfg.mlp_ratio)
    if cfg.variant == "reduced-no-concat":
        backbone = cfg.backbone_layers * seq_layer
    else:
        backbone = cfg.backbone_layers * seq_layer / n

    demux = 0 if cfg.variant == "vit" else 2 * d * cfg.demux_hidden
    head = d * cfg.num_classes
    params = sum(
        _prod(s.shape) for s in param_specs(cfg).values() if s.trainable
    )
    return FlopsReport(
        patchify=float(patchify),
        projection_layers=float(projection),
        reducer=float(reducer),
        backbone_layers=float(backbone),
        demux=float(demux),
        head=float(head),
        params=int(params),
        config=cfg.to_dict(),
    )


def _prod(shape) -> int:
    out = 1
    for s in shape:
        out *= s
    return out


def compare_flops(a: ModelConfig, b: ModelConfig) -> dict:
    """Savings of ``a`` relative to ``b``: ``100 * (1 - flops(a) / flops(b))``."""
    ra, rb = flops_per_image(a), flops_per_image(b)
    ratio = ra.total / rb.total
    return {
        "ratio": ratio,
        "percent_savings": 100.0 * (1.0 - ratio),
        "stage_deltas": {s: getattr(ra, s) - getattr(rb, s) for s in STAGES},
        "a": ra,
        "b": rb,
    }


def report_dict(report: FlopsReport) -> dict:
    out = asdict(report)
    out["total"] = report.total
    return out
