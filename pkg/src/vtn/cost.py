"""Closed-form parameter and multiply-accumulate counts for the decoder.

MACs count only the multiply-accumulates of matrix products; bias additions,
the 1/sqrt(d_k) scaling, softmax and the frame mean are not counted.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .decoder import DecoderConfig

# Reference figures for a ResNet-34 frame encoder at 224x224 (convolutional
# backbone incl. batch norm, without the ImageNet classifier), and the
# published totals they are reconciled against.
RESNET34_BACKBONE_PARAMS = 21_284_672
RESNET34_BACKBONE_MACS = 3_663_249_408
PUBLISHED_TOTAL_PARAMS = 29.0e6
PUBLISHED_TOTAL_GMAC = 3.77
PUBLISHED_FPS = 56


@dataclass
class CostBreakdown:
    components: dict[str, int] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return sum(self.components.values())

    def __getitem__(self, key: str) -> int:
        return self.components[key]


def count_params(cfg: DecoderConfig) -> CostBreakdown:
    d, m = cfg.d_model, cfg.num_heads
    n = cfg.num_blocks
    comp = {}
    if cfg.has_input_proj:
        comp["input_projection"] = cfg.input_dim * d + d
    comp["attention_qkv"] = n * m * ((d * cfg.d_k + cfg.d_k) * 2 + d * cfg.d_v + cfg.d_v)
    if cfg.post_concat_proj:
        comp["post_concat_projection"] = n * (cfg.concat_dim * d + d)
    comp["feedforward"] = n * ((d * cfg.d_ff + cfg.d_ff) + (cfg.d_ff * d + d))
    comp["classifier"] = d * cfg.num_classes + cfg.num_classes
    return CostBreakdown(comp)


def count_macs(cfg: DecoderConfig, seq_len: int | None = None) -> CostBreakdown:
    t = cfg.seq_len if seq_len is None else seq_len
    d, m = cfg.d_model, cfg.num_heads
    n = cfg.num_blocks
    comp = {}
    if cfg.has_input_proj:
        comp["input_projection"] = t * cfg.input_dim * d
    comp["attention_qkv"] = n * t * m * d * (2 * cfg.d_k + cfg.d_v)
    comp["attention_scores"] = n * m * t * t * (cfg.d_k + cfg.d_v)
    if cfg.post_concat_proj:
        comp["post_concat_projection"] = n * t * cfg.concat_dim * d
    comp["feedforward"] = n * t * 2 * d * cfg.d_ff
    comp["classifier"] = t * d * cfg.num_classes
    return CostBreakdown(comp)


def reconcile(cfg: DecoderConfig, encoder_params: float = 0.0, encoder_macs: float = 0.0) -> dict:
    """Decoder-side counts plus externally supplied encoder figures.

    The encoder runs once per incoming frame in the online setting, so its MACs
    are added once (per frame), while the decoder is counted for a whole clip.
    """
    params = count_params(cfg).total
    macs = count_macs(cfg).total
    total_params = params + encoder_params
    total_macs = macs + encoder_macs
    return {
        "decoder_params": params,
        "decoder_macs": macs,
        "encoder_params": encoder_params,
        "encoder_macs": encoder_macs,
        "total_params": total_params,
        "total_macs": total_macs,
        "params_rel_err": abs(total_params - PUBLISHED_TOTAL_PARAMS) / PUBLISHED_TOTAL_PARAMS,
        "gmac_rel_err": abs(total_macs / 1e9 - PUBLISHED_TOTAL_GMAC) / PUBLISHED_TOTAL_GMAC,
    }
