"""Video Transformer Network decoder runtime."""

from .cost import CostBreakdown, count_macs, count_params
from .decoder import (VTN, BlockWeights, DecoderConfig, DecoderWeights, HeadWeights,
                      attention_head, classify_clip, decoder_backward, decoder_block,
                      decoder_forward, forward_with_cache, init_weights,
                      multi_head_self_attention, pointwise_feedforward, zero_weights)
from .errors import VTNError

__all__ = [
    "VTN", "BlockWeights", "CostBreakdown", "DecoderConfig", "DecoderWeights", "HeadWeights",
    "VTNError", "attention_head", "classify_clip", "count_macs", "count_params",
    "decoder_backward", "decoder_block", "decoder_forward", "forward_with_cache",
    "init_weights", "multi_head_self_attention", "pointwise_feedforward", "zero_weights",
]
