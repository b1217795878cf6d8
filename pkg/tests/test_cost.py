import numpy as np
import pytest

import oracles
from conftest import perturbed_weights
from vtn.cost import (PUBLISHED_TOTAL_PARAMS, RESNET34_BACKBONE_MACS, RESNET34_BACKBONE_PARAMS,
                      count_macs, count_params, reconcile)
from vtn.decoder import DecoderConfig, init_weights


def test_default_param_count_frozen():
    # frozen from brute-force enumeration of the default weight arrays
    assert count_params(DecoderConfig()).total == 7_557_520


def test_default_mac_count_frozen():
    # frozen from summing the closed-form terms; cross-checked below by counting
    total = count_macs(DecoderConfig()).total
    assert total == 121_765_888
    assert total / 1e9 == pytest.approx(0.122, abs=5e-4)


@pytest.mark.parametrize("extra", [{}, {"post_concat_proj": True, "d_v": 3}, {"input_dim": 12},
                                   {"d_ff": 5, "num_classes": 101}])
def test_params_equal_weight_element_count(extra):
    cfg = DecoderConfig(**{"d_model": 8, "num_heads": 2, "num_blocks": 3, "num_classes": 7, **extra})
    assert count_params(cfg).total == init_weights(cfg).num_elements()


@pytest.mark.parametrize("extra", [{}, {"post_concat_proj": True, "d_v": 3}, {"input_dim": 6},
                                   {"d_k": 3, "d_ff": 5}])
def test_macs_match_instrumented_multiply_count(extra):
    cfg = DecoderConfig(d_model=4, num_heads=2, num_blocks=2, seq_len=3, num_classes=3, **extra)
    w = perturbed_weights(cfg, 0)
    counter = oracles.MulCounter()
    oracles.classify(np.ones((3, cfg.input_dim)), w, counter)
    assert count_macs(cfg).total == counter.n


def test_num_classes_only_changes_classifier():
    a, b = count_params(DecoderConfig()), count_params(DecoderConfig(num_classes=101))
    for k in a.components:
        if k != "classifier":
            assert a[k] == b[k]
    assert b["classifier"] == 512 * 101 + 101


def test_encoder_reference_figures_match_enumeration():
    params, macs = oracles.resnet34_backbone_cost()
    assert params == RESNET34_BACKBONE_PARAMS
    assert macs == RESNET34_BACKBONE_MACS


def test_reconciliation_targets():
    r = reconcile(DecoderConfig(), encoder_params=21.28e6, encoder_macs=3.6e9)
    assert r["total_params"] / 1e6 == pytest.approx(28.84, abs=0.01)
    assert r["params_rel_err"] < 0.01
    assert r["gmac_rel_err"] < 0.05
    assert abs(RESNET34_BACKBONE_PARAMS + 7_557_520 - PUBLISHED_TOTAL_PARAMS) / PUBLISHED_TOTAL_PARAMS < 0.01


def test_totals_are_sums_of_components():
    for cfg in (DecoderConfig(), DecoderConfig(input_dim=1024, post_concat_proj=True)):
        for c in (count_params(cfg), count_macs(cfg)):
            assert c.total == sum(c.components.values())
