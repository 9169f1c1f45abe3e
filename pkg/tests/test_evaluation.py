import math

import numpy as np
import pytest

from edc.evaluation import (evaluate_dataset, oracle_predictor,
                            model_predictor, SUBSETS)
from edc.model import EdcModel, ModelConfig
from edc.scenesynth import synth_scene


@pytest.fixture(scope="module")
def samples():
    return [synth_scene(i, 32, 3, 2) for i in range(3)]


def test_oracle_is_perfect(samples):
    blocks = evaluate_dataset(samples, oracle_predictor(3), 3)
    for s in SUBSETS:
        b = blocks[s]
        assert b["miou"] == 1.0
        assert b["mpa"] == 1.0
        assert b["mse"] == 0.0 and b["mae"] == 0.0
        assert b["psnr"] == float("inf")
        assert abs(b["ssim"] - 1.0) < 1e-9
        assert b["ece"] == 0.0


def test_subset_pixel_counts_partition(samples):
    blocks = evaluate_dataset(samples, oracle_predictor(3), 3)
    n = {s: sum(r["count"] for r in blocks[s]["calibration_bins"])
         for s in SUBSETS}
    assert n["clear"] + n["cloudy"] == n["all"]
    total = sum(s.labels.size for s in samples)
    assert n["all"] == total


def test_clear_subset_ignores_cloudy_errors(samples):
    oracle = oracle_predictor(3)

    def corrupted(sample):
        probs, recon = oracle(sample)
        bad = sample.cloudmask == 1
        recon = recon.copy()
        recon[bad] = 0.0
        probs = probs.copy()
        # flip predictions under cloud to a wrong class
        probs[bad] = np.roll(probs[bad], 1, axis=-1)
        return probs, recon

    blocks = evaluate_dataset(samples, corrupted, 3)
    assert blocks["clear"]["miou"] == 1.0
    assert blocks["clear"]["mse"] == 0.0
    assert blocks["cloudy"]["miou"] < 1.0 or math.isnan(blocks["cloudy"]["miou"])


def test_model_predictor_contract(samples):
    cfg = ModelConfig(num_classes=3, sar_pols=2, widths=(4, 6, 8, 10),
                      window=2, heads=2, c_d=4)
    predict = model_predictor(EdcModel(cfg))
    probs, recon = predict(samples[0])
    assert probs.shape == (32, 32, 3)
    assert np.allclose(probs.sum(axis=-1), 1.0)
    assert recon.shape == (32, 32, 4)
    assert recon.min() >= 0.0 and recon.max() <= 1.0
    blocks = evaluate_dataset(samples[:1], predict, 3)
    for s in SUBSETS:
        assert 0.0 <= blocks[s]["ece"] <= 1.0 or math.isnan(blocks[s]["ece"])
