"""Gradient checks for each layer and for the full model on a tiny configuration."""
from __future__ import annotations

import numpy as np

from . import numeric as nx
from .layers import AttentionScorer, BdLstm, FusionLayer, LocalCnn, LstmCell
from .model import Forecaster, ModelConfig, SampleSource
from .training import loss

TOLERANCE = 1e-4


def tiny_config() -> ModelConfig:
    """S=3, one conv layer, d=4, q=1 and a single anchor per branch."""
    return ModelConfig(patch_size=3, conv_layers=1, filters=4, hidden=4, half_window=1,
                       hour_anchors=(22,), days=1, weeks=1)


def layer_checks(eps: float = 1e-3, seed: int = 0) -> dict[str, float]:
    """Max relative gradient error per layer and for the full model loss."""
    rng = np.random.default_rng(seed)
    results: dict[str, float] = {}

    cnn = LocalCnn(7, 2, 3, 4, rng, name="cnn")
    patch = rng.uniform(-1, 1, (2, 7, 7, 2))
    proj = np.random.default_rng(seed + 1)  # fixed output weights keep every element in play
    w = proj.uniform(-1, 1, (2, 4))
    results["local_cnn"] = nx.grad_check(lambda: nx.tsum(cnn(patch) * w), cnn.parameters(), eps)

    cell = LstmCell(3, 4, rng, "cell")
    x = rng.uniform(-1, 1, (2, 3))
    hc = rng.uniform(-1, 1, (2, 8))
    w = proj.uniform(-1, 1, (2, 8))
    results["lstm_cell"] = nx.grad_check(lambda: nx.tsum(cell.step(x, hc) * w), cell.parameters(), eps)

    bd = BdLstm(3, 4, rng, "bd")
    xs = rng.uniform(-1, 1, (2, 5, 3))
    valid = np.ones((2, 5), dtype=bool)
    valid[0, 2] = False
    w = proj.uniform(-1, 1, (2, 5, 8))
    results["bdlstm"] = nx.grad_check(lambda: nx.tsum(bd(xs, valid)[0] * w), bd.parameters(), eps)

    scorer = AttentionScorer(8, 8, 4, rng, "attn")
    cand = rng.uniform(-1, 1, (2, 5, 8))
    ctx = rng.uniform(-1, 1, (2, 8))
    w = proj.uniform(-1, 1, (2, 5))
    results["attention"] = nx.grad_check(lambda: nx.tsum(scorer(cand, ctx) * w), scorer.parameters(), eps)

    fusion = FusionLayer(6, 5, rng)
    xc = rng.uniform(-1, 1, (3, 6))
    ext = rng.uniform(0, 1, (3, 5))
    w = proj.uniform(-1, 1, (3, 2))
    results["fusion"] = nx.grad_check(lambda: nx.tsum(fusion(xc, ext) * w), fusion.parameters(), eps)

    results["full_model"] = full_model_check(eps, seed)
    return results


def full_model_check(eps: float = 1e-3, seed: int = 0, batch: int = 4) -> float:
    rng = np.random.default_rng(seed)
    cfg = tiny_config()
    n = cfg.lookback + 2 * cfg.intervals_per_day
    values = rng.uniform(-1.0, 1.0, (n, 3, 3, 2))
    valid = rng.random((n, 3, 3)) > 0.1
    external = rng.uniform(-1.0, 1.0, (n, cfg.external_size))
    source = SampleSource(values, valid, external, cfg)
    model = Forecaster(cfg, seed=seed + 1)
    b = source.build_batch(rng.integers(cfg.lookback, n - 1, batch),
                           rng.integers(0, 3, batch), rng.integers(0, 3, batch))
    target = rng.uniform(-1.0, 1.0, (batch, 2))
    return nx.grad_check(lambda: loss(model.forward_batch(b), target), model.parameters(), eps)
