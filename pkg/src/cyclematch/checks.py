"""Self-checks shared by the CLI and the test-suite."""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from . import autodiff as ad
from .encoder import EncoderConfig, init_params
from .losses import LossWeights, SinkhornConfig, sinkhorn_normalize, total_loss
from .synthetic import SyntheticCategoryConfig, sample_instances
from .trainer import TrainConfig, sample_triplet, triplet_terms


def loss_gradcheck(
    seed: int = 0,
    n_points: int = 32,
    iterations: int = 5,
    n_samples: int = 200,
    eps: float = 1e-5,
    weights: LossWeights = LossWeights(),
) -> dict:
    """Max relative gradient error of the full weighted loss on one random triplet.

    The graph covers the encoder, the three soft correspondences, cycle
    composition and the unrolled Sinkhorn projection. Returns the
    grad_check_report dictionary.
    """
    _, inst = sample_instances(SyntheticCategoryConfig(instances=4, points_per_shape=n_points, seed=seed))
    rng = np.random.default_rng([seed, 3])
    triplet = sample_triplet([i.cloud for i in inst], rng)
    enc = EncoderConfig(neighborhood_k=min(16, n_points), seed=seed)
    cfg = TrainConfig(weights=weights, sinkhorn=SinkhornConfig(0.3, iterations), encoder=enc)
    params = init_params(enc)
    # small random biases so that every bias path carries a non-trivial gradient
    for name, t in params.items():
        if name.endswith(".b"):
            t.data[...] = rng.normal(0.0, 0.05, t.shape)

    def fn():
        parts, _ = triplet_terms(params, triplet, cfg)
        return total_loss(parts, cfg.weights)

    return ad.grad_check_report(fn, params.values(), eps=eps, n_samples=n_samples, rng=np.random.default_rng([seed, 4]))


def sinkhorn_residuals(matrix, cfg: SinkhornConfig = SinkhornConfig()) -> tuple[float, float]:
    """Max |row sum - 1| and max |column sum - 1| after the truncated projection."""
    with ad.no_grad():
        out = sinkhorn_normalize(matrix, cfg).data
    return float(np.max(np.abs(out.sum(axis=1) - 1))), float(np.max(np.abs(out.sum(axis=0) - 1)))
