"""Soft correspondences, cycle composition, the loss terms and truncated Sinkhorn.

Correspondence matrices are row-stochastic: row k of a P->Q matrix is the
distribution over Q of the match for point k of P. Composition therefore
multiplies in path order, C_PQ @ C_QR.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor


@dataclass(frozen=True)
class SinkhornConfig:
    temperature: float = 0.3
    iterations: int = 30

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("Sinkhorn temperature must be positive")
        if self.iterations < 1:
            raise ValueError("Sinkhorn needs at least one iteration")


@dataclass(frozen=True)
class LossWeights:
    cycle: float = 1.0
    rigid: float = 1.0
    sinkhorn: float = 0.06

    def __post_init__(self):
        for name in ("cycle", "rigid", "sinkhorn"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"loss weight {name} must be finite and non-negative, got {v}")

    @classmethod
    def registration(cls) -> "LossWeights":
        """Fine-tuning weights that emphasise the rigid term."""
        return cls(0.0001, 1.0, 0.06)


def soft_correspondence(f_src, f_tgt, tau: float) -> Tensor:
    """Row-wise softmax of feature inner products scaled by 1/tau."""
    f_src, f_tgt = ad.as_tensor(f_src), ad.as_tensor(f_tgt)
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    if f_src.ndim != 2 or f_tgt.ndim != 2 or f_src.shape[1] != f_tgt.shape[1]:
        raise ShapeError(f"feature shapes {f_src.shape} and {f_tgt.shape} do not agree")
    if not (np.isfinite(f_src.data).all() and np.isfinite(f_tgt.data).all()):
        raise FloatingPointError("non-finite features")
    return ad.softmax(ad.matmul(f_src, ad.transpose(f_tgt)), axis=1, temperature=tau)


def compose_cycle(c1, c2, c3=None) -> Tensor:
    """Chain P->Q and Q->P' into P->P'; with c3 (P'->P) close the cycle on P."""
    c1, c2 = ad.as_tensor(c1), ad.as_tensor(c2)
    if c1.ndim != 2 or c2.ndim != 2 or c1.shape[1] != c2.shape[0]:
        raise ShapeError(f"cannot chain {c1.shape} with {c2.shape}")
    c12 = ad.matmul(c1, c2)
    if c3 is None:
        return c12
    c3 = ad.as_tensor(c3)
    if c3.ndim != 2 or c12.shape[1] != c3.shape[0]:
        raise ShapeError(f"cannot chain {c12.shape} with {c3.shape}")
    return ad.matmul(c12, c3)


def _distance_weighted_mass(dist, corr, name):
    dist, corr = ad.as_tensor(dist), ad.as_tensor(corr)
    if dist.shape != corr.shape or dist.ndim != 2:
        raise ShapeError(f"{name}: distance {dist.shape} and correspondence {corr.shape} must match")
    # both factors are non-negative so the L1 norm is a plain sum
    return ad.sum_(ad.mul(dist, corr))


def cycle_loss(dist, c12) -> Tensor:
    return _distance_weighted_mass(dist, c12, "cycle_loss")


def rigid_loss(dist, c3) -> Tensor:
    return _distance_weighted_mass(dist, c3, "rigid_loss")


def sinkhorn_normalize(c, cfg: SinkhornConfig = SinkhornConfig()) -> Tensor:
    """Truncated Sinkhorn on exp(c / t): `iterations` (column, row) normalisation passes.

    The last pass is a row pass, so rows sum to one to round-off. The
    iterations are ordinary graph ops, so gradients flow through the unrolled loop.
    """
    c = ad.as_tensor(c)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ShapeError(f"sinkhorn_normalize needs a square matrix, got {c.shape}")
    if not np.isfinite(c.data).all():
        raise FloatingPointError("sinkhorn_normalize: non-finite input")
    z = ad.scale(c, 1.0 / cfg.temperature)
    # per-row shift cancels in the first row normalisation; kept out of the graph
    shift = np.max(z.data, axis=1, keepdims=True)
    x = ad.exp(ad.sub(z, Tensor(np.broadcast_to(shift, z.shape))))
    x = ad.normalize(x, axis=1)
    for _ in range(cfg.iterations):
        x = ad.normalize(x, axis=0)
        x = ad.normalize(x, axis=1)
    return x


def sinkhorn_loss(c12, cfg: SinkhornConfig = SinkhornConfig(), stop_gradient: bool = False) -> Tensor:
    """L1 distance between c12 and its truncated Sinkhorn projection."""
    c12 = ad.as_tensor(c12)
    projected = sinkhorn_normalize(c12.detach() if stop_gradient else c12, cfg)
    return ad.sum_(ad.abs_(ad.sub(c12, projected)))


def total_loss(parts: dict, w: LossWeights = LossWeights()):
    """Weighted sum of the cycle, rigid and Sinkhorn terms.

    `parts` maps "L_C", "L_R", "L_S" to Tensors or floats; the result has
    the same kind.
    """
    terms = [(w.cycle, parts["L_C"]), (w.rigid, parts["L_R"]), (w.sinkhorn, parts["L_S"])]
    if any(isinstance(v, Tensor) for _, v in terms):
        out = None
        for weight, v in terms:
            t = ad.scale(ad.as_tensor(v), weight)
            out = t if out is None else ad.add(out, t)
        return out
    vals = [float(v) for _, v in terms]
    if not all(np.isfinite(vals)):
        raise FloatingPointError("total_loss: non-finite part")
    return w.cycle * vals[0] + w.rigid * vals[1] + w.sinkhorn * vals[2]


def hard_correspondence(c) -> np.ndarray:
    """Row-wise argmax; ties resolve to the lower index."""
    c = c.data if isinstance(c, Tensor) else np.asarray(c)
    return np.argmax(c, axis=1)


def count_collisions(matches) -> int:
    """Number of sources that share a target with a lower-indexed source."""
    matches = np.asarray(matches)
    return int(matches.size - np.unique(matches).size)
