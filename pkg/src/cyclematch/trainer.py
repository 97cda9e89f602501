"""Triplet sampling, the training step, CC% evaluation and the training loop."""

from __future__ import annotations

import json
import logging
import tempfile
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .dataset import ShapeDataset
from .encoder import EncoderConfig, EncoderParams, featurize, encode, init_params, is_bias
from .geometry import AugmentConfig, PointCloud, apply_transform, pairwise_distance_matrix, sample_rigid_transform
from .io import ensure_dir, write_text_cloud
from .losses import (
    LossWeights,
    SinkhornConfig,
    compose_cycle,
    count_collisions,
    cycle_loss,
    hard_correspondence,
    rigid_loss,
    sinkhorn_loss,
    soft_correspondence,
    total_loss,
)
from .optim import AdamState, adam_update

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 5000
    batch: int = 4
    lr_bias: float = 0.0001
    lr_rest: float = 0.0005
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    amsgrad: bool = True
    weights: LossWeights = LossWeights()
    sinkhorn: SinkhornConfig = SinkhornConfig()
    stop_grad_sinkhorn: bool = False
    tau: float = 0.07
    aug: AugmentConfig = AugmentConfig()
    points_per_shape: int = 256
    rng_seed: int = 0
    encoder: EncoderConfig = EncoderConfig()
    eval_every: int = 250
    eval_pairs: int = 16
    cc_radius: float = 0.05
    checkpoint_every: int = 1000
    val_fraction: float = 0.1

    def __post_init__(self):
        if not (self.lr_bias >= 0 and self.lr_rest >= 0):
            raise ValueError("learning rates must be non-negative")
        if self.steps < 1 or self.batch < 1:
            raise ValueError("steps and batch must be at least 1")
        if not self.tau > 0:
            raise ValueError("tau must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder"] = self.encoder.to_dict()
        for k in ("rotation_deg", "translation", "scale"):
            d["aug"][k] = list(d["aug"][k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["weights"] = LossWeights(**d["weights"])
        d["sinkhorn"] = SinkhornConfig(**d["sinkhorn"])
        d["aug"] = AugmentConfig(**{k: tuple(v) for k, v in d["aug"].items()})
        d["encoder"] = EncoderConfig.from_dict(d["encoder"])
        return cls(**d)


@dataclass
class Triplet:
    """Source P, its rigid transform P2 (same point order) and target Q."""

    P: PointCloud
    P2: PointCloud
    Q: PointCloud


def sample_triplet(shapes, rng: np.random.Generator, aug: AugmentConfig = AugmentConfig()) -> Triplet:
    """Draw two distinct shapes; perturb the source twice and the target once."""
    shapes = list(shapes)
    if len(shapes) < 2:
        raise ValueError("need at least two shapes to sample a triplet")
    i, j = rng.choice(len(shapes), size=2, replace=False)
    src, tgt = shapes[i], shapes[j]
    P = apply_transform(src, sample_rigid_transform(rng, aug))
    P2 = apply_transform(src, sample_rigid_transform(rng, aug))
    Q = apply_transform(tgt, sample_rigid_transform(rng, aug))
    return Triplet(P, P2, Q)


def triplet_terms(params: EncoderParams, t: Triplet, cfg: TrainConfig):
    """Loss parts (Tensors) and the correspondence matrices of one triplet."""
    fp, fp2, fq = encode(params, t.P), encode(params, t.P2), encode(params, t.Q)
    c1 = soft_correspondence(fp, fq, cfg.tau)
    c2 = soft_correspondence(fq, fp2, cfg.tau)
    c3 = soft_correspondence(fp2, fp, cfg.tau)
    c12 = compose_cycle(c1, c2)
    dist = pairwise_distance_matrix(t.P)
    parts = {"L_C": cycle_loss(dist, c12), "L_R": rigid_loss(dist, c3)}
    if cfg.weights.sinkhorn > 0:
        parts["L_S"] = sinkhorn_loss(c12, cfg.sinkhorn, stop_gradient=cfg.stop_grad_sinkhorn)
    else:
        with ad.no_grad():
            parts["L_S"] = sinkhorn_loss(c12.detach(), cfg.sinkhorn)
    return parts, {"C1": c1, "C2": c2, "C3": c3, "C12": c12}


def batch_loss(params: EncoderParams, triplets, cfg: TrainConfig):
    """Mean weighted loss over the batch and the mean unweighted parts."""
    total, sums = None, {"L_C": 0.0, "L_R": 0.0, "L_S": 0.0}
    for t in triplets:
        parts, _ = triplet_terms(params, t, cfg)
        loss = total_loss(parts, cfg.weights)
        total = loss if total is None else ad.add(total, loss)
        for k in sums:
            sums[k] += float(parts[k].data)
    total = ad.scale(total, 1.0 / len(triplets))
    return total, {k: v / len(triplets) for k, v in sums.items()}


def lr_for(cfg: TrainConfig):
    return lambda name: cfg.lr_bias if is_bias(name) else cfg.lr_rest


def _dump_triplets(triplets, reason):
    dump = Path(tempfile.mkdtemp(prefix="cyclematch_nonfinite_"))
    for b, t in enumerate(triplets):
        for tag in ("P", "P2", "Q"):
            write_text_cloud(getattr(t, tag), dump / f"triplet{b}_{tag}.xyz")
    (dump / "reason.txt").write_text(reason + "\n")
    return dump


def train_step(params: EncoderParams, opt_state: AdamState, triplets, cfg: TrainConfig):
    """One AMSGrad step on the batch; params and opt_state are updated in place."""
    if isinstance(triplets, Triplet):
        triplets = [triplets]
    for p in params.values():
        p.grad = None
    loss, parts = batch_loss(params, triplets, cfg)
    value = float(loss.data)
    if not np.isfinite(value) or not all(np.isfinite(v) for v in parts.values()):
        dump = _dump_triplets(triplets, f"loss={value} parts={parts}")
        raise FloatingPointError(f"non-finite training loss; offending triplets written to {dump}")
    loss.backward()
    arrays = {k: t.data for k, t in params.items()}
    grads = {k: (np.zeros_like(t.data) if t.grad is None else t.grad) for k, t in params.items()}
    adam_update(arrays, grads, opt_state, lr_for(cfg), (cfg.beta1, cfg.beta2), cfg.adam_eps, cfg.amsgrad)
    return params, opt_state, {"L": value, **parts}


# ----------------------------------------------------------------------------
# evaluation


def make_eval_triplets(shapes, n: int, seed: int, aug: AugmentConfig = AugmentConfig()):
    rng = np.random.default_rng([seed, 2])
    return [sample_triplet(shapes, rng, aug) for _ in range(n)]


def _cycle_matrices(model, t: Triplet, tau: float):
    fp, fp2, fq = featurize(model, t.P), featurize(model, t.P2), featurize(model, t.Q)
    with ad.no_grad():
        c1 = soft_correspondence(fp, fq, tau)
        c2 = soft_correspondence(fq, fp2, tau)
        c3 = soft_correspondence(fp2, fp, tau)
        c12 = compose_cycle(c1, c2)
        return c12.data, compose_cycle(c12, c3).data


def _require_truth(t: Triplet):
    if t.P.ids is None or t.P2.ids is None or not np.array_equal(t.P.ids, t.P2.ids):
        raise ValueError("CC% needs ground truth: P and P2 must carry identical ids")


def cc_percent(model, triplets, tau: float, radius: float | None = 0.05) -> dict:
    """Percentage of points whose cycle P -> Q -> P2 -> P returns home.

    `model` is EncoderParams or a callable mapping a cloud to features.
    Strict mode needs the exact index; relaxed mode accepts any point within
    `radius` of the origin in P's coordinates.
    """
    triplets = [triplets] if isinstance(triplets, Triplet) else list(triplets)
    strict, relaxed, collisions = [], [], []
    for t in triplets:
        _require_truth(t)
        c12, cyc = _cycle_matrices(model, t, tau)
        back = hard_correspondence(cyc)
        n = len(back)
        strict.append(100.0 * np.count_nonzero(back == np.arange(n)) / n)
        if radius is not None:
            d = np.linalg.norm(t.P.points[back] - t.P.points, axis=1)
            relaxed.append(100.0 * np.count_nonzero(d < radius) / n)
        collisions.append(count_collisions(hard_correspondence(c12)))
    out = {"cc_strict": float(np.mean(strict)), "collisions": float(np.mean(collisions))}
    out["cc_relaxed"] = float(np.mean(relaxed)) if relaxed else None
    return out


# ----------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    params: EncoderParams
    opt_state: AdamState
    step: int
    rows: list = field(default_factory=list)
    checkpoint: Path | None = None


def _json_row(row: dict) -> str:
    return json.dumps(row, sort_keys=False)


def train(dataset: ShapeDataset, cfg: TrainConfig, out_dir=None, resume=None, progress=None, init_from=None) -> TrainResult:
    """Run `cfg.steps` steps, logging JSON lines and writing checkpoints to `out_dir`.

    With `resume`, training continues from the checkpoint's step, parameters,
    optimiser moments and RNG state, so the loss sequence matches an
    uninterrupted run. With `init_from`, only the checkpoint's parameters are
    taken and a new run starts at step 0 (fine-tuning with other weights).
    """
    from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint

    data = dataset.resample(cfg.points_per_shape)
    train_idx, val_idx = data.split(cfg.val_fraction, cfg.rng_seed)
    train_shapes = [data.clouds[i] for i in train_idx]
    val_shapes = [data.clouds[i] for i in val_idx]
    eval_triplets = make_eval_triplets(val_shapes, cfg.eval_pairs, cfg.rng_seed, cfg.aug) if len(val_shapes) >= 2 else []

    rng = np.random.default_rng([cfg.rng_seed, 1])
    if resume is not None and init_from is not None:
        raise ValueError("resume and init_from are mutually exclusive")
    if resume is not None:
        ck = load_checkpoint(resume, expected=cfg.encoder)
        params, opt_state, start = ck.params, ck.opt_state, ck.step
        rng.bit_generator.state = ck.rng_state
    else:
        params = load_checkpoint(init_from, expected=cfg.encoder).params if init_from is not None else init_params(cfg.encoder)
        opt_state = AdamState.zeros_like({k: t.data for k, t in params.items()})
        start = 0

    out = ensure_dir(out_dir) if out_dir is not None else None
    log_path = out / "metrics.jsonl" if out else None
    ck_path = out / "checkpoint.ckpt" if out else None
    if log_path is not None and resume is None:
        log_path.write_text("")

    def snapshot(step):
        return Checkpoint(cfg.encoder, params, opt_state, step, rng.bit_generator.state, cfg.to_dict())

    rows = []
    for step in range(start + 1, cfg.steps + 1):
        batch = [sample_triplet(train_shapes, rng, cfg.aug) for _ in range(cfg.batch)]
        _, _, report = train_step(params, opt_state, batch, cfg)
        row = {"step": step, **report, "cc_strict": None, "cc_relaxed": None}
        if eval_triplets and (step % cfg.eval_every == 0 or step == cfg.steps):
            cc = cc_percent(params, eval_triplets, cfg.tau, cfg.cc_radius)
            row.update(cc_strict=cc["cc_strict"], cc_relaxed=cc["cc_relaxed"], collisions=cc["collisions"])
        rows.append(row)
        if log_path is not None:
            with open(log_path, "a") as fh:
                fh.write(_json_row(row) + "\n")
        if progress is not None:
            progress(row)
        if ck_path is not None and (step % cfg.checkpoint_every == 0 or step == cfg.steps):
            try:
                save_checkpoint(snapshot(step), ck_path)
                if step % cfg.checkpoint_every == 0 and step != cfg.steps:
                    save_checkpoint(snapshot(step), out / f"checkpoint_{step:06d}.ckpt")
            except OSError as exc:
                raise OSError(f"failed to write checkpoint {ck_path}: {exc}") from exc
    return TrainResult(params, opt_state, cfg.steps, rows, ck_path)


def with_updates(cfg: TrainConfig, **kw) -> TrainConfig:
    return replace(cfg, **kw)
