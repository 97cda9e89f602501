"""Pointwise feature network: kNN set-abstraction stages with self-attention."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import PointCloud, knn_indices


@dataclass(frozen=True)
class EncoderConfig:
    use_normals: bool = True
    neighborhood_k: int = 16
    lift_width: int = 32
    stage_widths: tuple[tuple[int, ...], ...] = ((32, 64), (64, 128))
    attention_heads: int = 4
    out_dim: int = 64
    normalize_output: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "stage_widths", tuple(tuple(int(w) for w in s) for s in self.stage_widths))
        if self.out_dim < 2:
            raise ValueError("out_dim must be at least 2")
        if self.neighborhood_k < 1:
            raise ValueError("neighborhood_k must be positive")
        if not self.stage_widths or any(len(s) == 0 for s in self.stage_widths):
            raise ValueError("every stage needs at least one layer width")
        for s in self.stage_widths:
            if s[-1] % self.attention_heads:
                raise ValueError(f"attention_heads={self.attention_heads} must divide stage width {s[-1]}")

    @property
    def in_dim(self) -> int:
        return 6 if self.use_normals else 3

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_widths"] = [list(s) for s in self.stage_widths]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        d = dict(d)
        d["stage_widths"] = tuple(tuple(s) for s in d["stage_widths"])
        return cls(**d)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass
class EncoderParams:
    config: EncoderConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name):
        return self.tensors[name]

    def items(self):
        return self.tensors.items()

    def values(self):
        return list(self.tensors.values())

    def copy(self) -> "EncoderParams":
        return EncoderParams(
            self.config, {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.tensors.items()}
        )


def is_bias(name: str) -> bool:
    return name.endswith(".b") or name.endswith(".beta")


def _layer_shapes(cfg: EncoderConfig):
    """Ordered (name, shape, kind) for every trainable tensor."""
    shapes = [("lift.W", (cfg.in_dim, cfg.lift_width), "w"), ("lift.b", (cfg.lift_width,), "b")]
    width = cfg.lift_width
    for s, widths in enumerate(cfg.stage_widths):
        fan_in = 3 + width
        for l, w in enumerate(widths):
            shapes += [(f"stage{s}.mlp{l}.W", (fan_in, w), "w"), (f"stage{s}.mlp{l}.b", (w,), "b")]
            fan_in = w
        width = widths[-1]
        for proj in ("q", "k", "v", "o"):
            shapes += [(f"stage{s}.attn.{proj}.W", (width, width), "w"), (f"stage{s}.attn.{proj}.b", (width,), "b")]
        shapes += [(f"stage{s}.attn.ln.gamma", (width,), "gain"), (f"stage{s}.attn.ln.beta", (width,), "b")]
    shapes += [("head.W", (width, cfg.out_dim), "w"), ("head.b", (cfg.out_dim,), "b")]
    return shapes


def init_params(config: EncoderConfig, rng: np.random.Generator | None = None) -> EncoderParams:
    """Glorot-uniform weights, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(config.seed) if rng is None else rng
    tensors = {}
    for name, shape, kind in _layer_shapes(config):
        if kind == "w":
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            data = rng.uniform(-limit, limit, size=shape)
        elif kind == "gain":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        tensors[name] = Tensor(data, requires_grad=True)
    return EncoderParams(config, tensors)


def _affine(x: Tensor, params: EncoderParams, prefix: str) -> Tensor:
    return ad.add(ad.matmul(x, params[prefix + ".W"]), params[prefix + ".b"])


def attention_block(params: EncoderParams, features: Tensor, prefix: str, heads: int | None = None) -> Tensor:
    """Multi-head self-attention over all rows, then residual and layer norm."""
    heads = params.config.attention_heads if heads is None else heads
    x = ad.as_tensor(features)
    n, d = x.shape
    if d % heads:
        raise ValueError(f"feature width {d} is not divisible by {heads} heads")
    dh = d // heads
    q = _affine(x, params, prefix + ".q")
    k = _affine(x, params, prefix + ".k")
    v = _affine(x, params, prefix + ".v")
    outs = []
    for h in range(heads):
        cols = slice(h * dh, (h + 1) * dh)
        qh, kh, vh = q[:, cols], k[:, cols], v[:, cols]
        att = ad.softmax(ad.matmul(qh, kh.T), axis=1, temperature=np.sqrt(dh))
        outs.append(ad.matmul(att, vh))
    mixed = _affine(ad.concat(outs, axis=1), params, prefix + ".o")
    return ad.layer_norm(ad.add(x, mixed), params[prefix + ".ln.gamma"], params[prefix + ".ln.beta"])


def _inputs(cloud: PointCloud, cfg: EncoderConfig) -> np.ndarray:
    if cfg.use_normals:
        if cloud.normals is None:
            raise ValueError("encoder configured with use_normals but the cloud has no normals")
        return np.concatenate([cloud.points, cloud.normals], axis=1)
    return cloud.points


def encode(params: EncoderParams, cloud: PointCloud) -> Tensor:
    """(N, out_dim) features; equivariant to permutations of the input points."""
    cfg = params.config
    n = len(cloud)
    if n < cfg.neighborhood_k:
        raise ValueError(f"cloud has {n} points, fewer than neighborhood_k={cfg.neighborhood_k}")
    k = cfg.neighborhood_k
    nbrs = knn_indices(cloud, k)
    rel = cloud.points[nbrs] - cloud.points[:, None, :]  # (N, k, 3)

    rel_flat = Tensor(rel.reshape(n * k, 3))

    x = ad.relu(_affine(Tensor(_inputs(cloud, cfg)), params, "lift"))
    for s, widths in enumerate(cfg.stage_widths):
        # first layer on [rel, x_j] split as rel @ W_rel + (x @ W_feat)_j:
        # same result, but the feature product runs on N rows instead of N*k
        w0 = params[f"stage{s}.mlp0.W"]
        local = ad.matmul(rel_flat, w0[:3])
        carried = ad.reshape(ad.gather_rows(ad.matmul(x, w0[3:]), nbrs), (n * k, widths[0]))
        h = ad.relu(ad.add(ad.add(local, carried), params[f"stage{s}.mlp0.b"]))
        for l in range(1, len(widths)):
            h = ad.relu(_affine(h, params, f"stage{s}.mlp{l}"))
        x = ad.max_pool(ad.reshape(h, (n, k, widths[-1])), axis=1)
        x = attention_block(params, x, f"stage{s}.attn")
    out = _affine(x, params, "head")
    if cfg.normalize_output:
        norms = ad.sqrt(ad.add(ad.sum_(ad.mul(out, out), axis=1, keepdims=True), 1e-12))
        out = ad.div(out, ad.broadcast_to(norms, out.shape))
    return out


def featurize(model, cloud: PointCloud) -> np.ndarray:
    """Features as a plain array from EncoderParams or any cloud -> features callable."""
    if isinstance(model, EncoderParams):
        with ad.no_grad():
            return encode(model, cloud).data
    return np.asarray(model(cloud), dtype=np.float64)


def id_features(cloud: PointCloud, size: int | None = None) -> np.ndarray:
    """One-hot rows of the ground-truth ids: an oracle descriptor for tests."""
    if cloud.ids is None:
        raise ValueError("cloud carries no ids")
    size = int(cloud.ids.max()) + 1 if size is None else size
    out = np.zeros((len(cloud), size))
    out[np.arange(len(cloud)), cloud.ids] = 1.0
    return out
