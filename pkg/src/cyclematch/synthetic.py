"""Parametric shape families with index-aligned sampling.

Every family is a union of parts. A part maps canonical coordinates in the
unit cube to space given the instance parameters; its surface is a set of
canonical level sets (cube faces for boxes, rho = 1 for tubes). One sampling
pattern of canonical points is drawn per category and evaluated on every
instance, so point i means the same place on every shape (ids[i] = i).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import PointCloud
from .io import ensure_dir, write_keypoints, write_text_cloud

BOX, TUBE = "box", "tube"
TUBE_S_MIN, TUBE_S_MAX = 0.002, 0.998


# ----------------------------------------------------------------------------
# part mappings: canonical (N, 3) -> world (N, 3)


def _wing(p, c, side, root_le, root_y, root_z, span, chord, taper, sweep, dihedral, thick):
    a, b, t = c[:, 0], c[:, 1], c[:, 2]
    ch = chord * (1.0 - (1.0 - taper) * a)
    x = root_le + a * span * np.tan(np.radians(sweep)) + b * ch
    y = side * (root_y + a * span)
    z = root_z + a * span * np.tan(np.radians(dihedral)) + (t - 0.5) * thick * (1.0 - 0.5 * a)
    return np.stack([x, y, z], axis=1)


def _fin(p, c, root_le, root_z, height, chord, taper, sweep, thick):
    a, b, t = c[:, 0], c[:, 1], c[:, 2]
    ch = chord * (1.0 - (1.0 - taper) * a)
    x = root_le + a * height * np.tan(np.radians(sweep)) + b * ch
    z = root_z + a * height
    y = (t - 0.5) * thick * (1.0 - 0.5 * a)
    return np.stack([x, y, z], axis=1)


def _fuselage(p, c):
    s, phi, rho = c[:, 0], 2 * np.pi * c[:, 1], c[:, 2]
    L, R = p["fuselage_length"], p["fuselage_radius"]
    r = rho * R * np.sqrt(np.sin(np.pi * s))
    return np.stack([-L / 2 + s * L, r * np.cos(phi), r * np.sin(phi)], axis=1)


def _box(c, lo, hi):
    lo, hi = np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)
    return lo + c * (hi - lo)


def _leg(c, x, y, z0, z1, width, splay_x, splay_y):
    """Vertical box leg whose foot is displaced outward by the splay."""
    a, b, h = c[:, 0], c[:, 1], c[:, 2]
    foot = 1.0 - h
    px = x + (a - 0.5) * width + splay_x * foot
    py = y + (b - 0.5) * width + splay_y * foot
    pz = z0 + h * (z1 - z0)
    return np.stack([px, py, pz], axis=1)


def _winged_parts(p):
    L, R = p["fuselage_length"], p["fuselage_radius"]
    wing_le = -L / 2 + p["wing_position"] * L
    stab_le = L / 2 - p["stab_chord"] - 0.03
    fin_le = L / 2 - p["fin_chord"] - 0.02
    wing = dict(root_le=wing_le, root_y=0.8 * R, root_z=-0.3 * R, span=p["wing_span"], chord=p["wing_chord"],
                taper=p["wing_taper"], sweep=p["wing_sweep"], dihedral=p["wing_dihedral"], thick=0.03)
    stab = dict(root_le=stab_le, root_y=0.5 * R, root_z=0.0, span=p["stab_span"], chord=p["stab_chord"],
                taper=0.6, sweep=25.0, dihedral=0.0, thick=0.015)
    return {
        "fuselage": (TUBE, lambda c: _fuselage(p, c)),
        "wing_r": (BOX, lambda c: _wing(p, c, 1.0, **wing)),
        "wing_l": (BOX, lambda c: _wing(p, c, -1.0, **wing)),
        "stab_r": (BOX, lambda c: _wing(p, c, 1.0, **stab)),
        "stab_l": (BOX, lambda c: _wing(p, c, -1.0, **stab)),
        "fin": (BOX, lambda c: _fin(p, c, fin_le, 0.7 * R, p["fin_height"], p["fin_chord"], 0.55, 35.0, 0.015)),
    }


def _legs(p, half_x, half_y, z_top):
    inset = p["leg_inset"]
    parts = {}
    for name, sx, sy in (("leg_fr", 1, 1), ("leg_fl", -1, 1), ("leg_br", 1, -1), ("leg_bl", -1, -1)):
        x, y = sx * (half_x - inset), sy * (half_y - inset)
        parts[name] = (BOX, lambda c, x=x, y=y, sx=sx, sy=sy: _leg(
            c, x, y, 0.0, z_top, p["leg_width"], sx * p["leg_splay"], sy * p["leg_splay"]))
    return parts


def _table_parts(p):
    hx, hy, H, T = p["top_width"] / 2, p["top_depth"] / 2, p["leg_height"], p["top_thickness"]
    parts = {"top": (BOX, lambda c: _box(c, (-hx, -hy, H), (hx, hy, H + T)))}
    parts.update(_legs(p, hx, hy, H))
    return parts


def _chair_parts(p):
    hx, hy, H, T = p["seat_width"] / 2, p["seat_depth"] / 2, p["leg_height"], 0.04
    tilt = np.tan(np.radians(p["back_tilt"]))

    def back(c):
        a, b, h = c[:, 0], c[:, 1], c[:, 2]
        z = H + T + h * p["back_height"]
        y = -hy + b * 0.04 - h * p["back_height"] * tilt
        x = -hx + a * 2 * hx
        return np.stack([x, y, z], axis=1)

    parts = {
        "seat": (BOX, lambda c: _box(c, (-hx, -hy, H), (hx, hy, H + T))),
        "back": (BOX, back),
    }
    parts.update(_legs(p, hx, hy, H))
    return parts


@dataclass(frozen=True)
class Family:
    name: str
    parts: callable
    ranges: dict
    # label -> (part, canonical point on the surface)
    keypoints: dict


FAMILIES = {
    "winged": Family(
        "winged",
        _winged_parts,
        {
            "fuselage_length": (0.9, 1.1),
            "fuselage_radius": (0.045, 0.075),
            "wing_span": (0.35, 0.5),
            "wing_chord": (0.16, 0.26),
            "wing_taper": (0.3, 0.7),
            "wing_sweep": (0.0, 30.0),
            "wing_dihedral": (-4.0, 8.0),
            "wing_position": (0.36, 0.5),
            "stab_span": (0.12, 0.2),
            "stab_chord": (0.08, 0.12),
            "fin_height": (0.1, 0.18),
            "fin_chord": (0.1, 0.15),
        },
        {
            "nose": ("fuselage", (TUBE_S_MIN, 0.0, 1.0)),
            "tail": ("fuselage", (TUBE_S_MAX, 0.0, 1.0)),
            "wing_tip_r": ("wing_r", (1.0, 0.5, 0.5)),
            "wing_tip_l": ("wing_l", (1.0, 0.5, 0.5)),
            "stab_tip_r": ("stab_r", (1.0, 0.5, 0.5)),
            "stab_tip_l": ("stab_l", (1.0, 0.5, 0.5)),
            "fin_top": ("fin", (1.0, 0.5, 0.5)),
        },
    ),
    "four-leg-table": Family(
        "four-leg-table",
        _table_parts,
        {
            "top_width": (0.8, 1.2),
            "top_depth": (0.5, 0.8),
            "top_thickness": (0.03, 0.06),
            "leg_height": (0.5, 0.8),
            "leg_width": (0.04, 0.08),
            "leg_inset": (0.05, 0.12),
            "leg_splay": (0.0, 0.08),
        },
        {
            "top_fr": ("top", (1.0, 1.0, 1.0)),
            "top_fl": ("top", (0.0, 1.0, 1.0)),
            "top_br": ("top", (1.0, 0.0, 1.0)),
            "top_bl": ("top", (0.0, 0.0, 1.0)),
            "foot_fr": ("leg_fr", (0.5, 0.5, 0.0)),
            "foot_fl": ("leg_fl", (0.5, 0.5, 0.0)),
            "foot_br": ("leg_br", (0.5, 0.5, 0.0)),
            "foot_bl": ("leg_bl", (0.5, 0.5, 0.0)),
        },
    ),
    "chair-like": Family(
        "chair-like",
        _chair_parts,
        {
            "seat_width": (0.45, 0.6),
            "seat_depth": (0.4, 0.55),
            "leg_height": (0.4, 0.5),
            "leg_width": (0.03, 0.05),
            "leg_inset": (0.02, 0.05),
            "leg_splay": (0.0, 0.05),
            "back_height": (0.4, 0.6),
            "back_tilt": (0.0, 20.0),
        },
        {
            "seat_fr": ("seat", (1.0, 1.0, 1.0)),
            "seat_fl": ("seat", (0.0, 1.0, 1.0)),
            "back_tr": ("back", (1.0, 0.5, 1.0)),
            "back_tl": ("back", (0.0, 0.5, 1.0)),
            "foot_fr": ("leg_fr", (0.5, 0.5, 0.0)),
            "foot_fl": ("leg_fl", (0.5, 0.5, 0.0)),
            "foot_br": ("leg_br", (0.5, 0.5, 0.0)),
            "foot_bl": ("leg_bl", (0.5, 0.5, 0.0)),
        },
    ),
}


@dataclass(frozen=True)
class SyntheticCategoryConfig:
    family: str = "winged"
    instances: int = 200
    points_per_shape: int = 256
    ranges: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; choose from {sorted(FAMILIES)}")
        if self.instances < 2:
            raise ValueError("need at least 2 instances")
        fam = FAMILIES[self.family]
        if self.points_per_shape < len(fam.keypoints):
            raise ValueError("points_per_shape must be at least the number of keypoints")
        for key, (lo, hi) in self.ranges.items():
            if key not in fam.ranges:
                raise ValueError(f"unknown parameter {key!r} for family {self.family}")
            if not lo <= hi:
                raise ValueError(f"invalid range for {key}: ({lo}, {hi})")

    def resolved_ranges(self) -> dict:
        out = dict(FAMILIES[self.family].ranges)
        out.update({k: tuple(v) for k, v in self.ranges.items()})
        return out


# ----------------------------------------------------------------------------
# canonical surface points


@dataclass(frozen=True)
class Pattern:
    """Canonical surface coordinates shared by every instance of a category."""

    part: np.ndarray  # (N,) part index into `part_names`
    coords: np.ndarray  # (N, 3) canonical coordinates
    face: np.ndarray  # (N,) canonical level-set axis, sign encoded as +/-(axis + 1)
    part_names: tuple


def _face_samples(kind, rng, count):
    """Uniform canonical samples on the part surface with their face codes."""
    c = rng.uniform(0.0, 1.0, size=(count, 3))
    if kind == TUBE:
        c[:, 0] = TUBE_S_MIN + (TUBE_S_MAX - TUBE_S_MIN) * c[:, 0]
        c[:, 2] = 1.0
        return c, np.full(count, 3)
    axis = rng.integers(0, 3, size=count)
    high = rng.integers(0, 2, size=count)
    c[np.arange(count), axis] = high
    return c, np.where(high == 1, axis + 1, -(axis + 1))


def _face_code(kind, coord):
    if kind == TUBE:
        return 3
    coord = np.asarray(coord, dtype=np.float64)
    for axis in range(3):
        if coord[axis] in (0.0, 1.0):
            return (axis + 1) if coord[axis] == 1.0 else -(axis + 1)
    raise ValueError(f"canonical point {coord} is not on a box face")


def _jacobian(fn, c, h=1e-6):
    """Central-difference Jacobian d world / d canonical, shape (N, 3, 3)."""
    cols = []
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        cols.append((fn(c + e) - fn(c - e)) / (2 * h))
    return np.stack(cols, axis=2)


def _surface(fn, coords, faces):
    """World points, unit outward normals and area densities."""
    pts = fn(coords)
    J = _jacobian(fn, coords)
    axis = np.abs(faces) - 1
    n0 = np.zeros((len(coords), 3))
    n0[np.arange(len(coords)), axis] = np.sign(faces)
    # gradient of the canonical level function, pulled back to world space
    grad = np.linalg.solve(np.transpose(J, (0, 2, 1)), n0[:, :, None])[:, :, 0]
    gnorm = np.linalg.norm(grad, axis=1)
    normals = grad / gnorm[:, None]
    area = np.abs(np.linalg.det(J)) * gnorm
    return pts, normals, area


def _template_params(fam: Family, ranges: dict) -> dict:
    return {k: 0.5 * (lo + hi) for k, (lo, hi) in ranges.items()}


def build_pattern(cfg: SyntheticCategoryConfig) -> Pattern:
    """Area-uniform candidates on the template shape, thinned by farthest-point sampling.

    The keypoint locations seed the sampling, so they are pattern points 0..K-1.
    """
    fam = FAMILIES[cfg.family]
    rng = np.random.default_rng([cfg.seed, 0])
    parts = fam.parts(_template_params(fam, cfg.resolved_ranges()))
    names = tuple(parts)
    per_part = 48 * cfg.points_per_shape
    cand_part, cand_c, cand_f, cand_w, cand_x = [], [], [], [], []
    for j, name in enumerate(names):
        kind, fn = parts[name]
        c, f = _face_samples(kind, rng, per_part)
        x, _, a = _surface(fn, c, f)
        cand_part.append(np.full(per_part, j))
        cand_c.append(c)
        cand_f.append(f)
        cand_w.append(a)
        cand_x.append(x)
    part, coords, faces = np.concatenate(cand_part), np.concatenate(cand_c), np.concatenate(cand_f)
    w, x = np.concatenate(cand_w), np.concatenate(cand_x)
    # each part drew the same number of candidates, so weighting by density gives area-uniform draws
    n_pool = 16 * cfg.points_per_shape
    pick = rng.choice(len(w), size=n_pool, replace=False, p=w / w.sum())
    part, coords, faces, x = part[pick], coords[pick], faces[pick], x[pick]

    kp_part, kp_c, kp_f, kp_x = [], [], [], []
    for label, (pname, coord) in fam.keypoints.items():
        j = names.index(pname)
        kind, fn = parts[pname]
        c = np.array([coord], dtype=np.float64)
        kp_part.append(j)
        kp_c.append(c[0])
        kp_f.append(_face_code(kind, coord))
        kp_x.append(fn(c)[0])
    kp_x = np.array(kp_x)

    n_free = cfg.points_per_shape - len(kp_x)
    chosen = []
    min_d = np.min(np.sum((x[:, None, :] - kp_x[None, :, :]) ** 2, axis=2), axis=1)
    for _ in range(n_free):
        i = int(np.argmax(min_d))
        chosen.append(i)
        np.minimum(min_d, np.sum((x - x[i]) ** 2, axis=1), out=min_d)
        min_d[i] = -1.0
    chosen = np.array(chosen, dtype=np.int64)
    return Pattern(
        np.concatenate([np.array(kp_part), part[chosen]]).astype(np.int64),
        np.concatenate([np.array(kp_c), coords[chosen]]),
        np.concatenate([np.array(kp_f), faces[chosen]]).astype(np.int64),
        names,
    )


def evaluate_instance(family: str, params: dict, pattern: Pattern) -> PointCloud:
    """Raw (unnormalised) cloud of one instance, ids = pattern index."""
    parts = FAMILIES[family].parts(params)
    n = len(pattern.part)
    pts, normals = np.zeros((n, 3)), np.zeros((n, 3))
    for j, name in enumerate(pattern.part_names):
        sel = pattern.part == j
        if not np.any(sel):
            continue
        _, fn = parts[name]
        p, nrm, _ = _surface(fn, pattern.coords[sel], pattern.face[sel])
        pts[sel], normals[sel] = p, nrm
    return PointCloud(pts, normals, np.arange(n))


def _normalize_with(cloud: PointCloud, extra: np.ndarray):
    centre = cloud.points.mean(axis=0)
    radius = np.max(np.linalg.norm(cloud.points - centre, axis=1))
    s = 1.0 / (2.0 * radius)
    return cloud.with_points((cloud.points - centre) * s), (extra - centre) * s


@dataclass
class SyntheticInstance:
    cloud: PointCloud
    keypoint_labels: list
    keypoints: np.ndarray
    params: dict


def sample_instances(cfg: SyntheticCategoryConfig):
    """Pattern and normalised instances for a category, deterministic per seed."""
    fam = FAMILIES[cfg.family]
    ranges = cfg.resolved_ranges()
    pattern = build_pattern(cfg)
    rng = np.random.default_rng([cfg.seed, 1])
    labels = list(fam.keypoints)
    out = []
    for _ in range(cfg.instances):
        params = {k: float(rng.uniform(lo, hi)) for k, (lo, hi) in ranges.items()}
        raw = evaluate_instance(cfg.family, params, pattern)
        cloud, kps = _normalize_with(raw, raw.points[: len(labels)])
        out.append(SyntheticInstance(cloud, labels, kps, params))
    return pattern, out


def generate_synthetic_category(cfg: SyntheticCategoryConfig, out_dir) -> Path:
    """Write a dataset directory: meta.json, pattern.txt, shapes/*.xyz, keypoints/*.kp."""
    out = ensure_dir(out_dir)
    pattern, instances = sample_instances(cfg)
    shapes, kpdir = ensure_dir(out / "shapes"), ensure_dir(out / "keypoints")
    for i, inst in enumerate(instances):
        write_text_cloud(inst.cloud, shapes / f"shape_{i:04d}.xyz")
        write_keypoints(inst.keypoint_labels, inst.keypoints, kpdir / f"shape_{i:04d}.kp")
    rows = [
        f"{i} {pattern.part_names[pattern.part[i]]} {pattern.face[i]} "
        + " ".join(format(v, ".17g") for v in pattern.coords[i])
        for i in range(len(pattern.part))
    ]
    (out / "pattern.txt").write_text("# id part face c0 c1 c2\n" + "\n".join(rows) + "\n")
    meta = {
        "family": cfg.family,
        "instances": cfg.instances,
        "points_per_shape": cfg.points_per_shape,
        "seed": cfg.seed,
        "ranges": {k: list(v) for k, v in cfg.resolved_ranges().items()},
        "keypoint_labels": instances[0].keypoint_labels,
        "keypoint_ids": list(range(len(instances[0].keypoint_labels))),
        "params": [inst.params for inst in instances],
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    return out


def read_pattern(path) -> Pattern:
    part, names, faces, coords = [], [], [], []
    for line in Path(path).read_text().splitlines():
        if line.startswith("#") or not line.strip():
            continue
        tok = line.split()
        if tok[1] not in names:
            names.append(tok[1])
        part.append(tok[1])
        faces.append(int(tok[2]))
        coords.append([float(t) for t in tok[3:6]])
    return Pattern(
        np.array([names.index(p) for p in part]), np.array(coords), np.array(faces), tuple(names)
    )
