"""Synthetic training data, the rate-distortion loss and the training loop."""

from __future__ import annotations

import configparser
import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, fields, replace

import numpy as np
from scipy.spatial import cKDTree

from .base import QuantizerConfig, dequantize, quantize
from .codec import CodecModel, EncodeConfig, decode, encode_detailed, infer_bit_depth
from .coder.prior import round_half_away
from .geometry import NeighborIndex, PointCloud
from .metrics import chamfer_augmented
from .nn.tensor import (
    Tape,
    Tensor,
    add,
    gather_rows,
    maximum,
    mean_all,
    mul,
    reshape,
    row_norm,
    scale_add,
    sub,
)
from .residual import default_cutoff, geometric_subtract
from .sparse import as_geometry

log = logging.getLogger(__name__)

# beta per hierarchy count and step, picked with scripts/sweep_beta.sh on the
# synthetic sphere/torus set
DEFAULT_BETA = {
    1: {1.6: 2.0, 2.0: 2.0, 8 / 3: 2.0, 4.0: 2.0, 8.0: 2.0},
    2: {1.6: 0.005, 2.0: 0.005, 8 / 3: 0.005, 4.0: 0.005, 8.0: 0.005},
}


def default_beta(step: float, hierarchies: int = 1) -> float:
    """Swept beta for the nearest tabulated step (nearest in log scale)."""
    table = DEFAULT_BETA[hierarchies]
    key = min(table, key=lambda s: abs(math.log(s / step)))
    return table[key]


# ------------------------------------------------------------- synthetic data

SHAPE_FAMILIES = ("sphere", "torus", "plane", "superellipsoid")


@dataclass(frozen=True)
class ShapeSpec:
    family: str = "sphere"
    samples: int = 20000
    bit_depth: int = 9
    size: float = 0.35  # characteristic radius / half-extent as a fraction of 2^B
    jitter: float = 0.0  # white gaussian noise, in input voxel units
    params: tuple = ()  # family-specific extras, see generate_synthetic_cloud
    rotate: bool = True
    relief: float = 0.0  # amplitude of smooth random bumps along the normal, voxel units
    relief_wavelength: tuple = (8.0, 16.0)

    def __post_init__(self):
        if self.family not in SHAPE_FAMILIES:
            raise ValueError(f"unknown shape family {self.family!r}")
        if self.samples < 1:
            raise ValueError("sample count must be >= 1")
        if not 0 < self.size <= 0.5:
            raise ValueError("size must lie in (0, 0.5]")
        if self.bit_depth < 1 or self.jitter < 0 or self.relief < 0:
            raise ValueError("invalid bit depth, jitter or relief")


def _random_rotation(rng) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def _unit(v):
    return v / np.maximum(np.linalg.norm(v, axis=1, keepdims=True), 1e-12)


def _spow(x, e):
    return np.sign(x) * np.abs(x) ** e


def _surface_samples(spec: ShapeSpec, rng):
    """Unit-scale samples and their unit normals."""
    n = spec.samples
    if spec.family == "sphere":
        v = _unit(rng.normal(size=(n, 3)))
        return v, v
    if spec.family == "torus":
        ratio = spec.params[0] if spec.params else 0.35  # tube radius / ring radius
        R, r = 1.0 / (1.0 + ratio), ratio / (1.0 + ratio)
        us, vs = [], []
        while sum(len(u) for u in us) < n:
            u = rng.uniform(0, 2 * np.pi, 2 * n)
            v = rng.uniform(0, 2 * np.pi, 2 * n)
            keep = rng.uniform(0, 1, 2 * n) < (R + r * np.cos(v)) / (R + r)  # area-uniform
            us.append(u[keep])
            vs.append(v[keep])
        u, v = np.concatenate(us)[:n], np.concatenate(vs)[:n]
        nrm = np.stack([np.cos(v) * np.cos(u), np.cos(v) * np.sin(u), np.sin(v)], 1)
        ring = np.stack([R * np.cos(u), R * np.sin(u), np.zeros(n)], 1)
        return ring + r * nrm, nrm
    if spec.family == "plane":
        xy = rng.uniform(-1, 1, size=(n, 2))
        return np.column_stack([xy, np.zeros(n)]), np.tile([0.0, 0.0, 1.0], (n, 1))
    # superellipsoid with exponents (e1, e2)
    e1, e2 = (tuple(spec.params) + (0.5, 0.5))[:2]
    v = _unit(rng.normal(size=(n, 3)))
    eta = np.arcsin(np.clip(v[:, 2], -1, 1))
    omega = np.arctan2(v[:, 1], v[:, 0])
    pts = np.stack([
        _spow(np.cos(eta), e1) * _spow(np.cos(omega), e2),
        _spow(np.cos(eta), e1) * _spow(np.sin(omega), e2),
        _spow(np.sin(eta), e1),
    ], axis=1)
    # normal from the gradient of |x|^(2/e2) + |y|^(2/e2))^(e2/e1) + |z|^(2/e1)
    p = np.where(np.abs(pts) < 1e-12, 1e-12, pts)
    xy = (np.abs(p[:, 0]) ** (2 / e2) + np.abs(p[:, 1]) ** (2 / e2)) ** (e2 / e1 - 1)
    g = np.stack([
        _spow(p[:, 0], 2 / e2 - 1) * xy,
        _spow(p[:, 1], 2 / e2 - 1) * xy,
        _spow(p[:, 2], 2 / e1 - 1),
    ], axis=1)
    return pts, _unit(g)


def _relief_field(pts, rng, amplitude, wavelengths, waves=8):
    """Smooth random scalar field: a sum of plane waves with RMS equal to ``amplitude``."""
    dirs = _unit(rng.normal(size=(waves, 3)))
    lam = rng.uniform(*wavelengths, size=waves)
    phase = rng.uniform(0, 2 * np.pi, size=waves)
    f = np.sin(2 * np.pi * (pts @ dirs.T) / lam + phase).sum(axis=1)
    return amplitude * f / np.sqrt(waves / 2)


def generate_synthetic_cloud(spec: ShapeSpec, seed: int) -> PointCloud:
    """Surface samples scaled into [0, 2^B), rounded to integers and deduplicated."""
    rng = np.random.default_rng(seed)
    pts, nrm = _surface_samples(spec, rng)
    if spec.rotate and spec.family != "plane":
        rot = _random_rotation(rng)
        pts, nrm = pts @ rot.T, nrm @ rot.T
    elif spec.rotate:
        # small tilt keeps the plane close to axis aligned, i.e. one voxel thick
        tilt = rng.uniform(-0.1, 0.1, size=2)
        pts[:, 2] = pts[:, 0] * tilt[0] + pts[:, 1] * tilt[1]
        nrm = np.tile(_unit(np.array([[-tilt[0], -tilt[1], 1.0]])), (len(pts), 1))
    side = float(1 << spec.bit_depth)
    pts = pts * spec.size * side + side / 2
    if spec.relief:
        pts = pts + nrm * _relief_field(pts, rng, spec.relief, spec.relief_wavelength)[:, None]
    if spec.jitter:
        pts = pts + rng.normal(scale=spec.jitter, size=pts.shape)
    vox = np.clip(np.floor(pts + 0.5), 0, side - 1)
    return PointCloud(np.unique(vox, axis=0))


def _surface_area(spec: ShapeSpec) -> float:
    """Approximate area in voxel units, used to pick dense sample counts."""
    r = spec.size * (1 << spec.bit_depth)
    if spec.family == "torus":
        ratio = spec.params[0] if spec.params else 0.35
        return 4 * math.pi ** 2 * (r / (1 + ratio)) * (r * ratio / (1 + ratio))
    if spec.family == "plane":
        return 4 * r * r
    return 4 * math.pi * r * r


def make_dataset(n: int, seed: int, bit_depth: int = 9, samples: int | None = None,
                 families=("sphere", "torus"), size_range=(0.06, 0.1), density: float = 3.0,
                 relief: float = 0.0, relief_wavelength=(8.0, 16.0)) -> list:
    """n clouds cycling through ``families`` with random sizes.

    ``samples=None`` draws ``density`` samples per unit of surface area so the
    voxelized surface is close to watertight, like dense captured content.
    """
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        fam = families[i % len(families)]
        size = float(rng.uniform(*size_range))
        params = (float(rng.uniform(0.3, 0.5)),) if fam == "torus" else ()
        spec = ShapeSpec(fam, 1, bit_depth, size, 0.0, params)
        count = samples or max(1, int(density * _surface_area(spec)))
        spec = ShapeSpec(fam, count, bit_depth, size, 0.0, params, relief=relief,
                         relief_wavelength=tuple(relief_wavelength))
        out.append(generate_synthetic_cloud(spec, int(rng.integers(1 << 31))))
    return out


# ---------------------------------------------------------------------- loss

def rd_loss(distortion, rate, alpha: float = 5.0, beta: float = 0.0, skip: bool = False):
    """alpha * D + beta * R; in skip mode the loss is D alone.

    Works on floats or scalar Tensors (differentiable in both arguments).
    """
    if skip:
        return distortion
    if isinstance(distortion, Tensor):
        r = rate if isinstance(rate, Tensor) else Tensor(np.asarray(float(rate)))
        return scale_add(distortion, alpha, r, beta)
    return alpha * float(distortion) + beta * float(rate)


def chamfer_tensor(x0: np.ndarray, x0_tree: cKDTree, y: Tensor) -> Tensor:
    """Differentiable augmented Chamfer between fixed points ``x0`` and decoded ``y``.

    Nearest-neighbor assignments are piecewise constant and taken as fixed.
    """
    yv = y.value.astype(np.float64)
    _, j = cKDTree(yv).query(x0, k=1)
    d_xy = mean_all(row_norm(sub(gather_rows(y, j), Tensor(x0.astype(y.dtype)))))
    _, i = x0_tree.query(yv, k=1)
    d_yx = mean_all(row_norm(sub(y, Tensor(x0[i].astype(y.dtype)))))
    return maximum(d_xy, d_yx)


# ------------------------------------------------------------------ training

@dataclass
class TrainingConfig:
    alpha: float = 5.0
    beta: float | None = None  # None: default_beta(step, hierarchies)
    lr: float = 8e-4
    epochs: int = 50
    batch_size: int = 1
    seed: int = 0
    step: float = 4.0
    k: int = 10
    hierarchies: int = 1  # small desk-scale clouds are sparse at the latent level
    skip: bool = False
    # dataset generation (used by the CLI when no clouds are supplied)
    train_clouds: int = 20
    val_clouds: int = 4
    bit_depth: int = 9
    families: str = "sphere,torus"
    relief: float = 0.0

    def __post_init__(self):
        if self.beta is None:
            self.beta = default_beta(self.step, self.hierarchies)
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("invalid epochs or batch size")

    @classmethod
    def from_text(cls, text: str) -> "TrainingConfig":
        """Parses ``key = value`` lines (``#`` comments allowed)."""
        cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
        cp.read_string("[train]\n" + text)
        known = {f.name: f.type for f in fields(cls)}
        kw = {}
        for key, raw in cp["train"].items():
            if key not in known:
                raise ValueError(f"unknown training option {key!r}")
            default = getattr(cls(), key)
            if isinstance(default, bool):
                kw[key] = cp["train"].getboolean(key)
            elif isinstance(default, int):
                kw[key] = int(raw)
            elif isinstance(default, float):
                kw[key] = float(eval_fraction(raw))
            else:
                kw[key] = raw.strip()
        return cls(**kw)

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in asdict(self).items())


def eval_fraction(raw: str) -> float:
    """Accepts plain floats and simple fractions such as ``8/3``."""
    raw = raw.strip()
    if "/" in raw:
        num, den = raw.split("/", 1)
        return float(num) / float(den)
    return float(raw)


class TrainingDiverged(RuntimeError):
    def __init__(self, message, model, log):
        super().__init__(message)
        self.model = model
        self.log = log


@dataclass
class Sample:
    """Everything about one training cloud that does not depend on the parameters."""

    x0: np.ndarray
    tree: cKDTree
    geometry: object
    x1: np.ndarray
    offsets: np.ndarray
    n_input: int
    step: float

    @classmethod
    def prepare(cls, cloud: PointCloud, step: float, k: int, bit_depth: int | None = None) -> "Sample":
        B = bit_depth or infer_bit_depth(cloud)
        qcfg = QuantizerConfig(step, B)
        coarse = quantize(cloud, qcfg)
        x1 = dequantize(coarse, qcfg)
        index = NeighborIndex(cloud)
        res = geometric_subtract(cloud, x1, k, default_cutoff(step), step, index=index)
        return cls(cloud.points, index.tree, as_geometry(coarse), x1.points, res.offsets, len(cloud), float(step))


def forward_loss(model: CodecModel, sample: Sample, cfg: TrainingConfig, rng: np.random.Generator | None):
    """Returns (loss, D, R) tensors for one sample. ``rng=None`` rounds instead of adding noise."""
    dt = model.store.dtype
    if cfg.skip:
        f2p = model.skip_features(sample.geometry)
        rate = Tensor(np.asarray(0.0))
    else:
        _, f2 = model.analyze(sample.geometry, sample.offsets.astype(dt))
        if rng is None:
            f2p = Tensor(round_half_away(f2.value).astype(dt))
        else:
            f2p = add(f2, Tensor(rng.uniform(-0.5, 0.5, size=f2.shape).astype(dt)))
        rate = mul(model.prior.bits_tensor(f2p), 1.0 / sample.n_input)
    off = model.synthesize(sample.geometry, f2p)
    n, k, _ = off.shape
    y = add(Tensor(np.repeat(sample.x1, k, axis=0).astype(dt)), mul(reshape(off, (n * k, 3)), sample.step))
    dist = chamfer_tensor(sample.x0, sample.tree, y)
    return rd_loss(dist, rate, cfg.alpha, cfg.beta, cfg.skip), dist, rate


def _trainable(model: CodecModel, skip: bool) -> list:
    if not skip:
        return model.store.names()
    return [n for n in model.store.names() if n.startswith(("feature_synthesis", "point_synthesis"))]


def evaluate(model: CodecModel, clouds, cfg: TrainingConfig, mode: str | None = None) -> dict:
    """Codec round trip on held-out clouds: mean Chamfer and mean enhancement bits per point."""
    mode = mode or ("skip" if cfg.skip else "full")
    ch, rates = [], []
    for cloud in clouds:
        res = encode_detailed(cloud, model, EncodeConfig(cfg.step, cfg.k, cfg.hierarchies, skip=(mode != "full")))
        rec = decode(res.container, model, mode)
        ch.append(chamfer_augmented(cloud, rec))
        enh = res.container.enh_bytes
        rates.append(0.0 if enh is None else 8.0 * len(enh) / len(cloud))
    return {"chamfer": float(np.mean(ch)), "enh_bpp": float(np.mean(rates))}


def train(model: CodecModel, dataset, cfg: TrainingConfig, val=None, progress=None):
    """Adam on the rate-distortion loss. Returns (model, log rows).

    Each log row holds epoch, mean loss, mean D, mean R (bits per input
    point) and, when ``val`` is given, validation Chamfer.
    """
    if model.k != cfg.k or model.hierarchies != cfg.hierarchies:
        raise ValueError("model widths do not match the training operating point")
    if model.step is not None and not math.isclose(model.step, cfg.step):
        raise ValueError(f"model is tied to step {model.step}, training config says {cfg.step}")
    model.config["step"] = float(cfg.step)
    model.config["skip_trained"] = bool(cfg.skip)
    samples = [Sample.prepare(c, cfg.step, cfg.k) for c in dataset]
    rng = np.random.default_rng(cfg.seed)
    names = _trainable(model, cfg.skip)
    good = model.store.state_dict()
    rows = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(samples))
        tot = {"loss": 0.0, "D": 0.0, "R": 0.0}
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            for i in batch:
                with Tape() as tape:
                    loss, dist, rate = forward_loss(model, samples[i], cfg, rng)
                if not np.isfinite(loss.value):
                    model.store.load_state_dict(good)
                    raise TrainingDiverged(f"non-finite loss in epoch {epoch}", model, rows)
                tape.backward(loss, seed=np.asarray(1.0 / len(batch)))
                tot["loss"] += float(loss.value)
                tot["D"] += float(dist.value)
                tot["R"] += float(rate.value)
            _adam(model, names, cfg.lr)
        row = {"epoch": epoch, **{k: v / len(samples) for k, v in tot.items()}}
        if val is not None:
            row["val_chamfer"] = evaluate(model, val, cfg)["chamfer"]
        rows.append(row)
        good = model.store.state_dict()
        if progress:
            progress(row)
        log.info("epoch %d loss %.5f D %.5f R %.5f", epoch, row["loss"], row["D"], row["R"])
    return model, rows


def _adam(model: CodecModel, names, lr):
    store = model.store
    for name in names:
        if store[name].grad is None:  # e.g. the prior in a batch where it got no gradient
            store[name].grad = np.zeros_like(store[name].value)
    store.adam_step(lr, only=names)
    store.zero_grad()


def log_to_csv(rows) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return buf.getvalue()


def sweep_beta(dataset, val, cfg: TrainingConfig, betas, seed: int = 0, progress=None) -> list:
    """Trains one fresh model per beta and reports validation Chamfer and enhancement bpp."""
    rows = []
    for beta in betas:
        run = replace(cfg, beta=float(beta))
        model = CodecModel.create(run.k, run.hierarchies, step=run.step, seed=seed)
        model, _ = train(model, dataset, run)
        row = {"beta": float(beta), **evaluate(model, val, run)}
        rows.append(row)
        if progress:
            progress(row)
    return rows


# --------------------------------------------------------------- checkpoints

def save_checkpoint(model: CodecModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(model.to_bytes())


def load_checkpoint(path, expect: dict | None = None) -> CodecModel:
    with open(path, "rb") as fh:
        data = fh.read()
    return CodecModel.from_bytes(data, expect)
