"""Synthetic multi-rater phantoms and coarse priors.

Shapes are defined through signed distance fields (negative inside, voxel
units).  Raters disagree by thresholding the same field at different
levels, which gives a nested family of plausible boundaries with a known
ground-truth distribution.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .metrics import SIX_CONNECTED
from .volume import BinaryMask, RaterSet, Volume, binarize, read_mask, read_volume, to_signed, write_mask, write_volume

SHAPES = ("sphere", "dumbbell", "spiculated")
SPIKE_HALF_ANGLE = 0.35


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class ShapeSpec:
    kind: str
    centers: tuple
    radii: tuple
    dims: tuple = (24, 24, 24)
    spacing: tuple = (1.0, 1.0, 1.0)
    spike_count: int = 0
    spike_length: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "centers", tuple(tuple(float(v) for v in c) for c in self.centers))
        object.__setattr__(self, "radii", tuple(float(r) for r in self.radii))
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass(frozen=True)
class RaterModel:
    offsets: tuple = (-1.0, 0.0, 1.0)
    weights: tuple | None = None
    modulation: float = 0.0
    seed: int = 0

    @property
    def K(self) -> int:
        return len(self.offsets)

    def to_dict(self):
        return asdict(self)


def validate_spec(spec: ShapeSpec) -> None:
    if spec.kind not in SHAPES:
        raise ShapeError(f"kind: unknown shape {spec.kind!r}, expected one of {SHAPES}")
    if len(spec.dims) != 3 or min(spec.dims) < 3:
        raise ShapeError(f"dims: need three sizes >= 3, got {spec.dims}")
    if len(spec.spacing) != 3 or min(spec.spacing) <= 0:
        raise ShapeError(f"spacing: all components must be > 0, got {spec.spacing}")
    want = 2 if spec.kind == "dumbbell" else 1
    if len(spec.centers) != want or len(spec.radii) != want:
        raise ShapeError(f"centers/radii: {spec.kind} needs {want} sphere(s)")
    if any(r <= 0 for r in spec.radii):
        raise ShapeError("radii: must be positive")
    if spec.kind == "spiculated" and (spec.spike_count < 1 or spec.spike_length <= 0):
        raise ShapeError("spike_count/spike_length: a spiculated shape needs spikes")
    reach = spec.spike_length if spec.kind == "spiculated" else 0.0
    for c, r in zip(spec.centers, spec.radii):
        for axis, (ci, n) in enumerate(zip(c, spec.dims)):
            if ci - r - reach < 1 or ci + r + reach > n - 2:
                raise ShapeError(f"centers: shape leaves the grid (1-voxel margin) along axis {axis}")


def _grid(dims):
    return np.meshgrid(*(np.arange(n, dtype=np.float64) for n in dims), indexing="ij")


def _sphere_sdf(dims, center, radius):
    zz, yy, xx = _grid(dims)
    return np.sqrt((zz - center[0]) ** 2 + (yy - center[1]) ** 2 + (xx - center[2]) ** 2) - radius


def spike_directions(count: int, seed: int) -> np.ndarray:
    v = np.random.default_rng(seed).standard_normal((count, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def make_shape_sdf(spec: ShapeSpec) -> Volume:
    """Signed distance field in voxel units (negative inside)."""
    validate_spec(spec)
    if spec.kind == "sphere":
        sdf = _sphere_sdf(spec.dims, spec.centers[0], spec.radii[0])
    elif spec.kind == "dumbbell":
        sdf = np.minimum(
            _sphere_sdf(spec.dims, spec.centers[0], spec.radii[0]),
            _sphere_sdf(spec.dims, spec.centers[1], spec.radii[1]),
        )
    else:
        c = np.asarray(spec.centers[0])
        zz, yy, xx = _grid(spec.dims)
        rel = np.stack([zz - c[0], yy - c[1], xx - c[2]], axis=-1)
        dist = np.linalg.norm(rel, axis=-1)
        unit = rel / np.maximum(dist, 1e-12)[..., None]
        cos0 = math.cos(SPIKE_HALF_ANGLE)
        bumps = np.zeros(spec.dims)
        for d in spike_directions(spec.spike_count, spec.seed):
            bumps += np.clip((unit @ d - cos0) / (1.0 - cos0), 0.0, 1.0) ** 2
        sdf = dist - spec.radii[0] - spec.spike_length * bumps
    return Volume(sdf, spec.spacing, "image")


def _azimuth(dims):
    zz, yy, xx = _grid(dims)
    return np.arctan2(yy - (dims[1] - 1) / 2.0, xx - (dims[2] - 1) / 2.0)


def make_raters(sdf: Volume, model: RaterModel, min_radius: float | None = None) -> RaterSet:
    """Rater ``k`` keeps the voxels with ``sdf <= offsets[k]``."""
    if model.K < 1:
        raise ValueError("offsets: need at least one rater")
    if min_radius is not None and any(abs(d) >= min_radius for d in model.offsets):
        raise ValueError(f"offsets: |delta| must stay below the smallest radius {min_radius}")
    field_ = np.asarray(sdf.data, np.float64)
    masks = []
    phase_rng = np.random.default_rng(model.seed)
    az = _azimuth(sdf.dims) if model.modulation else None
    for k, delta in enumerate(model.offsets):
        level = float(delta)
        if model.modulation:
            level = level + model.modulation * np.sin(3.0 * az + phase_rng.uniform(0, 2 * math.pi))
        m = field_ <= level
        if not m.any():
            raise ValueError(f"rater {k} (offset {delta}) produced an empty mask")
        masks.append(BinaryMask(m, sdf.spacing))
    return RaterSet(masks, model.weights)


def parse_degrade(degrade):
    """Accept ``none``, ``erode1``, ``dilate1``, ``threshold:<tau>`` or ``("threshold", tau)``."""
    if isinstance(degrade, (tuple, list)):
        name, tau = degrade
        return str(name), float(tau)
    text = str(degrade)
    if text.startswith("threshold"):
        _, _, tau = text.partition(":")
        tau = float(tau) if tau else 0.0
        if not -1.0 < tau < 1.0:
            raise ValueError(f"threshold level must lie in (-1, 1), got {tau}")
        return "threshold", tau
    if text not in ("none", "erode1", "dilate1"):
        raise ValueError(f"unknown prior degradation {degrade!r}")
    return text, None


def make_prior(raters: RaterSet, degrade="none") -> Volume:
    """Weighted consensus of the signed rater volumes, optionally degraded."""
    mean = np.tensordot(raters.weights, raters.signed_stack(), axes=1)
    name, tau = parse_degrade(degrade)
    base = Volume(mean, raters.spacing, "label")
    if name == "none":
        return base
    if name == "threshold":
        return to_signed(BinaryMask(mean > tau, raters.spacing))
    fg = binarize(base).data
    if name == "erode1":
        fg = ndimage.binary_erosion(fg, structure=SIX_CONNECTED, border_value=0)
    else:
        fg = ndimage.binary_dilation(fg, structure=SIX_CONNECTED)
    return to_signed(BinaryMask(fg, raters.spacing))


def make_image(sdf: Volume) -> Volume:
    """Intensity stand-in: the SDF rescaled to [-1, 1], positive inside."""
    d = np.asarray(sdf.data, np.float64)
    scale = float(np.max(np.abs(d))) or 1.0
    return Volume(np.clip(-d / scale, -1.0, 1.0), sdf.spacing, "image")


@dataclass
class Case:
    case_id: str
    spec: ShapeSpec
    rater_model: RaterModel
    raters: RaterSet
    prior: Volume
    degrade: str = "none"
    image: Volume | None = None
    sdf: Volume | None = field(default=None, repr=False)


def make_case(case_id, spec: ShapeSpec, rater_model: RaterModel, degrade="none", image=False) -> Case:
    sdf = make_shape_sdf(spec)
    raters = make_raters(sdf, rater_model, min(spec.radii))
    prior = make_prior(raters, degrade)
    return Case(case_id, spec, rater_model, raters, prior, str(degrade), make_image(sdf) if image else None, sdf)


def default_specs(size: int = 24, seed: int = 0, spacing=(1.0, 1.0, 1.0)) -> list[ShapeSpec]:
    """Sphere, dumbbell and spiculated phantoms scaled to a cubic grid."""
    dims = (size, size, size)
    c = (size - 1) / 2.0
    r = size / 4.0
    lobe = size * 0.19
    gap = lobe + size * 0.23
    return [
        ShapeSpec("sphere", [(c, c, c)], [r], dims, spacing, seed=seed),
        ShapeSpec("dumbbell", [(c, c, c - gap / 2), (c, c, c + gap / 2)], [lobe, lobe], dims, spacing, seed=seed),
        ShapeSpec("spiculated", [(c, c, c)], [size * 0.2], dims, spacing, 6, size * 0.12, seed),
    ]


def default_suite(size=24, seed=0, offsets=(-1.0, 0.0, 1.0), degrade="none", image=False, spacing=(1.0, 1.0, 1.0)):
    model = RaterModel(tuple(offsets), seed=seed)
    return [make_case(spec.kind, spec, model, degrade, image) for spec in default_specs(size, seed, spacing)]


# --------------------------------------------------------------- dataset io


def write_case(case: Case, root) -> Path:
    out = Path(root) / case.case_id
    out.mkdir(parents=True, exist_ok=True)
    for k, m in enumerate(case.raters.masks):
        write_mask(m, out / f"rater_{k:02d}")
    write_volume(case.prior, out / "prior")
    if case.image is not None:
        write_volume(case.image, out / "image")
    meta = {
        "case_id": case.case_id,
        "spec": case.spec.to_dict(),
        "raters": case.rater_model.to_dict(),
        "weights": [float(w) for w in case.raters.weights],
        "degrade": case.degrade,
        "image": case.image is not None,
    }
    (out / "case.json").write_text(json.dumps(meta, indent=1) + "\n")
    return out


def read_case(path) -> Case:
    path = Path(path)
    meta = json.loads((path / "case.json").read_text())
    K = len(meta["raters"]["offsets"])
    masks = [read_mask(path / f"rater_{k:02d}") for k in range(K)]
    raters = RaterSet(masks, meta["weights"])
    prior = read_volume(path / "prior")
    image = read_volume(path / "image") if meta.get("image") else None
    rm = meta["raters"]
    model = RaterModel(tuple(rm["offsets"]), None if rm["weights"] is None else tuple(rm["weights"]), rm["modulation"], rm["seed"])
    return Case(meta["case_id"], ShapeSpec.from_dict(meta["spec"]), model, raters, prior, meta["degrade"], image)


def list_cases(root) -> list[Path]:
    return sorted(p.parent for p in Path(root).glob("*/case.json"))
