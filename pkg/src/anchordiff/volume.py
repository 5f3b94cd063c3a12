"""3D grid carriers, binarization and the VDV1 on-disk format.

Label volumes live in the continuous [-1, 1] convention; binary semantics
only appear at metric boundaries via :func:`binarize`.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = "VDV1"
KINDS = ("label", "noise", "image")


class VolumeFormatError(ValueError):
    """Raised when a VDV1 sidecar or payload is malformed."""


class GridMismatchError(ValueError):
    """Raised when two volumes that must share a grid do not."""


def _check_spacing(spacing) -> tuple[float, float, float]:
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3:
        raise ValueError(f"spacing must have 3 components, got {len(spacing)}")
    if not all(np.isfinite(s) and s > 0 for s in spacing):
        raise ValueError(f"invalid spacing {spacing}: all components must be > 0")
    return spacing


@dataclass(frozen=True, eq=False)
class Volume:
    """Dense 3D scalar field with voxel spacing in millimetres.

    ``data`` is indexed ``[z, y, x]`` and is stored read-only; the flat
    row-major index is ``(z * H + y) * W + x``.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    kind: str = "label"

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"volume data must be a non-empty 3D array, got shape {data.shape}")
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float64)
        if data.flags.writeable:
            data = data.copy()
            data.flags.writeable = False
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    def like(self, data, kind: str | None = None) -> "Volume":
        """New volume on the same grid."""
        return Volume(data, self.spacing, self.kind if kind is None else kind)

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return (
            self.dims == other.dims
            and self.spacing == other.spacing
            and self.kind == other.kind
            and np.array_equal(self.data, other.data)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class BinaryMask:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=bool)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"mask data must be a non-empty 3D array, got shape {data.shape}")
        if data.flags.writeable:
            data = data.copy()
            data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    @property
    def count(self) -> int:
        return int(self.data.sum())

    def __eq__(self, other):
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return self.spacing == other.spacing and np.array_equal(self.data, other.data)

    __hash__ = None


def flat_index(z: int, y: int, x: int, dims) -> int:
    D, H, W = dims
    if not (0 <= z < D and 0 <= y < H and 0 <= x < W):
        raise IndexError(f"({z}, {y}, {x}) outside grid {tuple(dims)}")
    return (z * H + y) * W + x


def check_same_grid(*items) -> None:
    """Require identical dims and spacing across volumes/masks (``None`` skipped)."""
    items = [it for it in items if it is not None]
    if not items:
        return
    ref = items[0]
    for it in items[1:]:
        if it.dims != ref.dims or it.spacing != ref.spacing:
            raise GridMismatchError(
                f"grid mismatch: {ref.dims}@{ref.spacing} vs {it.dims}@{it.spacing}"
            )


def to_signed(mask: BinaryMask) -> Volume:
    """Map ``False -> -1`` and ``True -> +1``."""
    return Volume(np.where(mask.data, 1.0, -1.0), mask.spacing, "label")


def binarize(v: Volume) -> BinaryMask:
    """Foreground iff value > 0 (strict)."""
    return BinaryMask(np.asarray(v.data) > 0, v.spacing)


class RaterSet:
    """K expert masks on one grid with normalized weights.

    Weights default to uniform; they are renormalized to sum to one.
    """

    def __init__(self, masks, weights=None):
        masks = list(masks)
        if not masks:
            raise ValueError("a rater set needs at least one mask")
        check_same_grid(*masks)
        if weights is None:
            w = np.full(len(masks), 1.0 / len(masks))
        else:
            w = np.asarray(weights, dtype=np.float64)
            if w.shape != (len(masks),) or np.any(~np.isfinite(w)) or np.any(w < 0) or w.sum() <= 0:
                raise ValueError(f"invalid rater weights {weights!r}")
            w = w / w.sum()
        w.flags.writeable = False
        self.masks = tuple(masks)
        self.weights = w

    def __len__(self):
        return len(self.masks)

    @property
    def dims(self):
        return self.masks[0].dims

    @property
    def spacing(self):
        return self.masks[0].spacing

    def signed_stack(self) -> np.ndarray:
        """``(K, D, H, W)`` float64 array of signed rater volumes."""
        return np.stack([np.where(m.data, 1.0, -1.0) for m in self.masks])

    def indicator_stack(self) -> np.ndarray:
        return np.stack([m.data for m in self.masks])


# ---------------------------------------------------------------- VDV1 I/O


def _paths(path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".json", ".f32"):
        p = p.with_suffix("")
    return p.with_name(p.name + ".json"), p.with_name(p.name + ".f32")


def write_volume(v: Volume, path) -> None:
    """Write ``<path>.json`` + ``<path>.f32``.

    Scalars are stored as little-endian float32, so only float32-representable
    data survives a round trip bit-for-bit.
    """
    if v.kind == "label" and not np.all(np.isfinite(v.data)):
        raise VolumeFormatError("label volume contains non-finite values")
    json_path, raw_path = _paths(path)
    json_path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "magic": MAGIC,
        "dims": list(v.dims),
        "spacing": list(v.spacing),
        "dtype": "f32",
        "order": "zyx-row-major",
        "kind": v.kind,
    }
    raw_path.write_bytes(np.ascontiguousarray(v.data, dtype="<f4").tobytes())
    json_path.write_text(json.dumps(header, indent=1) + "\n")


def write_mask(m: BinaryMask, path) -> None:
    write_volume(to_signed(m), path)


def read_header(path) -> dict:
    json_path, _ = _paths(path)
    try:
        header = json.loads(Path(json_path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise VolumeFormatError(f"cannot read header {json_path}: {exc}") from exc
    if not isinstance(header, dict) or header.get("magic") != MAGIC:
        raise VolumeFormatError(f"{json_path}: bad magic")
    if header.get("dtype") != "f32" or header.get("order") != "zyx-row-major":
        raise VolumeFormatError(f"{json_path}: unsupported dtype/order")
    if header.get("kind") not in KINDS:
        raise VolumeFormatError(f"{json_path}: unknown kind {header.get('kind')!r}")
    dims = header.get("dims")
    if (
        not isinstance(dims, list)
        or len(dims) != 3
        or not all(isinstance(d, int) and not isinstance(d, bool) and d > 0 for d in dims)
    ):
        raise VolumeFormatError(f"{json_path}: dims must be 3 positive integers, got {dims!r}")
    spacing = header.get("spacing")
    if not isinstance(spacing, list) or len(spacing) != 3:
        raise VolumeFormatError(f"{json_path}: spacing must have 3 entries")
    try:
        _check_spacing(spacing)
    except (TypeError, ValueError) as exc:
        raise VolumeFormatError(f"{json_path}: {exc}") from exc
    return header


def read_volume(path) -> Volume:
    header = read_header(path)
    _, raw_path = _paths(path)
    raw = Path(raw_path).read_bytes()
    D, H, W = header["dims"]
    n = D * H * W
    if len(raw) != 4 * n:
        raise VolumeFormatError(
            f"{raw_path}: size mismatch, header needs {n} scalars, payload has {len(raw) / 4:g}"
        )
    data = np.frombuffer(raw, dtype="<f4").reshape(D, H, W)
    if header["kind"] == "label" and not np.all(np.isfinite(data)):
        raise VolumeFormatError(f"{raw_path}: non-finite values in label volume")
    return Volume(data.astype(np.float32), tuple(header["spacing"]), header["kind"])


def read_mask(path) -> BinaryMask:
    return binarize(read_volume(path))


def exists(path) -> bool:
    json_path, raw_path = _paths(path)
    return os.path.exists(json_path) and os.path.exists(raw_path)
