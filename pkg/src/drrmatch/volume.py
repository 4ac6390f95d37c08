"""Attenuation volumes: file I/O, air thresholding, mean pooling, phantoms.

A volume is a 3D grid of X-ray attenuation coefficients (mm^-1).  Axis 0 is
x, axis 1 is y, axis 2 is z; voxel (i, j, k) has its center at
``origin + spacing * (i, j, k)`` in world millimetres.  On disk the payload
is raw little-endian float32 with x varying fastest, described by a JSON
sidecar header.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from pathlib import Path

import numpy as np

from .errors import FormatError, ValidationError

log = logging.getLogger(__name__)

#: Linear attenuation coefficient of water at ~60 keV, mm^-1.  Used for the
#: HU -> mu conversion when a volume file declares units="HU".
MU_WATER = 0.02

#: Default air threshold (mm^-1) for :func:`threshold_air`.
DEFAULT_AIR_TAU = 1e-4

VOLUME_SCHEMA_VERSION = 1


@dataclasses.dataclass(frozen=True)
class Volume:
    """3D attenuation grid with spacing/origin metadata."""

    data: np.ndarray              # (nx, ny, nz), attenuation in mm^-1
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValidationError(f"volume data must be 3D, got shape {data.shape}")
        if any(s <= 0 for s in self.spacing):
            raise ValidationError(f"spacing must be positive, got {self.spacing}")
        bad = np.argwhere(~np.isfinite(data))
        if bad.size:
            raise ValidationError(f"non-finite attenuation at voxel {tuple(bad[0])}")
        bad = np.argwhere(data < 0)
        if bad.size:
            raise ValidationError(f"negative attenuation at voxel {tuple(bad[0])}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def spacing_arr(self) -> np.ndarray:
        return np.array(self.spacing)

    @property
    def origin_arr(self) -> np.ndarray:
        return np.array(self.origin)

    @property
    def center(self) -> np.ndarray:
        """World position of the volume center (mm)."""
        return self.origin_arr + self.spacing_arr * (np.array(self.dims) - 1) / 2.0

    @property
    def half_diagonal(self) -> float:
        """Half the world-space diagonal of the voxel bounding box (mm)."""
        extent = self.spacing_arr * np.array(self.dims)
        return float(np.linalg.norm(extent) / 2.0)


@dataclasses.dataclass(frozen=True)
class VoxelMask:
    """Boolean per-voxel mask (True = non-air)."""

    bits: np.ndarray              # (nx, ny, nz) bool

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.bits.shape

    def indices(self) -> np.ndarray:
        """(M, 3) integer indices of the set voxels."""
        return np.argwhere(self.bits)


# ---------------------------------------------------------------------------
# file I/O


def _sidecar(path) -> Path:
    return Path(str(path) + ".json")


def save_volume(vol: Volume, path) -> None:
    """Write raw f32le payload at ``path`` plus a JSON sidecar ``path + ".json"``."""
    path = Path(path)
    header = {
        "version": VOLUME_SCHEMA_VERSION,
        "dims": list(vol.dims),
        "spacing_mm": list(vol.spacing),
        "origin_mm": list(vol.origin),
        "units": "mu",
        "dtype": "f32le",
    }
    _sidecar(path).write_text(json.dumps(header, sort_keys=True, indent=2) + "\n")
    path.write_bytes(vol.data.astype("<f4").ravel(order="F").tobytes())


def load_volume(path) -> Volume:
    """Load a volume; HU payloads are converted to attenuation via the water model."""
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"volume payload not found: {path}")
    side = _sidecar(path)
    if not side.exists():
        raise ValidationError(f"volume sidecar not found: {side}")
    try:
        header = json.loads(side.read_text())
        dims = tuple(int(d) for d in header["dims"])
        spacing = tuple(float(s) for s in header["spacing_mm"])
        origin = tuple(float(o) for o in header.get("origin_mm", (0, 0, 0)))
        units = header["units"]
        dtype = header["dtype"]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise FormatError(f"malformed volume header {side}: {e}") from e
    if dtype != "f32le":
        raise FormatError(f"unsupported dtype {dtype!r} in {side}")
    if units not in ("mu", "HU"):
        raise FormatError(f"unsupported units {units!r} in {side}")
    raw = np.frombuffer(path.read_bytes(), dtype="<f4")
    n = int(np.prod(dims))
    if raw.size != n:
        raise FormatError(
            f"payload size mismatch in {path}: header declares {n} voxels, got {raw.size}"
        )
    data = raw.astype(np.float64).reshape(dims, order="F")
    bad = np.argwhere(~np.isfinite(data))
    if bad.size:
        raise FormatError(f"non-finite value at voxel {tuple(bad[0])} in {path}")
    if units == "HU":
        data = np.maximum(MU_WATER * (1.0 + data / 1000.0), 0.0)
    return Volume(data=data, spacing=spacing, origin=origin)


# ---------------------------------------------------------------------------
# basic operations


def threshold_air(vol: Volume, tau: float = DEFAULT_AIR_TAU) -> VoxelMask:
    """Mark voxels with attenuation strictly above ``tau`` as non-air."""
    if tau < 0:
        raise ValidationError(f"air threshold must be >= 0, got {tau}")
    return VoxelMask(bits=vol.data > tau)


def downsample(vol: Volume, k: int) -> Volume:
    """Mean-pool the volume by an integer factor ``k`` per axis.

    Dims that do not divide ``k`` are zero-padded at the high end first
    (zero is air, so correspondences are unaffected).  Spacing is multiplied
    by ``k`` and the origin shifted so world placement is preserved.
    """
    if k < 1:
        raise ValidationError(f"downsample factor must be >= 1, got {k}")
    if k == 1:
        return vol
    dims = np.array(vol.dims)
    padded = ((dims + k - 1) // k) * k
    data = vol.data
    if np.any(padded != dims):
        pad = [(0, int(p - d)) for p, d in zip(padded, dims)]
        data = np.pad(data, pad)
    nx, ny, nz = (padded // k).astype(int)
    pooled = data.reshape(nx, k, ny, k, nz, k).mean(axis=(1, 3, 5))
    new_spacing = tuple(s * k for s in vol.spacing)
    # coarse voxel (0,0,0) center = centroid of the first k^3 fine block
    new_origin = tuple(o + s * (k - 1) / 2.0 for o, s in zip(vol.origin, vol.spacing))
    return Volume(data=pooled, spacing=new_spacing, origin=new_origin)


def crop_volume(vol: Volume, fraction, anchor) -> Volume:
    """Contiguous sub-volume of per-axis size ``round(dim * fraction)``.

    ``anchor`` is the integer index of the retained low corner; the origin is
    updated so retained voxel centers keep their world coordinates.
    """
    fraction = np.broadcast_to(np.asarray(fraction, dtype=float), (3,))
    if np.any(fraction <= 0) or np.any(fraction > 1):
        raise ValidationError(f"crop fraction must be in (0, 1], got {fraction}")
    dims = np.array(vol.dims)
    size = np.maximum(1, np.round(dims * fraction).astype(int))
    anchor = np.asarray(anchor, dtype=int)
    if np.any(anchor < 0) or np.any(anchor + size > dims):
        raise ValidationError(f"crop anchor {anchor} with size {size} exceeds dims {dims}")
    sl = tuple(slice(int(a), int(a + s)) for a, s in zip(anchor, size))
    new_origin = tuple(o + s * int(a) for o, s, a in zip(vol.origin, vol.spacing, anchor))
    return Volume(data=vol.data[sl].copy(), spacing=vol.spacing, origin=new_origin)


# ---------------------------------------------------------------------------
# procedural phantoms


@dataclasses.dataclass(frozen=True)
class Primitive:
    shape: str                    # sphere | box | cylinder
    center: tuple[float, float, float]   # mm, world coordinates
    size: tuple[float, ...]       # sphere: (r,); box: (sx, sy, sz); cylinder: (r, h)
    attenuation: float            # mm^-1
    axis: str = "z"               # cylinder axis

    def __post_init__(self):
        if self.shape not in ("sphere", "box", "cylinder"):
            raise ValidationError(f"unknown primitive shape {self.shape!r}")
        if self.attenuation < 0:
            raise ValidationError("primitive attenuation must be >= 0")
        if self.axis not in ("x", "y", "z"):
            raise ValidationError(f"cylinder axis must be x|y|z, got {self.axis!r}")


@dataclasses.dataclass(frozen=True)
class Anomaly:
    center: tuple[float, float, float]
    radius: float
    attenuation_delta: float

    def __post_init__(self):
        if self.radius <= 0:
            raise ValidationError("anomaly radius must be > 0")


@dataclasses.dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    primitives: tuple[Primitive, ...]
    anomaly: Anomaly | None = None
    seed: int = 0
    labeled: bool = False         # True when the spec file declared an anomaly field

    def __post_init__(self):
        if not self.primitives:
            raise ValidationError("phantom spec needs at least one primitive")

    @property
    def label(self) -> int | None:
        if not self.labeled:
            return None
        return int(self.anomaly is not None)


def phantom_spec_from_dict(d: dict) -> PhantomSpec:
    try:
        prims = tuple(
            Primitive(
                shape=p["shape"],
                center=tuple(p["center"]),
                size=tuple(p["size"]),
                attenuation=float(p["attenuation"]),
                axis=p.get("axis", "z"),
            )
            for p in d["primitives"]
        )
        anomaly = None
        labeled = "anomaly" in d
        if d.get("anomaly") is not None:
            a = d["anomaly"]
            anomaly = Anomaly(
                center=tuple(a["center"]),
                radius=float(a["radius"]),
                attenuation_delta=float(a["attenuation_delta"]),
            )
        return PhantomSpec(
            dims=tuple(int(x) for x in d["dims"]),
            spacing=tuple(float(x) for x in d["spacing"]),
            primitives=prims,
            anomaly=anomaly,
            seed=int(d.get("seed", 0)),
            labeled=labeled,
        )
    except (KeyError, TypeError) as e:
        raise FormatError(f"malformed phantom spec: {e}") from e


def phantom_spec_to_dict(spec: PhantomSpec) -> dict:
    d = {
        "dims": list(spec.dims),
        "spacing": list(spec.spacing),
        "primitives": [
            {
                "shape": p.shape,
                "center": list(p.center),
                "size": list(p.size),
                "attenuation": p.attenuation,
                "axis": p.axis,
            }
            for p in spec.primitives
        ],
        "seed": spec.seed,
    }
    if spec.labeled:
        d["anomaly"] = None
    if spec.anomaly is not None:
        d["anomaly"] = {
            "center": list(spec.anomaly.center),
            "radius": spec.anomaly.radius,
            "attenuation_delta": spec.anomaly.attenuation_delta,
        }
    return d


def load_phantom_spec(path) -> PhantomSpec:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"phantom spec not found: {path}")
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"malformed JSON in {path} at line {e.lineno} column {e.colno}") from e
    return phantom_spec_from_dict(d)


def _primitive_mask(prim: Primitive, X, Y, Z) -> np.ndarray:
    cx, cy, cz = prim.center
    if prim.shape == "sphere":
        (r,) = prim.size
        return (X - cx) ** 2 + (Y - cy) ** 2 + (Z - cz) ** 2 <= r * r
    if prim.shape == "box":
        sx, sy, sz = prim.size
        return (
            (np.abs(X - cx) <= sx / 2)
            & (np.abs(Y - cy) <= sy / 2)
            & (np.abs(Z - cz) <= sz / 2)
        )
    r, h = prim.size
    ax = {"x": (Y, Z, X, cy, cz, cx), "y": (X, Z, Y, cx, cz, cy), "z": (X, Y, Z, cx, cy, cz)}
    A, B, C, ca, cb, cc = ax[prim.axis]
    return ((A - ca) ** 2 + (B - cb) ** 2 <= r * r) & (np.abs(C - cc) <= h / 2)


def _primitive_bounds(prim: Primitive) -> tuple[np.ndarray, np.ndarray]:
    c = np.array(prim.center)
    if prim.shape == "sphere":
        half = np.full(3, prim.size[0])
    elif prim.shape == "box":
        half = np.array(prim.size) / 2
    else:
        r, h = prim.size
        half = {"x": (h / 2, r, r), "y": (r, h / 2, r), "z": (r, r, h / 2)}[prim.axis]
        half = np.array(half)
    return c - half, c + half


def make_phantom(spec: PhantomSpec) -> Volume:
    """Rasterize a phantom spec: voxel value = max over primitives containing
    the voxel center, plus the anomaly delta inside the anomaly sphere."""
    dims = spec.dims
    spacing = np.array(spec.spacing)
    xs = np.arange(dims[0]) * spacing[0]
    ys = np.arange(dims[1]) * spacing[1]
    zs = np.arange(dims[2]) * spacing[2]
    X, Y, Z = np.meshgrid(xs, ys, zs, indexing="ij")
    lo_world = np.zeros(3) - spacing / 2
    hi_world = spacing * np.array(dims) - spacing / 2
    data = np.zeros(dims)
    for prim in spec.primitives:
        lo, hi = _primitive_bounds(prim)
        if np.any(lo < lo_world) or np.any(hi > hi_world):
            log.warning("primitive %s extends outside volume bounds; clipped", prim.shape)
        mask = _primitive_mask(prim, X, Y, Z)
        data = np.maximum(data, np.where(mask, prim.attenuation, 0.0))
    if spec.anomaly is not None:
        a = spec.anomaly
        mask = (X - a.center[0]) ** 2 + (Y - a.center[1]) ** 2 + (Z - a.center[2]) ** 2 <= a.radius**2
        data = np.maximum(data + np.where(mask, a.attenuation_delta, 0.0), 0.0)
    return Volume(data=data, spacing=tuple(spec.spacing))
