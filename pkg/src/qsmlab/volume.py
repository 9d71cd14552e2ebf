"""Dense 3D volumes, spectral transforms, discrete differential operators, and the ``.qvol`` format.

Conventions (used consistently by every module in the package):

* arrays have shape ``(nx, ny, nz)`` in C order, so the z index varies fastest;
* the forward FFT is unnormalized and the inverse carries the ``1/N`` factor
  (numpy's default ``norm="backward"``);
* ``grad`` is the forward finite difference with periodic boundary, matching the
  periodicity the FFT-based forward physics assumes, and ``div`` is its exact
  negative adjoint (backward difference);
* susceptibility and field values are in ppm, voxel sizes in mm.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import VolumeFormatError

AXIS_ORDER = "row-major-z-fastest"

_DTYPE_TAGS = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_REAL_DTYPES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}
_COMPLEX_DTYPES = {np.dtype(np.complex64): "f32", np.dtype(np.complex128): "f64"}

MASK_ROLES = ("tissue", "lesion", "edge-weight")

# Guard against index overflow in compiled kernels and FFT plans.
_MAX_VOXELS = 2**33


def _check_dims(shape) -> tuple[int, int, int]:
    if len(shape) != 3:
        raise ValueError(f"expected a 3D volume, got shape {tuple(shape)}")
    nx, ny, nz = (int(s) for s in shape)
    if min(nx, ny, nz) < 1:
        raise ValueError(f"degenerate dims {shape}")
    if nx * ny * nz > _MAX_VOXELS:
        raise ValueError(f"dims {shape} overflow the supported volume size")
    return nx, ny, nz


def _check_voxel_size(voxel_size) -> tuple[float, float, float]:
    vs = tuple(float(v) for v in voxel_size)
    if len(vs) != 3 or any(not np.isfinite(v) or v <= 0 for v in vs):
        raise ValueError(f"voxel_size must be three positive numbers, got {voxel_size}")
    return vs


@dataclass(frozen=True, eq=False)
class Volume3D:
    """Immutable real scalar field on a regular 3D grid.

    Values are ppm for susceptibility/field volumes and dimensionless for
    masks and weights. The array is copied on construction and frozen.
    """

    data: np.ndarray
    voxel_size: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        arr = np.array(self.data, copy=True, order="C")
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        _check_dims(arr.shape)
        if not np.all(np.isfinite(arr)):
            raise ValueError("volume contains non-finite values")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "voxel_size", _check_voxel_size(self.voxel_size))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def astype(self, dtype) -> "Volume3D":
        return Volume3D(self.data.astype(dtype), self.voxel_size)

    def with_data(self, data: np.ndarray) -> "Volume3D":
        """New volume with the same grid metadata."""
        return Volume3D(data, self.voxel_size)


@dataclass(frozen=True, eq=False)
class ComplexVolume3D:
    """Immutable complex field, e.g. the Fourier transform of a Volume3D."""

    data: np.ndarray
    voxel_size: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        arr = np.array(self.data, copy=True, order="C")
        if arr.dtype not in (np.complex64, np.complex128):
            arr = arr.astype(np.complex128)
        _check_dims(arr.shape)
        if not np.all(np.isfinite(arr)):
            raise ValueError("volume contains non-finite values")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "voxel_size", _check_voxel_size(self.voxel_size))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def real(self) -> Volume3D:
        return Volume3D(self.data.real, self.voxel_size)

    @property
    def imag(self) -> Volume3D:
        return Volume3D(self.data.imag, self.voxel_size)


@dataclass(frozen=True, eq=False)
class Mask:
    """Binary or [0,1]-weighted volume with a semantic role.

    ``tissue`` and ``lesion`` masks are strictly {0,1}; the ``edge-weight``
    role admits any value in [0,1] (it multiplies TV gradient components).
    """

    data: np.ndarray
    role: str = "tissue"
    voxel_size: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.role not in MASK_ROLES:
            raise ValueError(f"unknown mask role {self.role!r}; expected one of {MASK_ROLES}")
        arr = np.array(self.data, dtype=np.float64, copy=True, order="C")
        _check_dims(arr.shape)
        if self.role == "edge-weight":
            if arr.min() < 0.0 or arr.max() > 1.0:
                raise ValueError("edge-weight mask values must lie in [0, 1]")
        else:
            if not np.all((arr == 0.0) | (arr == 1.0)):
                raise ValueError(f"{self.role} mask must be exactly binary")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "voxel_size", _check_voxel_size(self.voxel_size))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    def as_volume(self) -> Volume3D:
        return Volume3D(self.data, self.voxel_size)


@dataclass(frozen=True)
class VolumeHeader:
    """JSON header of a ``.qvol`` file; round-trips byte-exactly."""

    dims: tuple[int, int, int]
    voxel_size_mm: tuple[float, float, float]
    dtype: str
    order: str = AXIS_ORDER
    role: str = "volume"
    complex: bool = False

    def to_dict(self) -> dict:
        d = {
            "dims": list(self.dims),
            "voxel_size_mm": list(self.voxel_size_mm),
            "dtype": self.dtype,
            "order": self.order,
            "role": self.role,
        }
        if self.complex:
            d["complex"] = True
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "VolumeHeader":
        try:
            return cls(
                dims=tuple(int(v) for v in d["dims"]),
                voxel_size_mm=tuple(float(v) for v in d["voxel_size_mm"]),
                dtype=str(d["dtype"]),
                order=str(d["order"]),
                role=str(d.get("role", "volume")),
                complex=bool(d.get("complex", False)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise VolumeFormatError(f"malformed .qvol header: {exc}") from exc


# ----------------------------------------------------------------------
# Spectral transforms
# ----------------------------------------------------------------------

def fft3(v: Volume3D | ComplexVolume3D) -> ComplexVolume3D:
    """Unnormalized forward 3D DFT."""
    if not np.all(np.isfinite(v.data)):
        raise ValueError("non-finite input to fft3")
    return ComplexVolume3D(np.fft.fftn(v.data), v.voxel_size)


def ifft3(v: ComplexVolume3D) -> ComplexVolume3D:
    """Inverse 3D DFT carrying the 1/N normalization."""
    return ComplexVolume3D(np.fft.ifftn(v.data), v.voxel_size)


# ----------------------------------------------------------------------
# Discrete gradient / divergence (periodic boundary)
# ----------------------------------------------------------------------

def _grad_arrays(a: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return (
        np.roll(a, -1, axis=0) - a,
        np.roll(a, -1, axis=1) - a,
        np.roll(a, -1, axis=2) - a,
    )


def _div_arrays(gx: np.ndarray, gy: np.ndarray, gz: np.ndarray) -> np.ndarray:
    # Backward difference: exact negative adjoint of _grad_arrays.
    return (
        gx - np.roll(gx, 1, axis=0)
        + gy - np.roll(gy, 1, axis=1)
        + gz - np.roll(gz, 1, axis=2)
    )


def grad(v: Volume3D) -> tuple[Volume3D, Volume3D, Volume3D]:
    """Forward finite differences per axis, periodic boundary, ppm/voxel."""
    if min(v.dims) < 2:
        raise ValueError(f"grad needs dims >= 2 along each axis, got {v.dims}")
    gx, gy, gz = _grad_arrays(v.data)
    return (v.with_data(gx), v.with_data(gy), v.with_data(gz))


def div(gx: Volume3D, gy: Volume3D, gz: Volume3D) -> Volume3D:
    """Discrete divergence; ``-div`` is the exact adjoint of ``grad``."""
    if not (gx.dims == gy.dims == gz.dims):
        raise ValueError("div components must share dims")
    return gx.with_data(_div_arrays(gx.data, gy.data, gz.data))


# ----------------------------------------------------------------------
# .qvol serialization
# ----------------------------------------------------------------------

def _qvol_base(path) -> Path:
    p = Path(path)
    if p.suffix == ".qvol":
        p = p.with_suffix("")
    return p


def _header_paths(path) -> tuple[Path, Path]:
    base = _qvol_base(path)
    return base.with_name(base.name + ".json"), base.with_name(base.name + ".bin")


def save_volume(v: Volume3D | ComplexVolume3D | Mask, path, role: str | None = None) -> VolumeHeader:
    """Write ``<path>.json`` + ``<path>.bin`` (little-endian, z fastest).

    Complex volumes are stored as interleaved (re, im) pairs. Returns the
    header that was written.
    """
    if isinstance(v, Mask):
        role = role or f"{v.role}-mask"
        v = v.as_volume()
    is_complex = isinstance(v, ComplexVolume3D)
    tag = (_COMPLEX_DTYPES if is_complex else _REAL_DTYPES)[v.data.dtype]
    header = VolumeHeader(
        dims=v.dims,
        voxel_size_mm=v.voxel_size,
        dtype=tag,
        role=role or "volume",
        complex=is_complex,
    )
    json_path, bin_path = _header_paths(path)
    json_path.parent.mkdir(parents=True, exist_ok=True)
    scalar = _DTYPE_TAGS[tag]
    if is_complex:
        payload = np.ascontiguousarray(v.data).view(v.data.real.dtype).astype(scalar, copy=False)
    else:
        payload = v.data.astype(scalar, copy=False)
    bin_path.write_bytes(np.ascontiguousarray(payload).tobytes())
    json_path.write_text(json.dumps(header.to_dict(), indent=2, sort_keys=True) + "\n")
    return header


def load_header(path) -> VolumeHeader:
    json_path, _ = _header_paths(path)
    try:
        raw = json.loads(json_path.read_text())
    except json.JSONDecodeError as exc:
        raise VolumeFormatError(f"{json_path}: invalid JSON header: {exc}") from exc
    header = VolumeHeader.from_dict(raw)
    if header.dtype not in _DTYPE_TAGS:
        raise VolumeFormatError(f"{json_path}: unknown dtype tag {header.dtype!r}")
    if header.order != AXIS_ORDER:
        raise VolumeFormatError(f"{json_path}: unsupported axis order {header.order!r}")
    _check_dims(header.dims)
    return header


def load_volume(path) -> Volume3D | ComplexVolume3D:
    """Read a ``.qvol`` pair; errors out rather than returning a partial volume."""
    header = load_header(path)
    _, bin_path = _header_paths(path)
    scalar = _DTYPE_TAGS[header.dtype]
    n = int(np.prod(header.dims)) * (2 if header.complex else 1)
    raw = bin_path.read_bytes()
    if len(raw) != n * scalar.itemsize:
        raise VolumeFormatError(
            f"{bin_path}: payload holds {len(raw)} bytes, header implies {n * scalar.itemsize}"
        )
    flat = np.frombuffer(raw, dtype=scalar)
    if header.complex:
        cdtype = np.complex64 if header.dtype == "f32" else np.complex128
        data = flat.astype(flat.dtype.newbyteorder("=")).view(cdtype).reshape(header.dims)
        return ComplexVolume3D(data, header.voxel_size_mm)
    data = flat.reshape(header.dims)
    return Volume3D(data, header.voxel_size_mm)


def load_mask(path, role: str | None = None) -> Mask:
    """Load a volume and validate it as a mask; role defaults to the header's."""
    header = load_header(path)
    vol = load_volume(path)
    if isinstance(vol, ComplexVolume3D):
        raise VolumeFormatError(f"{path}: masks cannot be complex")
    if role is None:
        role = header.role.removesuffix("-mask")
        if role not in MASK_ROLES:
            role = "edge-weight"
    return Mask(vol.data, role=role, voxel_size=vol.voxel_size)


def ones_mask(dims, voxel_size=(1.0, 1.0, 1.0), role: str = "tissue") -> Mask:
    return Mask(np.ones(dims), role=role, voxel_size=voxel_size)
