"""Dipole forward physics: kernel construction, field simulation, noise model.

The susceptibility-to-field map is the Fourier-diagonal convolution
``b = ifft3(D * fft3(chi))`` with the unit-dipole transfer function

    D(k) = 1/3 - (k . b0_hat)^2 / |k|^2,    D(0) := 0,

evaluated on physical frequency coordinates (cycles/mm via the voxel size).
``D(0) = 0`` fixes the mean-free field convention. The analytic external
field of a uniform sphere provides the independent validation oracle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError
from .volume import Volume3D, _check_dims, _check_voxel_size

IMAG_RESIDUE_TOL = 1e-10


def _unit(vec) -> tuple[float, float, float]:
    v = np.asarray(vec, dtype=np.float64)
    if v.shape != (3,):
        raise ValueError(f"b0_direction must be a 3-vector, got {vec!r}")
    n = float(np.linalg.norm(v))
    if n == 0.0 or not np.isfinite(n):
        raise ValueError("b0_direction must be a nonzero finite vector")
    return tuple(v / n)


@dataclass(frozen=True, eq=False)
class DipoleKernel:
    """Fourier-space dipole transfer function on a fixed grid.

    ``values`` is real, lies in [-2/3, 1/3], is zero at the DC bin, and is
    even under k -> -k, so the induced operator is self-adjoint.
    """

    values: np.ndarray
    b0_direction: tuple[float, float, float]
    voxel_size: tuple[float, float, float]

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64)
        _check_dims(arr.shape)
        arr = np.array(arr, copy=True, order="C")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)
        object.__setattr__(self, "voxel_size", _check_voxel_size(self.voxel_size))
        object.__setattr__(self, "b0_direction", _unit(self.b0_direction))
        if not np.all(np.isfinite(arr)):
            raise ValueError("dipole kernel has non-finite entries")
        if arr.flat[0] != 0.0:
            raise ValueError("dipole kernel must vanish at the zero-frequency bin")
        if arr.min() < -2.0 / 3.0 - 1e-12 or arr.max() > 1.0 / 3.0 + 1e-12:
            raise ValueError("dipole kernel values outside [-2/3, 1/3]")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.values.shape


@dataclass(frozen=True, eq=False)
class NoiseModel:
    """Per-voxel Gaussian field-noise standard deviation (ppm) plus a seed."""

    sigma: Volume3D
    seed: int = 0

    def __post_init__(self):
        if np.any(self.sigma.data <= 0.0):
            raise ValueError("noise sigma must be strictly positive everywhere")
        if not np.all(np.isfinite(1.0 / self.sigma.data)):
            raise ValueError("noise sigma too small: 1/sigma overflows")

    @classmethod
    def uniform(cls, dims, sigma0: float, seed: int = 0, voxel_size=(1.0, 1.0, 1.0)) -> "NoiseModel":
        return cls(Volume3D(np.full(dims, float(sigma0)), voxel_size), seed)


def build_dipole_kernel(dims, voxel_size, b0_direction=(0.0, 0.0, 1.0)) -> DipoleKernel:
    """Dipole transfer function for a grid of ``dims`` and ``voxel_size`` mm."""
    nx, ny, nz = _check_dims(dims)
    vs = _check_voxel_size(voxel_size)
    b0 = _unit(b0_direction)
    kx = np.fft.fftfreq(nx, d=vs[0])[:, None, None]
    ky = np.fft.fftfreq(ny, d=vs[1])[None, :, None]
    kz = np.fft.fftfreq(nz, d=vs[2])[None, None, :]
    k2 = kx**2 + ky**2 + kz**2
    proj = kx * b0[0] + ky * b0[1] + kz * b0[2]
    with np.errstate(divide="ignore", invalid="ignore"):
        d = 1.0 / 3.0 - proj**2 / k2
    d[0, 0, 0] = 0.0
    return DipoleKernel(d, b0, vs)


def _apply_kernel(arr: np.ndarray, kernel_values: np.ndarray) -> np.ndarray:
    """real(ifft(D * fft(x))) with a guard on the imaginary residue."""
    out = np.fft.ifftn(kernel_values * np.fft.fftn(arr))
    imag_norm = float(np.linalg.norm(out.imag))
    scale = float(np.linalg.norm(arr))
    if imag_norm > IMAG_RESIDUE_TOL * max(scale, 1e-300):
        raise NumericalError(
            f"forward field imaginary residue {imag_norm:.3e} exceeds "
            f"{IMAG_RESIDUE_TOL:.0e} of the signal norm {scale:.3e}"
        )
    return np.ascontiguousarray(out.real)


def forward_field(chi: Volume3D, kernel: DipoleKernel) -> Volume3D:
    """Noiseless local field induced by a susceptibility distribution."""
    if chi.dims != kernel.dims:
        raise ValueError(f"chi dims {chi.dims} do not match kernel dims {kernel.dims}")
    return Volume3D(_apply_kernel(chi.data.astype(np.float64), kernel.values), chi.voxel_size)


def sphere_analytic_field(dims, voxel_size, center, radius: float, delta_chi: float,
                          b0_direction=(0.0, 0.0, 1.0)) -> Volume3D:
    """Closed-form field of a uniform susceptibility sphere.

    Outside the sphere the field is ``(delta_chi/3) (a/r)^3 (3 cos^2 theta - 1)``
    with theta measured from the B0 axis; inside it is exactly zero (Lorentz
    convention). ``center`` and ``radius`` are in voxel units; the voxel size
    must be isotropic, since a voxel-space sphere is only a physical sphere
    on an isotropic grid. This closed form validates the FFT forward model
    and must never be computed from it.
    """
    nx, ny, nz = _check_dims(dims)
    vs = _check_voxel_size(voxel_size)
    if not (vs[0] == vs[1] == vs[2]):
        raise ValueError("sphere_analytic_field requires isotropic voxels")
    a = float(radius)
    if a <= 0:
        raise ValueError("radius must be positive")
    c = np.asarray(center, dtype=np.float64)
    if c.shape != (3,):
        raise ValueError("center must be a 3-vector in voxel coordinates")
    for axis, n in enumerate((nx, ny, nz)):
        if c[axis] - 2 * a < -0.5 or c[axis] + 2 * a > n - 0.5:
            raise ValueError("sphere must fit inside the volume with margin >= the radius")
    b0 = np.asarray(_unit(b0_direction))

    x = np.arange(nx, dtype=np.float64)[:, None, None] - c[0]
    y = np.arange(ny, dtype=np.float64)[None, :, None] - c[1]
    z = np.arange(nz, dtype=np.float64)[None, None, :] - c[2]
    r2 = x**2 + y**2 + z**2
    proj = x * b0[0] + y * b0[1] + z * b0[2]
    with np.errstate(divide="ignore", invalid="ignore"):
        cos2 = proj**2 / r2
        field = (delta_chi / 3.0) * (a**2 / r2) ** 1.5 * (3.0 * cos2 - 1.0)
    field[r2 <= a * a] = 0.0
    return Volume3D(field, vs)


def add_noise(b: Volume3D, noise: NoiseModel) -> Volume3D:
    """b plus zero-mean Gaussian noise with the model's per-voxel sigma; deterministic per seed."""
    if b.dims != noise.sigma.dims:
        raise ValueError(f"field dims {b.dims} do not match sigma dims {noise.sigma.dims}")
    rng = np.random.default_rng(noise.seed)
    eps = rng.standard_normal(b.dims)
    return b.with_data(b.data + noise.sigma.data * eps)


def likelihood_weight(noise: NoiseModel) -> Volume3D:
    """Elementwise W = 1/sigma, i.e. the inverse square root of the diagonal noise covariance.

    Squaring the weighted residual norm then reproduces the full
    inverse-covariance quadratic form exactly.
    """
    return noise.sigma.with_data(1.0 / noise.sigma.data)


def lesion_noise_sigma(chi_true: Volume3D, lesion_mask: np.ndarray, sigma0: float = 0.005,
                       alpha: float = 4.0) -> Volume3D:
    """Noise floor ``sigma0`` everywhere, scaled up inside lesions proportionally to |chi|.

    sigma(v) = sigma0 * (1 + alpha * |chi(v)| / max|chi|) on lesion voxels,
    sigma0 elsewhere; models the elevated field noise measured inside
    high-susceptibility lesions.
    """
    chi = np.abs(chi_true.data)
    peak = float(chi.max())
    sigma = np.full(chi_true.dims, float(sigma0))
    if peak > 0:
        inside = np.asarray(lesion_mask, dtype=bool)
        sigma[inside] *= 1.0 + alpha * chi[inside] / peak
    return Volume3D(sigma, chi_true.voxel_size)
