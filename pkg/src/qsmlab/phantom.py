"""Deterministic synthetic susceptibility phantoms and corpus generation.

Phantoms are sums of geometric primitives (spheres, axis-aligned cylinders,
cuboids) over a constant background, plus an optional band-limited Gaussian
texture. Geometry lives in voxel-index coordinates. Each generated case
carries a simulated noisy field so a corpus can feed training directly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .dipole import (DipoleKernel, NoiseModel, add_noise, build_dipole_kernel,
                     forward_field, lesion_noise_sigma)
from .errors import ConfigError
from .volume import Mask, Volume3D, load_mask, load_volume, ones_mask, save_volume

_SHAPES = ("sphere", "cylinder", "cuboid")
_AXES = {"x": 0, "y": 1, "z": 2}


@dataclass(frozen=True)
class TextureSpec:
    """Band-limited Gaussian texture: target std (ppm) and correlation length (voxels)."""

    amplitude: float = 0.0
    correlation_voxels: float = 4.0


@dataclass(frozen=True)
class Primitive:
    shape: str
    center: tuple[float, float, float]
    delta_chi: float
    radius: float = 0.0
    axis: str = "z"
    half_length: float = 0.0
    half_size: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def extents(self) -> tuple[float, float, float]:
        """Half-extent along each axis, in voxels."""
        if self.shape == "sphere":
            return (self.radius,) * 3
        if self.shape == "cylinder":
            ext = [self.radius] * 3
            ext[_AXES[self.axis]] = self.half_length
            return tuple(ext)
        if self.shape == "cuboid":
            return tuple(float(h) for h in self.half_size)
        raise ConfigError(f"unknown primitive shape {self.shape!r}")

    def to_dict(self) -> dict:
        d = {"shape": self.shape, "center": list(self.center), "delta_chi": self.delta_chi}
        if self.shape in ("sphere", "cylinder"):
            d["radius"] = self.radius
        if self.shape == "cylinder":
            d["axis"] = self.axis
            d["half_length"] = self.half_length
        if self.shape == "cuboid":
            d["half_size"] = list(self.half_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Primitive":
        try:
            return cls(
                shape=str(d["shape"]),
                center=tuple(float(v) for v in d["center"]),
                delta_chi=float(d["delta_chi"]),
                radius=float(d.get("radius", 0.0)),
                axis=str(d.get("axis", "z")),
                half_length=float(d.get("half_length", 0.0)),
                half_size=tuple(float(v) for v in d.get("half_size", (0, 0, 0))),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed primitive entry {d!r}: {exc}") from exc


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int]
    voxel_size: tuple[float, float, float] = (1.0, 1.0, 1.0)
    background_chi: float = 0.0
    primitives: tuple[Primitive, ...] = ()
    lesions: tuple[Primitive, ...] = ()
    texture: TextureSpec = field(default_factory=TextureSpec)
    seed: int = 0
    noise_sigma0: float = 0.005
    lesion_noise_alpha: float = 4.0
    # |delta_chi| bounds used when a corpus randomizes primitives.
    chi_abs_range: tuple[float, float] = (0.02, 0.15)
    b0_direction: tuple[float, float, float] = (0.0, 0.0, 1.0)

    def to_dict(self) -> dict:
        return {
            "dims": list(self.dims),
            "voxel_size_mm": list(self.voxel_size),
            "background_chi": self.background_chi,
            "primitives": [p.to_dict() for p in self.primitives],
            "lesions": [p.to_dict() for p in self.lesions],
            "texture": {"amplitude": self.texture.amplitude,
                        "correlation_voxels": self.texture.correlation_voxels},
            "seed": self.seed,
            "noise_sigma0": self.noise_sigma0,
            "lesion_noise_alpha": self.lesion_noise_alpha,
            "chi_abs_range": list(self.chi_abs_range),
            "b0_direction": list(self.b0_direction),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        try:
            tex = d.get("texture", {})
            return cls(
                dims=tuple(int(v) for v in d["dims"]),
                voxel_size=tuple(float(v) for v in d.get("voxel_size_mm", (1, 1, 1))),
                background_chi=float(d.get("background_chi", 0.0)),
                primitives=tuple(Primitive.from_dict(p) for p in d.get("primitives", [])),
                lesions=tuple(Primitive.from_dict(p) for p in d.get("lesions", [])),
                texture=TextureSpec(float(tex.get("amplitude", 0.0)),
                                    float(tex.get("correlation_voxels", 4.0))),
                seed=int(d.get("seed", 0)),
                noise_sigma0=float(d.get("noise_sigma0", 0.005)),
                lesion_noise_alpha=float(d.get("lesion_noise_alpha", 4.0)),
                chi_abs_range=tuple(float(v) for v in d.get("chi_abs_range", (0.02, 0.15))),
                b0_direction=tuple(float(v) for v in d.get("b0_direction", (0, 0, 1))),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed phantom spec: {exc}") from exc


def _validate_primitive(p: Primitive, dims, lesion: bool) -> None:
    if p.shape not in _SHAPES:
        raise ConfigError(f"unknown primitive shape {p.shape!r}")
    limit = 1.5 if lesion else 2.0
    if abs(p.delta_chi) > limit:
        kind = "lesion" if lesion else "primitive"
        raise ConfigError(f"{kind} |delta_chi|={abs(p.delta_chi)} exceeds {limit} ppm")
    for axis, (c, ext, n) in enumerate(zip(p.center, p.extents(), dims)):
        if c - ext < 0.0 or c + ext > n - 1.0:
            raise ConfigError(
                f"primitive {p.shape} at {p.center} (extent {ext:g}) leaves the "
                f"volume along axis {axis} (dim {n})"
            )


def _rasterize(p: Primitive, dims) -> np.ndarray:
    x = np.arange(dims[0], dtype=np.float64)[:, None, None] - p.center[0]
    y = np.arange(dims[1], dtype=np.float64)[None, :, None] - p.center[1]
    z = np.arange(dims[2], dtype=np.float64)[None, None, :] - p.center[2]
    if p.shape == "sphere":
        return (x**2 + y**2 + z**2) <= p.radius**2
    if p.shape == "cylinder":
        offsets = (x, y, z)
        ax = _AXES[p.axis]
        radial = sum(offsets[i] ** 2 for i in range(3) if i != ax)
        return (radial <= p.radius**2) & (np.abs(offsets[ax]) <= p.half_length)
    hx, hy, hz = p.half_size
    return (np.abs(x) <= hx) & (np.abs(y) <= hy) & (np.abs(z) <= hz)


def _band_limited_texture(dims, texture: TextureSpec, rng: np.random.Generator) -> np.ndarray:
    if texture.amplitude <= 0.0:
        return np.zeros(dims)
    if texture.correlation_voxels <= 0.0:
        raise ConfigError("texture correlation length must be positive")
    white = rng.standard_normal(dims)
    kx = np.fft.fftfreq(dims[0])[:, None, None]
    ky = np.fft.fftfreq(dims[1])[None, :, None]
    kz = np.fft.fftfreq(dims[2])[None, None, :]
    cutoff = 1.0 / (2.0 * texture.correlation_voxels)  # cycles/voxel
    keep = (kx**2 + ky**2 + kz**2) <= cutoff**2
    smooth = np.fft.ifftn(np.fft.fftn(white) * keep).real
    std = float(smooth.std())
    if std == 0.0:
        return np.zeros(dims)
    return smooth * (texture.amplitude / std)


def make_phantom(spec: PhantomSpec) -> tuple[Volume3D, Mask, Mask]:
    """Rasterize a spec into (chi, tissue mask, lesion mask); bit-deterministic per seed."""
    dims = tuple(int(d) for d in spec.dims)
    for p in spec.primitives:
        _validate_primitive(p, dims, lesion=False)
    for p in spec.lesions:
        _validate_primitive(p, dims, lesion=True)
    chi = np.full(dims, float(spec.background_chi))
    lesion = np.zeros(dims, dtype=bool)
    for p in spec.primitives:
        chi[_rasterize(p, dims)] += p.delta_chi
    for p in spec.lesions:
        inside = _rasterize(p, dims)
        chi[inside] += p.delta_chi
        lesion |= inside
    chi += _band_limited_texture(dims, spec.texture, np.random.default_rng(spec.seed))
    tissue = ones_mask(dims, spec.voxel_size)
    return (
        Volume3D(chi, spec.voxel_size),
        tissue,
        Mask(lesion.astype(np.float64), role="lesion", voxel_size=spec.voxel_size),
    )


# ----------------------------------------------------------------------
# Simulated cases and corpora
# ----------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PhantomCase:
    """One phantom with its simulated acquisition."""

    spec: PhantomSpec
    chi: Volume3D
    tissue_mask: Mask
    lesion_mask: Mask
    field: Volume3D
    noise: NoiseModel
    kernel: DipoleKernel


def simulate_case(spec: PhantomSpec, noise_seed: int | None = None,
                  kernel: DipoleKernel | None = None) -> PhantomCase:
    """Rasterize, run the dipole forward model, and add seeded noise.

    Lesion phantoms get the elevated in-lesion noise coupling; healthy
    phantoms use the uniform floor ``noise_sigma0``.
    """
    chi, tissue, lesion = make_phantom(spec)
    if kernel is None:
        kernel = build_dipole_kernel(spec.dims, spec.voxel_size, spec.b0_direction)
    clean = forward_field(chi, kernel)
    seed = spec.seed if noise_seed is None else noise_seed
    if np.any(lesion.data > 0):
        sigma = lesion_noise_sigma(chi, lesion.data > 0, spec.noise_sigma0,
                                   spec.lesion_noise_alpha)
    else:
        sigma = Volume3D(np.full(spec.dims, spec.noise_sigma0), spec.voxel_size)
    noise = NoiseModel(sigma, seed=seed)
    return PhantomCase(spec, chi, tissue, lesion, add_noise(clean, noise), noise, kernel)


def split_counts(n: int) -> tuple[int, int, int]:
    """(train, val, test) sizes: ~1/5 test, ~1/5 of the remainder val."""
    if n < 1:
        raise ConfigError("corpus size must be >= 1")
    n_test = max(1, int(round(n / 5))) if n >= 3 else (1 if n == 2 else 0)
    n_val = max(1, int(round((n - n_test) / 5))) if n - n_test >= 2 else 0
    return n - n_val - n_test, n_val, n_test


def _random_member_spec(base: PhantomSpec, rng: np.random.Generator, seed: int) -> PhantomSpec:
    dims = base.dims
    lo, hi = base.chi_abs_range
    r_hi = min(9.0, (min(dims) - 4) / 2.0)
    r_lo = min(3.0, r_hi / 2.0)
    prims = []

    def rand_center(ext):
        return tuple(float(rng.uniform(e, d - 1 - e)) for e, d in zip(ext, dims))

    for _ in range(int(rng.integers(3, 8))):
        r = float(rng.uniform(r_lo, r_hi))
        mag = float(rng.uniform(lo, hi)) * (1.0 if rng.random() < 0.5 else -1.0)
        prims.append(Primitive("sphere", rand_center((r, r, r)), mag, radius=r))
    for _ in range(int(rng.integers(0, 3))):
        axis = ("x", "y", "z")[int(rng.integers(0, 3))]
        r = float(rng.uniform(max(1.5, r_lo / 2), max(2.0, r_hi / 2)))
        hl = float(rng.uniform(3.0, max(3.5, dims[_AXES[axis]] / 4.0)))
        ext = [r, r, r]
        ext[_AXES[axis]] = hl
        mag = float(rng.uniform(lo, hi)) * (1.0 if rng.random() < 0.5 else -1.0)
        prims.append(Primitive("cylinder", rand_center(ext), mag, radius=r,
                               axis=axis, half_length=hl))
    for _ in range(int(rng.integers(0, 2))):
        half = tuple(float(rng.uniform(2.0, max(2.5, r_hi / 1.5))) for _ in range(3))
        mag = float(rng.uniform(lo, hi)) * (1.0 if rng.random() < 0.5 else -1.0)
        prims.append(Primitive("cuboid", rand_center(half), mag, half_size=half))
    return replace(base, primitives=tuple(prims), lesions=(), seed=seed)


@dataclass(frozen=True)
class MemberRecord:
    member_id: str
    split: str
    seed: int
    noise_seed: int
    lesion: bool
    paths: dict[str, str]
    max_abs_chi: float
    lesion_ratio: float | None = None

    def to_dict(self) -> dict:
        return {
            "id": self.member_id, "split": self.split, "seed": self.seed,
            "noise_seed": self.noise_seed, "lesion": self.lesion, "paths": dict(self.paths),
            "max_abs_chi": self.max_abs_chi, "lesion_ratio": self.lesion_ratio,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MemberRecord":
        return cls(d["id"], d["split"], int(d["seed"]), int(d["noise_seed"]),
                   bool(d["lesion"]), dict(d["paths"]), float(d["max_abs_chi"]),
                   d.get("lesion_ratio"))


@dataclass(frozen=True)
class CorpusManifest:
    root: Path
    seed: int
    dims: tuple[int, int, int]
    voxel_size: tuple[float, float, float]
    b0_direction: tuple[float, float, float]
    members: tuple[MemberRecord, ...]

    def members_in(self, split: str) -> tuple[MemberRecord, ...]:
        return tuple(m for m in self.members if m.split == split)

    def load(self, member: MemberRecord) -> dict:
        root = Path(self.root)
        out = {name: load_volume(root / rel) for name, rel in member.paths.items()
               if name not in ("tissue_mask", "lesion_mask")}
        out["tissue_mask"] = load_mask(root / member.paths["tissue_mask"], role="tissue")
        out["lesion_mask"] = load_mask(root / member.paths["lesion_mask"], role="lesion")
        out["noise"] = NoiseModel(out.pop("sigma"), seed=member.noise_seed)
        return out

    def save(self, path=None) -> Path:
        path = Path(path) if path is not None else Path(self.root) / "manifest.json"
        doc = {
            "kind": "qsmlab-corpus",
            "seed": self.seed,
            "dims": list(self.dims),
            "voxel_size_mm": list(self.voxel_size),
            "b0_direction": list(self.b0_direction),
            "members": [m.to_dict() for m in self.members],
        }
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        return path


def load_corpus(manifest_path) -> CorpusManifest:
    manifest_path = Path(manifest_path)
    try:
        doc = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{manifest_path}: invalid corpus manifest: {exc}") from exc
    if doc.get("kind") != "qsmlab-corpus":
        raise ConfigError(f"{manifest_path}: not a corpus manifest")
    return CorpusManifest(
        root=manifest_path.parent,
        seed=int(doc["seed"]),
        dims=tuple(int(v) for v in doc["dims"]),
        voxel_size=tuple(float(v) for v in doc["voxel_size_mm"]),
        b0_direction=tuple(float(v) for v in doc.get("b0_direction", (0, 0, 1))),
        members=tuple(MemberRecord.from_dict(m) for m in doc["members"]),
    )


def _write_case(case: PhantomCase, member_dir: Path) -> dict[str, str]:
    member_dir.mkdir(parents=True, exist_ok=True)
    save_volume(case.chi, member_dir / "chi", role="susceptibility")
    save_volume(case.field, member_dir / "field", role="local-field")
    save_volume(case.noise.sigma, member_dir / "sigma", role="noise-sigma")
    save_volume(case.tissue_mask, member_dir / "tissue_mask")
    save_volume(case.lesion_mask, member_dir / "lesion_mask")
    rel = member_dir.name
    return {name: f"{rel}/{name}.qvol"
            for name in ("chi", "field", "sigma", "tissue_mask", "lesion_mask")}


def make_corpus(n: int, base_spec: PhantomSpec, seed: int, out_dir) -> CorpusManifest:
    """Generate n randomized healthy phantoms with disjoint seeds and write them out.

    Member spec randomization draws primitive counts, geometry, and contrasts
    (within ``base_spec.chi_abs_range``) from a per-member generator, so
    members are reproducible individually and pairwise distinct.
    """
    if n < 1:
        raise ConfigError("corpus size must be >= 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n_train, n_val, n_test = split_counts(n)
    splits = ["train"] * n_train + ["val"] * n_val + ["test"] * n_test
    kernel = build_dipole_kernel(base_spec.dims, base_spec.voxel_size, base_spec.b0_direction)
    members = []
    for i in range(n):
        member_seed = int(np.random.default_rng([seed, i]).integers(0, 2**31 - 1))
        noise_seed = member_seed + 1
        spec = _random_member_spec(base_spec, np.random.default_rng([seed, i, 1]), member_seed)
        case = simulate_case(spec, noise_seed=noise_seed, kernel=kernel)
        member_id = f"m{i:03d}"
        paths = _write_case(case, out_dir / member_id)
        members.append(MemberRecord(
            member_id=member_id, split=splits[i], seed=member_seed, noise_seed=noise_seed,
            lesion=False, paths=paths, max_abs_chi=float(np.abs(case.chi.data).max()),
        ))
    manifest = CorpusManifest(out_dir, seed, base_spec.dims, base_spec.voxel_size,
                              base_spec.b0_direction, tuple(members))
    manifest.save()
    return manifest


def make_lesion_phantom(base_spec: PhantomSpec, lesion_primitives, seed: int) -> PhantomCase:
    """Out-of-distribution case: healthy background plus high-contrast lesions.

    Every lesion's |delta_chi| must exceed the healthy contrast ceiling by at
    least 3x; in-lesion noise is elevated by the |chi|-proportional coupling.
    """
    if isinstance(lesion_primitives, Primitive):
        lesion_primitives = (lesion_primitives,)
    lesion_primitives = tuple(lesion_primitives)
    if not lesion_primitives:
        raise ConfigError("make_lesion_phantom requires at least one lesion primitive")
    ceiling = float(base_spec.chi_abs_range[1])
    for p in lesion_primitives:
        if abs(p.delta_chi) < 3.0 * ceiling:
            raise ConfigError(
                f"lesion |delta_chi|={abs(p.delta_chi)} must be >= 3x the healthy "
                f"ceiling {ceiling}"
            )
    healthy = _random_member_spec(base_spec, np.random.default_rng([seed, 1]), seed)
    spec = replace(healthy, lesions=lesion_primitives)
    return simulate_case(spec, noise_seed=seed + 1)


def lesion_contrast_ratio(case: PhantomCase) -> float:
    """min lesion |delta_chi| over the healthy contrast ceiling; recorded in manifests."""
    ceiling = float(case.spec.chi_abs_range[1])
    return min(abs(p.delta_chi) for p in case.spec.lesions) / ceiling
