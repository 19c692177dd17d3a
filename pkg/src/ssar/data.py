"""Volume I/O, per-subject preprocessing, slicing, manifests and synthetic phantoms.

On disk a volume is a raw little-endian float32 file plus a JSON sidecar of
the same stem (``sub-001.raw`` / ``sub-001.json``).  Voxel ``(x, y, z)`` is
stored at flat index ``x + X*(y + Y*z)``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

MAX_AGE_YEARS = 120.0
SPLITS = ("train", "test")
MANIFEST_HEADER = ["subject_id", "volume_path", "age_years", "cohort", "split"]


class DataError(ValueError):
    """Bad input data: malformed files, degenerate volumes, invalid manifests."""


@dataclass
class Volume:
    voxels: np.ndarray  # float32, shape (X, Y, Z)
    age_years: float
    subject_id: str = ""
    site: str = ""
    cohort: str = ""

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.float32)
        if self.voxels.ndim != 3:
            raise DataError(f"volume must be 3D, got shape {self.voxels.shape}")
        if not 0 <= self.age_years <= MAX_AGE_YEARS:
            raise DataError(f"age {self.age_years} outside [0, {MAX_AGE_YEARS}]")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.voxels.shape


@dataclass(frozen=True)
class PipelineConfig:
    axis: int = 2
    target_hw: tuple[int, int] = (50, 50)
    n_slices: int = 36
    normalize_by: str = "std"

    def __post_init__(self):
        if self.axis not in (0, 1, 2):
            raise ValueError(f"axis must be 0, 1 or 2, got {self.axis}")
        if self.normalize_by not in ("std", "variance"):
            raise ValueError(f"normalize_by must be 'std' or 'variance', got {self.normalize_by!r}")
        if self.n_slices < 1 or min(self.target_hw) < 1:
            raise ValueError("n_slices and target_hw must be positive")


@dataclass
class SliceSequence:
    slices: np.ndarray  # [n, 1, H, W]
    subject_id: str
    age_years: float


# preprocessing ----------------------------------------------------------------------


def normalize(volume: Volume, by: str = "std") -> Volume:
    """Per-subject standardization: subtract the mean, divide by the std (or variance)."""
    v = volume.voxels.astype(np.float64)
    mean = v.mean()
    var = v.var()
    if not var > 0:
        raise DataError(f"degenerate volume {volume.subject_id!r}: zero variance")
    if by == "std":
        out = (v - mean) / math.sqrt(var)
    elif by == "variance":
        out = (v - mean) / var
    else:
        raise ValueError(f"normalize_by must be 'std' or 'variance', got {by!r}")
    return replace(volume, voxels=out.astype(np.float32))


def bilinear_resize(img: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Bilinear resampling with pixel-center alignment and edge clamping."""
    h, w = img.shape
    th, tw = target
    if (h, w) == (th, tw):
        return img.copy()

    def axis_weights(n_src, n_dst):
        pos = (np.arange(n_dst) + 0.5) * (n_src / n_dst) - 0.5
        pos = np.clip(pos, 0, n_src - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_src - 1)
        return lo, hi, pos - lo

    r0, r1, fr = axis_weights(h, th)
    c0, c1, fc = axis_weights(w, tw)
    src = img.astype(np.float64)
    top = src[r0][:, c0] * (1 - fc) + src[r0][:, c1] * fc
    bot = src[r1][:, c0] * (1 - fc) + src[r1][:, c1] * fc
    return (top * (1 - fr)[:, None] + bot * fr[:, None]).astype(img.dtype)


def slice_indices(extent: int, n_out: int) -> np.ndarray:
    """``n_out`` equally spaced indices over ``[0, extent)`` (nearest index)."""
    if n_out > extent:
        raise DataError(f"cannot take {n_out} slices from an axis of extent {extent}")
    if n_out == 1:
        return np.array([(extent - 1) // 2])
    return np.floor(np.linspace(0, extent - 1, n_out) + 0.5).astype(int)


def slice_and_resize(volume: Volume, axis: int, target: tuple[int, int], n_out: int) -> SliceSequence:
    if axis not in (0, 1, 2):
        raise ValueError(f"axis must be 0, 1 or 2, got {axis}")
    idx = slice_indices(volume.dims[axis], n_out)
    target = tuple(int(t) for t in target)
    slices = [bilinear_resize(np.take(volume.voxels, int(i), axis=axis), target) for i in idx]
    arr = np.stack(slices)[:, None].astype(np.float32)
    return SliceSequence(arr, volume.subject_id, volume.age_years)


def prepare_sequence(volume: Volume, cfg: PipelineConfig) -> SliceSequence:
    """Normalize then slice: the model-ready ``[n, 1, H, W]`` input."""
    return slice_and_resize(normalize(volume, cfg.normalize_by), cfg.axis, cfg.target_hw, cfg.n_slices)


# volume files -----------------------------------------------------------------------


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def write_volume(volume: Volume, path) -> None:
    path = Path(path)
    header = {
        "dims": list(volume.dims),
        "dtype": "f32le",
        "age_years": volume.age_years,
        "subject_id": volume.subject_id,
        "site": volume.site,
        "cohort": volume.cohort,
    }
    path.write_bytes(volume.voxels.astype("<f4").ravel(order="F").tobytes())
    sidecar_path(path).write_text(json.dumps(header, indent=1) + "\n")


def read_volume(path) -> Volume:
    path = Path(path)
    side = sidecar_path(path)
    if not side.exists():
        raise DataError(f"missing header sidecar {side}")
    try:
        header = json.loads(side.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{side}: invalid JSON ({exc})") from exc
    if header.get("dtype") != "f32le":
        raise DataError(f"{side}: unknown dtype {header.get('dtype')!r}")
    dims = header.get("dims")
    if not (isinstance(dims, list) and len(dims) == 3 and all(isinstance(d, int) and d > 0 for d in dims)):
        raise DataError(f"{side}: dims must be three positive integers, got {dims!r}")
    raw = path.read_bytes()
    expected = 4 * dims[0] * dims[1] * dims[2]
    if len(raw) != expected:
        raise DataError(f"{path}: byte length {len(raw)} does not match dims {dims} ({expected} bytes)")
    vox = np.frombuffer(raw, dtype="<f4").reshape(dims, order="F")
    return Volume(
        voxels=vox.astype(np.float32),
        age_years=float(header.get("age_years", 0.0)),
        subject_id=str(header.get("subject_id", path.stem)),
        site=str(header.get("site", "")),
        cohort=str(header.get("cohort", "")),
    )


# manifests --------------------------------------------------------------------------


@dataclass
class ManifestRow:
    subject_id: str
    volume_path: str
    age_years: float
    cohort: str = ""
    split: str = ""


@dataclass
class Manifest:
    rows: list[ManifestRow] = field(default_factory=list)
    root: Path = Path(".")

    def __post_init__(self):
        ids = [r.subject_id for r in self.rows]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise DataError(f"duplicate subject ids in manifest: {dup}")
        for r in self.rows:
            if r.split not in SPLITS + ("",):
                raise DataError(f"invalid split label {r.split!r} for subject {r.subject_id}")

    def __len__(self) -> int:
        return len(self.rows)

    def split(self, name: str) -> list[ManifestRow]:
        return [r for r in self.rows if r.split == name]

    def resolve(self, row: ManifestRow) -> Path:
        p = Path(row.volume_path)
        return p if p.is_absolute() else self.root / p


def read_manifest(path, check_paths: bool = True) -> Manifest:
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != MANIFEST_HEADER:
            raise DataError(f"{path}: header must be {','.join(MANIFEST_HEADER)}, got {reader.fieldnames}")
        try:
            rows = [
                ManifestRow(r["subject_id"], r["volume_path"], float(r["age_years"]), r["cohort"], r["split"])
                for r in reader
            ]
        except ValueError as exc:
            raise DataError(f"{path}: {exc}") from exc
    manifest = Manifest(rows, root=path.parent)
    if check_paths:
        missing = [str(manifest.resolve(r)) for r in rows if not manifest.resolve(r).exists()]
        if missing:
            raise DataError(f"{path}: volume files not found: {missing[:5]}")
    return manifest


def write_manifest(manifest: Manifest, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for r in manifest.rows:
            w.writerow([r.subject_id, r.volume_path, repr(float(r.age_years)), r.cohort, r.split])


def split_manifest(manifest: Manifest, train_frac: float = 0.8, seed: int = 0) -> Manifest:
    """Assign ``floor(n * train_frac)`` subjects to train and the rest to test."""
    if not 0 < train_frac < 1:
        raise ValueError(f"train_frac must be in (0, 1), got {train_frac}")
    n = len(manifest)
    if n < 2:
        raise DataError("need at least 2 subjects to split")
    n_train = min(max(int(math.floor(n * train_frac + 1e-9)), 1), n - 1)
    perm = np.random.default_rng(seed).permutation(n)
    train = set(perm[:n_train].tolist())
    rows = [replace(r, split="train" if i in train else "test") for i, r in enumerate(manifest.rows)]
    return Manifest(rows, root=manifest.root)


# synthetic phantoms -----------------------------------------------------------------


def phantom_radii(age: float, dims, age_max: float) -> tuple[float, float, float]:
    """``(r_min, r_max, r)`` of the outer sphere for ``age``."""
    half = min(dims) / 2
    r_min, r_max = 0.15 * half, 0.9 * half
    return r_min, r_max, r_min + (age / age_max) * (r_max - r_min)


def generate_phantom(
    age: float,
    dims=(16, 16, 12),
    noise_sigma: float = 0.0,
    seed: int = 0,
    age_max: float = 6.0,
    subject_id: str = "",
) -> Volume:
    """Sphere whose radius (and inner-core brightness) grows linearly with age.

    Background 0, outer sphere 1, a concentric core at half radius with
    intensity ``1 + age/age_max``, plus Gaussian noise.
    """
    if not 0 <= age <= age_max:
        raise ValueError(f"age {age} outside [0, {age_max}]")
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < 8:
        raise ValueError(f"phantom dims must be three extents >= 8, got {dims}")
    _, _, r = phantom_radii(age, dims, age_max)
    grids = np.meshgrid(*(np.arange(d) - (d - 1) / 2 for d in dims), indexing="ij")
    dist = np.sqrt(sum(g * g for g in grids))
    vox = np.zeros(dims)
    vox[dist <= r] = 1.0
    vox[dist <= r / 2] = 1.0 + age / age_max
    if noise_sigma > 0:
        vox += np.random.default_rng(seed).normal(0.0, noise_sigma, size=dims)
    return Volume(vox, float(age), subject_id=subject_id, site="synthetic", cohort="phantom")


def generate_corpus(
    out_dir,
    count: int,
    age_max: float = 6.0,
    dims=(16, 16, 12),
    noise_sigma: float = 0.1,
    seed: int = 0,
    train_frac: float = 0.8,
) -> Manifest:
    """Write ``count`` phantoms with ages uniform in ``[0, age_max]`` and a split manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    ages = rng.uniform(0.0, age_max, size=count)
    noise_seeds = rng.integers(0, 2**31 - 1, size=count)
    rows = []
    width = max(3, len(str(count - 1)))
    for i, (age, s) in enumerate(zip(ages, noise_seeds)):
        sid = f"sub-{i:0{width}d}"
        vol = generate_phantom(float(age), dims, noise_sigma, int(s), age_max, subject_id=sid)
        write_volume(vol, out / f"{sid}.raw")
        rows.append(ManifestRow(sid, f"{sid}.raw", float(age), "phantom"))
    manifest = split_manifest(Manifest(rows, root=out), train_frac, seed)
    write_manifest(manifest, out / "manifest.csv")
    return manifest
