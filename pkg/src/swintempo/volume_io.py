"""On-disk volume/annotation formats, sphere rasterization and phantom generation.

A volume is stored as a pair of files sharing a stem::

    <name>.json   {"series_id": str, "shape": [Z, Y, X],
                   "spacing_mm": [sz, sy, sx], "origin_mm": [oz, oy, ox]}
    <name>.raw    little-endian float32, Z-major (z, then y, then x)

World coordinates follow ``world = origin + index * spacing`` per axis.
Annotations and candidates are always expressed in world millimetres with
the column order ``(x, y, z)``, while arrays are indexed ``[z, y, x]``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import FormatError, GenerationError, ValidationError

ANNOTATION_HEADER = ["series_id", "coord_x", "coord_y", "coord_z", "diameter_mm"]
_RAW_DTYPE = np.dtype("<f4")

# Phantom intensities in HU.
NODULE_HU = 0.0
LUNG_HU = -800.0
TISSUE_HU = 40.0


@dataclass
class CTVolume:
    series_id: str
    voxels: np.ndarray
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin_mm: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels)
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        self.origin_mm = tuple(float(o) for o in self.origin_mm)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.voxels.shape)

    def validate(self) -> "CTVolume":
        if self.voxels.ndim != 3 or min(self.voxels.shape) < 1:
            raise ValidationError(f"volume must be 3D with non-empty axes, got shape {self.voxels.shape}")
        if len(self.spacing_mm) != 3 or any(s <= 0 for s in self.spacing_mm):
            raise ValidationError(f"spacing must be three positive values, got {self.spacing_mm}")
        if len(self.origin_mm) != 3:
            raise ValidationError(f"origin must have three components, got {self.origin_mm}")
        if not np.all(np.isfinite(self.voxels)):
            raise ValidationError(f"volume {self.series_id!r} contains non-finite voxels")
        return self

    def with_voxels(self, voxels: np.ndarray) -> "CTVolume":
        """Copy of this volume's geometry holding new voxel data."""
        return CTVolume(self.series_id, voxels, self.spacing_mm, self.origin_mm)

    def voxel_to_world(self, zyx) -> np.ndarray:
        """Map (z, y, x) indices (possibly fractional) to world (x, y, z) mm."""
        zyx = np.asarray(zyx, dtype=np.float64)
        world_zyx = np.asarray(self.origin_mm) + zyx * np.asarray(self.spacing_mm)
        return world_zyx[..., ::-1].copy()

    def world_to_voxel(self, xyz) -> np.ndarray:
        """Map world (x, y, z) mm to fractional (z, y, x) indices."""
        xyz = np.asarray(xyz, dtype=np.float64)
        return (xyz[..., ::-1] - np.asarray(self.origin_mm)) / np.asarray(self.spacing_mm)


@dataclass(frozen=True)
class Annotation:
    series_id: str
    center_mm: tuple[float, float, float]
    diameter_mm: float

    def __post_init__(self):
        if not self.diameter_mm > 0:
            raise ValidationError(f"annotation diameter must be positive, got {self.diameter_mm}")

    @property
    def radius_mm(self) -> float:
        return self.diameter_mm / 2.0


@dataclass
class LungMask:
    mask: np.ndarray

    def __post_init__(self):
        self.mask = np.asarray(self.mask)
        if not np.all((self.mask == 0) | (self.mask == 1)):
            raise ValidationError("lung mask values must be 0 or 1")

    @property
    def shape(self):
        return tuple(self.mask.shape)


@dataclass
class PhantomConfig:
    n_volumes: int = 4
    shape: tuple[int, int, int] = (16, 64, 64)
    nodules_per_volume: tuple[int, int] = (1, 3)
    nodule_radius_mm: tuple[float, float] = (3.0, 6.0)
    noise_hu: float = 50.0
    spacing_mm: tuple[float, float, float] = (1.5, 1.0, 1.0)
    seed: int = 0
    max_retries: int = 1000
    series_prefix: str = "phantom"

    def validate(self) -> "PhantomConfig":
        lo, hi = self.nodules_per_volume
        rlo, rhi = self.nodule_radius_mm
        if self.n_volumes < 0:
            raise ValidationError("n_volumes must be non-negative")
        if lo < 0 or hi < lo:
            raise ValidationError(f"invalid nodules_per_volume range {self.nodules_per_volume}")
        if rlo <= 0 or rhi < rlo:
            raise ValidationError(f"invalid nodule_radius_mm range {self.nodule_radius_mm}")
        if len(self.shape) != 3 or min(self.shape) < 8:
            raise ValidationError(f"phantom shape components must be >= 8, got {self.shape}")
        if self.noise_hu < 0:
            raise ValidationError("noise amplitude must be non-negative")
        if any(s <= 0 for s in self.spacing_mm):
            raise ValidationError("spacing must be positive")
        return self


@dataclass
class Dataset:
    """Volumes, lung masks and annotations keyed by series id."""

    volumes: dict[str, CTVolume] = field(default_factory=dict)
    masks: dict[str, LungMask] = field(default_factory=dict)
    annotations: dict[str, list[Annotation]] = field(default_factory=dict)

    @classmethod
    def from_items(cls, items) -> "Dataset":
        """Build from ``(volume, mask, annotations)`` triples as returned by :func:`generate_phantom`."""
        ds = cls()
        for vol, mask, anns in items:
            ds.volumes[vol.series_id] = vol
            if mask is not None:
                ds.masks[vol.series_id] = mask
            ds.annotations[vol.series_id] = list(anns)
        return ds

    @property
    def series_ids(self) -> list[str]:
        return sorted(self.volumes)

    def annotation_list(self, series_ids: Iterable[str] | None = None) -> list[Annotation]:
        ids = self.series_ids if series_ids is None else list(series_ids)
        return [a for sid in ids for a in self.annotations.get(sid, [])]

    def subset(self, series_ids: Iterable[str]) -> "Dataset":
        ids = list(series_ids)
        return Dataset(
            {s: self.volumes[s] for s in ids},
            {s: self.masks[s] for s in ids if s in self.masks},
            {s: self.annotations.get(s, []) for s in ids},
        )


# --------------------------------------------------------------------------
# Volume files
# --------------------------------------------------------------------------


def _volume_paths(path) -> tuple[Path, Path]:
    path = Path(path)
    if path.suffix in (".json", ".raw"):
        path = path.with_suffix("")
    return path.with_name(path.name + ".json"), path.with_name(path.name + ".raw")


def read_volume(path) -> CTVolume:
    """Read a volume from its ``.json`` sidecar and ``.raw`` payload.

    ``path`` may name either file or their common stem.
    """
    meta_path, raw_path = _volume_paths(path)
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise FormatError(f"missing volume sidecar {meta_path}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"malformed volume sidecar {meta_path}: {exc}") from exc

    for key in ("series_id", "shape", "spacing_mm", "origin_mm"):
        if key not in meta:
            raise FormatError(f"volume sidecar {meta_path} lacks key {key!r}")
    shape = tuple(int(s) for s in meta["shape"])
    if len(shape) != 3 or min(shape) < 1:
        raise FormatError(f"volume sidecar {meta_path} has invalid shape {meta['shape']}")

    try:
        payload = raw_path.read_bytes()
    except FileNotFoundError as exc:
        raise FormatError(f"missing volume payload {raw_path}") from exc
    expected = math.prod(shape) * _RAW_DTYPE.itemsize
    if len(payload) != expected:
        raise FormatError(
            f"payload {raw_path} holds {len(payload)} bytes, shape {list(shape)} needs {expected}"
        )
    voxels = np.frombuffer(payload, dtype=_RAW_DTYPE).reshape(shape).astype(np.float32)
    vol = CTVolume(str(meta["series_id"]), voxels, tuple(meta["spacing_mm"]), tuple(meta["origin_mm"]))
    try:
        return vol.validate()
    except ValidationError as exc:
        raise FormatError(f"{meta_path}: {exc}") from exc


def write_volume(vol: CTVolume, path) -> None:
    vol.validate()
    meta_path, raw_path = _volume_paths(path)
    meta = {
        "series_id": vol.series_id,
        "shape": list(vol.shape),
        "spacing_mm": list(vol.spacing_mm),
        "origin_mm": list(vol.origin_mm),
    }
    data = np.ascontiguousarray(vol.voxels, dtype=_RAW_DTYPE)
    meta_path.parent.mkdir(parents=True, exist_ok=True)
    raw_path.write_bytes(data.tobytes(order="C"))
    meta_path.write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")


def read_mask(path) -> LungMask:
    return LungMask(read_volume(path).voxels.astype(np.uint8))


def write_mask(mask: LungMask, like: CTVolume, path) -> None:
    write_volume(like.with_voxels(mask.mask.astype(np.float32)), path)


# --------------------------------------------------------------------------
# Annotation tables
# --------------------------------------------------------------------------


def read_annotations(path) -> list[Annotation]:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ANNOTATION_HEADER:
            raise FormatError(f"{path}: expected header {','.join(ANNOTATION_HEADER)}, got {header}")
        out = []
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(ANNOTATION_HEADER):
                raise FormatError(f"{path}:{line}: expected {len(ANNOTATION_HEADER)} fields, got {len(row)}")
            try:
                x, y, z, d = (float(v) for v in row[1:])
            except ValueError as exc:
                raise FormatError(f"{path}:{line}: {exc}") from exc
            if not all(math.isfinite(v) for v in (x, y, z, d)):
                raise FormatError(f"{path}:{line}: non-finite value")
            if d <= 0:
                raise ValidationError(f"{path}:{line}: diameter_mm must be positive, got {d}")
            out.append(Annotation(row[0], (x, y, z), d))
    return out


def write_annotations(anns: Sequence[Annotation], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(ANNOTATION_HEADER)
        for a in anns:
            writer.writerow([a.series_id, *(repr(float(c)) for c in a.center_mm), repr(float(a.diameter_mm))])


def group_by_series(anns: Iterable[Annotation]) -> dict[str, list[Annotation]]:
    out: dict[str, list[Annotation]] = {}
    for a in anns:
        out.setdefault(a.series_id, []).append(a)
    return out


# --------------------------------------------------------------------------
# Rasterization
# --------------------------------------------------------------------------


def _sphere_into(out, value, shape, spacing_mm, origin_mm, center_xyz, radius_mm):
    """Set ``out`` to ``value`` where voxel centres lie within ``radius_mm`` of the centre."""
    spacing = np.asarray(spacing_mm, dtype=np.float64)
    origin = np.asarray(origin_mm, dtype=np.float64)
    center = np.asarray(center_xyz, dtype=np.float64)[::-1]
    lo = np.floor((center - radius_mm - origin) / spacing).astype(int)
    hi = np.ceil((center + radius_mm - origin) / spacing).astype(int) + 1
    lo = np.maximum(lo, 0)
    hi = np.minimum(hi, shape)
    if np.any(hi <= lo):
        return
    axes = [origin[i] + np.arange(lo[i], hi[i]) * spacing[i] - center[i] for i in range(3)]
    dz, dy, dx = np.meshgrid(*axes, indexing="ij")
    inside = dz * dz + dy * dy + dx * dx <= radius_mm * radius_mm
    region = out[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
    region[inside] = value


def rasterize_annotations(shape, spacing_mm, origin_mm, anns: Iterable[Annotation]) -> np.ndarray:
    """Binary [Z, Y, X] mask of the union of annotation spheres."""
    if any(s <= 0 for s in spacing_mm):
        raise ValidationError(f"spacing must be positive, got {spacing_mm}")
    shape = tuple(int(s) for s in shape)
    out = np.zeros(shape, dtype=np.uint8)
    for a in anns:
        _sphere_into(out, 1, shape, spacing_mm, origin_mm, a.center_mm, a.radius_mm)
    return out


# --------------------------------------------------------------------------
# Phantoms
# --------------------------------------------------------------------------


def _lung_lobes(shape, spacing_mm):
    """Two ellipsoids (left and right lung) as (center_zyx_mm, semi_axes_zyx_mm)."""
    extent = np.asarray(shape, dtype=np.float64) * np.asarray(spacing_mm)
    cz = extent[0] / 2.0
    cy = extent[1] / 2.0
    semi = np.array([extent[0] * 0.62, extent[1] * 0.38, extent[2] * 0.21])
    return [
        (np.array([cz, cy, extent[2] * 0.27]), semi),
        (np.array([cz, cy, extent[2] * 0.73]), semi),
    ]


def _lung_mask(shape, spacing_mm, lobes) -> np.ndarray:
    coords = [np.arange(n) * s for n, s in zip(shape, spacing_mm)]
    z, y, x = np.meshgrid(*coords, indexing="ij")
    mask = np.zeros(shape, dtype=np.uint8)
    for center, semi in lobes:
        d = ((z - center[0]) / semi[0]) ** 2 + ((y - center[1]) / semi[1]) ** 2 + ((x - center[2]) / semi[2]) ** 2
        mask[d <= 1.0] = 1
    return mask


def _place_nodules(rng, n, cfg, lobes, origin):
    placed: list[tuple[np.ndarray, float]] = []
    rlo, rhi = cfg.nodule_radius_mm
    for _ in range(n):
        for _attempt in range(cfg.max_retries):
            r = float(rng.uniform(rlo, rhi))
            center, semi = lobes[int(rng.integers(len(lobes)))]
            shrunk = semi - r - 1.0
            if np.any(shrunk <= 0):
                continue
            # uniform point in the shrunken ellipsoid
            u = rng.uniform(-1.0, 1.0, size=3)
            if float(np.dot(u, u)) > 1.0:
                continue
            c = center + u * shrunk
            if all(np.linalg.norm(c - pc) > r + pr + 1.0 for pc, pr in placed):
                placed.append((c, r))
                break
        else:
            raise GenerationError(
                f"could not place {n} non-overlapping nodules after {cfg.max_retries} retries"
            )
    return [(origin + c, r) for c, r in placed]


def generate_phantom(cfg: PhantomConfig) -> list[tuple[CTVolume, LungMask, list[Annotation]]]:
    """Synthetic CT volumes with known nodules.

    Each volume gets its own generator seeded by ``(seed, index)``, so
    volume ``i`` is identical no matter how many volumes are requested.
    """
    cfg.validate()
    shape = tuple(int(s) for s in cfg.shape)
    spacing = tuple(float(s) for s in cfg.spacing_mm)
    origin = np.zeros(3)
    lobes = _lung_lobes(shape, spacing)
    lung = _lung_mask(shape, spacing, lobes)
    out = []
    for i in range(cfg.n_volumes):
        rng = np.random.default_rng([cfg.seed, i])
        sid = f"{cfg.series_prefix}-{cfg.seed}-{i:03d}"
        lo, hi = cfg.nodules_per_volume
        n = int(rng.integers(lo, hi + 1))
        nodules = _place_nodules(rng, n, cfg, lobes, origin)

        vox = np.where(lung == 1, LUNG_HU, TISSUE_HU).astype(np.float64)
        anns = []
        for c_zyx, r in nodules:
            center_xyz = (float(c_zyx[2]), float(c_zyx[1]), float(c_zyx[0]))
            _sphere_into(vox, NODULE_HU, shape, spacing, origin, center_xyz, r)
            anns.append(Annotation(sid, center_xyz, 2.0 * r))
        vox += rng.normal(0.0, cfg.noise_hu, size=shape)
        vol = CTVolume(sid, vox.astype(np.float32), spacing, tuple(origin))
        out.append((vol, LungMask(lung.copy()), anns))
    return out


# --------------------------------------------------------------------------
# Dataset directories
# --------------------------------------------------------------------------


def save_dataset(items, root) -> Path:
    """Write ``(volume, mask, annotations)`` triples as a dataset directory.

    Layout: ``volumes/<sid>.{json,raw}``, ``masks/<sid>.{json,raw}``,
    ``annotations.csv``.
    """
    root = Path(root)
    all_anns = []
    for vol, mask, anns in items:
        write_volume(vol, root / "volumes" / vol.series_id)
        if mask is not None:
            write_mask(mask, vol, root / "masks" / vol.series_id)
        all_anns.extend(anns)
    write_annotations(all_anns, root / "annotations.csv")
    return root


def load_dataset(root) -> Dataset:
    root = Path(root)
    vol_dir = root / "volumes"
    if not vol_dir.is_dir():
        raise FormatError(f"{root} is not a dataset directory (no volumes/)")
    ds = Dataset()
    for meta in sorted(vol_dir.glob("*.json")):
        vol = read_volume(meta)
        ds.volumes[vol.series_id] = vol
        mask_path = root / "masks" / meta.name
        if mask_path.exists():
            mask = read_mask(mask_path)
            if mask.shape != vol.shape:
                raise FormatError(f"mask {mask_path} shape {mask.shape} != volume shape {vol.shape}")
            ds.masks[vol.series_id] = mask
    ann_path = root / "annotations.csv"
    anns = read_annotations(ann_path) if ann_path.exists() else []
    grouped = group_by_series(anns)
    for sid in ds.volumes:
        ds.annotations[sid] = grouped.get(sid, [])
    return ds
