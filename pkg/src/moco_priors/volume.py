"""Volume I/O, normalization, slicing, dataset manifests and synthetic phantoms."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

__all__ = [
    "Contrast",
    "Volume",
    "DatasetManifest",
    "VolumeIOError",
    "UnreadableFileError",
    "NonVolumeError",
    "UnknownDatatypeError",
    "InvalidVolumeError",
    "read_volume",
    "write_volume",
    "normalize",
    "extract_slices",
    "central_slice_range",
    "foreground_fraction",
    "split_subjects",
    "build_manifest",
    "parse_ixi_name",
    "generate_phantom",
]


class Contrast(str, Enum):
    T1 = "T1"
    T2 = "T2"
    PD = "PD"


class VolumeIOError(Exception):
    """Base class for volume reading/writing failures."""


class UnreadableFileError(VolumeIOError):
    pass


class NonVolumeError(VolumeIOError):
    pass


class UnknownDatatypeError(VolumeIOError):
    pass


class InvalidVolumeError(ValueError):
    pass


@dataclass(eq=False)
class Volume:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    contrast: Contrast = Contrast.T2
    subject_id: str = ""
    normalized: bool = False

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise InvalidVolumeError(f"volume data must be 3D, got shape {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(not s > 0 for s in self.spacing):
            raise InvalidVolumeError(f"spacing must be three positive values, got {self.spacing}")
        self.contrast = Contrast(self.contrast)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    def check(self) -> "Volume":
        """Raise InvalidVolumeError if the data violates the volume invariants."""
        if not np.all(np.isfinite(self.data)):
            raise InvalidVolumeError(f"volume {self.subject_id}/{self.contrast.value} has non-finite values")
        if self.normalized and self.data.size and (self.data.min() < 0 or self.data.max() > 1):
            raise InvalidVolumeError("normalized volume has values outside [0, 1]")
        return self

    def replace(self, **changes) -> "Volume":
        kw = dict(
            data=self.data,
            spacing=self.spacing,
            contrast=self.contrast,
            subject_id=self.subject_id,
            normalized=self.normalized,
        )
        kw.update(changes)
        return Volume(**kw)

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return (
            self.shape == other.shape
            and np.array_equal(self.data, other.data)
            and self.spacing == other.spacing
            and self.contrast == other.contrast
            and self.subject_id == other.subject_id
            and self.normalized == other.normalized
        )


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

_IXI_RE = re.compile(r"^(?P<subject>[A-Za-z0-9]+)-(?P<site>[A-Za-z0-9]+)-(?P<num>\d+)-(?P<contrast>T1|T2|PD)\.nii(\.gz)?$")


def parse_ixi_name(name: str) -> tuple[str, Contrast] | None:
    """Parse ``<SubjectID>-<Site>-<Num>-<Contrast>.nii(.gz)``; None if it does not match."""
    m = _IXI_RE.match(Path(name).name)
    if m is None:
        return None
    return m.group("subject"), Contrast(m.group("contrast"))


def _is_nifti(path: Path) -> bool:
    return path.name.endswith(".nii") or path.name.endswith(".nii.gz")


def _sidecar(path: Path) -> Path:
    return path.with_suffix(".json")


def read_volume(path, contrast=None, subject_id=None) -> Volume:
    """Read a NIfTI-1 image or a raw float32 array with its JSON sidecar header.

    Explicit ``contrast``/``subject_id`` override whatever the file records.
    """
    path = Path(path)
    if not path.is_file():
        raise UnreadableFileError(f"no such file: {path}")
    if _is_nifti(path):
        vol = _read_nifti(path, contrast, subject_id)
    elif path.suffix == ".raw":
        vol = _read_raw(path, contrast, subject_id)
    else:
        raise UnreadableFileError(f"unrecognised volume format: {path.name}")
    return vol.check()


def _read_raw(path: Path, contrast, subject_id) -> Volume:
    header_path = _sidecar(path)
    try:
        header = json.loads(header_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UnreadableFileError(f"cannot read sidecar header {header_path}: {exc}") from exc
    dtype = header.get("dtype", "float32")
    if dtype != "float32":
        raise UnknownDatatypeError(f"unsupported raw datatype {dtype!r}")
    try:
        shape = tuple(int(n) for n in header["shape"])
    except (KeyError, TypeError, ValueError) as exc:
        raise UnreadableFileError(f"sidecar header {header_path} lacks a valid shape") from exc
    if len(shape) != 3:
        raise NonVolumeError(f"non-3D image: shape {shape}")
    raw = path.read_bytes()
    expected = int(np.prod(shape)) * 4
    if len(raw) != expected:
        raise UnreadableFileError(f"{path} holds {len(raw)} bytes, header implies {expected}")
    data = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
    return Volume(
        data=data,
        spacing=tuple(header.get("spacing", (1.0, 1.0, 1.0))),
        contrast=contrast or header.get("contrast", "T2"),
        subject_id=subject_id if subject_id is not None else str(header.get("subject_id", "")),
        normalized=bool(header.get("normalized", False)),
    )


def _read_nifti(path: Path, contrast, subject_id) -> Volume:
    import nibabel as nib

    try:
        img = nib.load(str(path))
    except Exception as exc:  # nibabel raises a zoo of exception types
        raise UnreadableFileError(f"cannot read NIfTI file {path}: {exc}") from exc
    shape = img.shape
    if len(shape) == 4 and shape[3] == 1:
        shape = shape[:3]
    if len(shape) != 3:
        raise NonVolumeError(f"non-3D image: shape {img.shape}")
    dtype = img.get_data_dtype()
    if dtype.kind not in "iuf" or dtype.fields is not None:
        raise UnknownDatatypeError(f"unsupported NIfTI datatype {dtype}")
    data = np.asarray(img.dataobj).reshape(shape)
    if data.dtype.kind not in "iuf":
        raise UnknownDatatypeError(f"unsupported NIfTI datatype {data.dtype}")

    meta = _parse_descrip(img.header.get("descrip", b""))
    parsed = parse_ixi_name(path.name)
    if contrast is None:
        contrast = meta.get("contrast") or (parsed[1] if parsed else None)
    if contrast is None:
        raise UnreadableFileError(f"cannot determine contrast of {path.name}; pass contrast=")
    if subject_id is None:
        subject_id = meta.get("subject") or (parsed[0] if parsed else path.name.split(".")[0])
    return Volume(
        data=data.astype(np.float32),
        spacing=tuple(float(str(np.float32(z))) for z in img.header.get_zooms()[:3]),
        contrast=contrast,
        subject_id=subject_id,
        normalized=meta.get("normalized") == "1",
    )


def _parse_descrip(raw) -> dict[str, str]:
    text = raw.tobytes() if hasattr(raw, "tobytes") else bytes(raw)
    text = text.split(b"\x00", 1)[0].decode("ascii", "ignore")
    out = {}
    for part in text.split(";"):
        if "=" in part:
            k, v = part.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def write_volume(v: Volume, path) -> None:
    path = Path(path)
    v.check()
    if not path.parent.is_dir():
        raise VolumeIOError(f"parent directory does not exist: {path.parent}")
    try:
        if _is_nifti(path):
            _write_nifti(v, path)
        elif path.suffix == ".raw":
            _write_raw(v, path)
        else:
            raise VolumeIOError(f"unrecognised volume format: {path.name}")
    except OSError as exc:
        raise VolumeIOError(f"failed writing {path}: {exc}") from exc


def _write_raw(v: Volume, path: Path) -> None:
    path.write_bytes(np.ascontiguousarray(v.data, dtype="<f4").tobytes())
    header = {
        "shape": list(v.shape),
        "spacing": list(v.spacing),
        "contrast": v.contrast.value,
        "subject_id": v.subject_id,
        "dtype": "float32",
        "normalized": v.normalized,
    }
    _sidecar(path).write_text(json.dumps(header, indent=2) + "\n")


def _write_nifti(v: Volume, path: Path) -> None:
    import nibabel as nib

    affine = np.diag([*v.spacing, 1.0])
    img = nib.Nifti1Image(v.data.astype(np.float32), affine)
    img.header.set_data_dtype(np.float32)
    img.header.set_zooms(v.spacing)
    descrip = f"contrast={v.contrast.value};subject={v.subject_id};normalized={int(v.normalized)}"
    img.header["descrip"] = descrip[:79].encode("ascii", "replace")
    if path.name.endswith(".gz"):
        # gzip stores an mtime; write through a fixed-mtime stream so bytes are reproducible
        import gzip

        with open(path, "wb") as raw, gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as gz:
            gz.write(img.to_bytes())
    else:
        path.write_bytes(img.to_bytes())


# ---------------------------------------------------------------------------
# intensity and geometry helpers
# ---------------------------------------------------------------------------

def normalize(v: Volume, mode="percentile", p_lo: float = 0.0, p_hi: float = 99.5) -> Volume:
    """Map intensities into [0, 1].

    ``mode="minmax"`` maps min to 0 and max to 1. ``mode="percentile"`` uses the
    ``p_lo``/``p_hi`` percentiles as the range and clips. Constant inputs map to zeros.
    """
    if v.normalized:
        raise ValueError("volume is already normalized")
    data = v.data.astype(np.float64)
    if mode == "minmax":
        lo, hi = data.min(), data.max()
    elif mode == "percentile":
        if not 0 <= p_lo < p_hi <= 100:
            raise ValueError(f"bad percentiles ({p_lo}, {p_hi})")
        lo, hi = np.percentile(data, [p_lo, p_hi])
    else:
        raise ValueError(f"unknown normalization mode {mode!r}")
    if hi <= lo:
        out = np.zeros_like(data)
    else:
        out = np.clip((data - lo) / (hi - lo), 0.0, 1.0)
    return v.replace(data=out.astype(np.float32), normalized=True)


def extract_slices(v: Volume, axis: int = 2, keep: range | tuple[int, int] | None = None) -> list[np.ndarray]:
    """2D cross-sections of ``v`` along ``axis`` for indices in ``keep`` (half-open)."""
    if axis not in (0, 1, 2):
        raise ValueError(f"axis must be 0, 1 or 2, got {axis}")
    n = v.shape[axis]
    if keep is None:
        keep = range(n)
    elif not isinstance(keep, range):
        keep = range(*keep)
    if len(keep) and (min(keep) < 0 or max(keep) >= n):
        raise IndexError(f"slice range {keep.start}..{keep.stop} out of bounds for axis of length {n}")
    return [np.take(v.data, i, axis=axis).copy() for i in keep]


def central_slice_range(n_slices: int, fraction: float = 0.6) -> range:
    """Indices of the central ``fraction`` of ``n_slices`` (at least one slice)."""
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    count = max(1, int(round(n_slices * fraction)))
    start = (n_slices - count) // 2
    return range(start, start + count)


def foreground_fraction(img: np.ndarray, threshold: float = 0.02) -> float:
    return float(np.mean(img > threshold))


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

SPLITS = ("train", "val", "test")


@dataclass
class DatasetManifest:
    entries: dict[str, dict[str, str]] = field(default_factory=dict)
    split: dict[str, str] = field(default_factory=dict)
    root: str = ""

    def __post_init__(self):
        for subject, name in self.split.items():
            if name not in SPLITS:
                raise ValueError(f"subject {subject} has unknown split {name!r}")
            if subject not in self.entries:
                raise ValueError(f"split references unknown subject {subject}")

    @property
    def subjects(self) -> list[str]:
        return sorted(self.entries)

    def subjects_in(self, split: str) -> list[str]:
        return sorted(s for s, name in self.split.items() if name == split)

    def has_all_contrasts(self, subject: str, contrasts=tuple(Contrast)) -> bool:
        available = self.entries.get(subject, {})
        return all(Contrast(c).value in available for c in contrasts)

    def path(self, subject: str, contrast) -> Path:
        try:
            rel = self.entries[subject][Contrast(contrast).value]
        except KeyError:
            raise KeyError(f"subject {subject} has no {Contrast(contrast).value} volume") from None
        p = Path(rel)
        return p if p.is_absolute() or not self.root else Path(self.root) / p

    def to_json(self) -> str:
        doc = {"entries": self.entries, "split": self.split}
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        doc = json.loads(path.read_text())
        return cls(entries=doc["entries"], split=doc.get("split", {}), root=str(path.parent))


def build_manifest(directory) -> DatasetManifest:
    """Scan ``directory`` for IXI-style NIfTI files. Unmatched files are ignored."""
    directory = Path(directory)
    entries: dict[str, dict[str, str]] = {}
    for p in sorted(directory.iterdir()):
        parsed = parse_ixi_name(p.name)
        if parsed is None:
            continue
        subject, contrast = parsed
        entries.setdefault(subject, {})[contrast.value] = p.name
    return DatasetManifest(entries=entries, root=str(directory))


def split_subjects(manifest: DatasetManifest, counts, seed: int, require_contrasts=None) -> DatasetManifest:
    """Assign disjoint random train/val/test subsets of the requested sizes.

    Subjects not drawn keep their entries but get no split. With
    ``require_contrasts`` only subjects holding every listed contrast are eligible.
    """
    counts = tuple(int(c) for c in counts)
    if len(counts) != 3 or any(c < 0 for c in counts):
        raise ValueError(f"counts must be three non-negative integers, got {counts}")
    pool = manifest.subjects
    if require_contrasts is not None:
        pool = [s for s in pool if manifest.has_all_contrasts(s, require_contrasts)]
    if len(pool) < sum(counts):
        raise ValueError(f"insufficient subjects: need {sum(counts)}, have {len(pool)}")
    order = np.random.default_rng(seed).permutation(len(pool))
    split = {}
    start = 0
    for name, count in zip(SPLITS, counts):
        for i in order[start:start + count]:
            split[pool[i]] = name
        start += count
    return DatasetManifest(entries={k: dict(v) for k, v in manifest.entries.items()}, split=split, root=manifest.root)


# ---------------------------------------------------------------------------
# phantoms
# ---------------------------------------------------------------------------

# Mean intensity of each tissue class per contrast, loosely following brain MRI:
# white matter bright on T1, fluid bright on T2 and PD.
TISSUE_LEVELS = {
    Contrast.T1: (0.85, 0.60, 0.20, 0.45),
    Contrast.T2: (0.35, 0.55, 0.95, 0.75),
    Contrast.PD: (0.60, 0.75, 0.90, 0.50),
}


def generate_phantom(seed: int, size=(64, 64, 16), n_shapes: int = 8, subject_id: str = "",
                     texture: float = 0.2) -> dict[Contrast, Volume]:
    """Random ellipsoid phantom rendered in T1, T2 and PD.

    All three contrasts share one label map. The first shape is a large head-like
    ellipsoid, the rest are smaller inclusions inside it; later shapes overwrite
    earlier ones. Each shape gets a tissue class, and its intensity in each
    contrast is the class level from ``TISSUE_LEVELS`` scaled by a per-shape,
    per-contrast jitter of up to 10%. A smooth random texture of relative
    amplitude ``texture``, shared by all contrasts, stands in for fine anatomy.
    """
    size = tuple(int(s) for s in size)
    if len(size) != 3 or min(size) < 16:
        raise ValueError(f"phantom size must be >= 16 along every axis, got {size}")
    rng = np.random.default_rng(seed)
    grids = np.meshgrid(*(np.linspace(-1, 1, n) for n in size), indexing="ij")
    labels = np.zeros(size, dtype=np.int32)
    for k in range(n_shapes):
        if k == 0:
            centre = rng.uniform(-0.05, 0.05, 3)
            radii = np.array([rng.uniform(0.7, 0.85), rng.uniform(0.6, 0.8), rng.uniform(0.9, 1.1)])
        else:
            centre = rng.uniform(-0.45, 0.45, 3)
            radii = rng.uniform([0.08, 0.08, 0.3], [0.35, 0.35, 0.9])
        theta = rng.uniform(0, np.pi)
        c, s = np.cos(theta), np.sin(theta)
        x = grids[0] - centre[0]
        y = grids[1] - centre[1]
        u = c * x + s * y
        w = -s * x + c * y
        z = grids[2] - centre[2]
        inside = (u / radii[0]) ** 2 + (w / radii[1]) ** 2 + (z / radii[2]) ** 2 <= 1.0
        labels[inside] = k + 1

    field = gaussian_filter(rng.standard_normal(size), sigma=1.0)
    field = np.clip(field / (field.std() or 1.0), -2.5, 2.5)
    modulation = 1.0 + texture * field

    n_classes = len(TISSUE_LEVELS[Contrast.T1])
    # the head ellipsoid is always class 1 (grey-matter-like)
    classes = np.concatenate([[1], rng.integers(0, n_classes, max(n_shapes - 1, 0))])[:n_shapes]
    out = {}
    for contrast in Contrast:
        base = np.asarray(TISSUE_LEVELS[contrast])[classes]
        jitter = rng.uniform(0.9, 1.1, n_shapes)
        levels = np.concatenate([[0.0], np.clip(base * jitter, 0.05, 1.0)])
        out[contrast] = Volume(
            data=np.clip(levels[labels] * modulation, 0.0, 1.0).astype(np.float32),
            spacing=(1.0, 1.0, 1.0),
            contrast=contrast,
            subject_id=subject_id,
            normalized=True,
        )
    return out
