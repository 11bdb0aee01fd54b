"""Prior stacks (similar slices or other contrasts) and training/eval samples."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from .motion import MotionConfig, MotionTrace, corrupt_slice, draw_motion_params, slice_rng, subject_seed
from .volume import (
    Contrast,
    DatasetManifest,
    central_slice_range,
    foreground_fraction,
    normalize,
    read_volume,
)

__all__ = [
    "PriorMode",
    "SliceSample",
    "SliceLoader",
    "sample_similar_slices",
    "assemble_contrast_priors",
    "make_sample",
    "build_samples",
    "save_samples",
    "load_samples",
]


@dataclass(frozen=True)
class PriorMode:
    kind: str = "none"
    k: int = 10
    contrasts: tuple[str, ...] = ("T1", "PD")
    target_contrast: str = "T2"
    redraw_each_epoch: bool = True

    def __post_init__(self):
        object.__setattr__(self, "contrasts", tuple(Contrast(c).value for c in self.contrasts))
        Contrast(self.target_contrast)
        if self.kind not in ("none", "similar_slices", "contrasts"):
            raise ValueError(f"unknown prior kind {self.kind!r}")
        if self.kind == "similar_slices" and self.k < 1:
            raise ValueError("similar_slices needs k >= 1")
        if self.kind == "contrasts":
            if not self.contrasts:
                raise ValueError("contrasts prior needs at least one contrast")
            if self.target_contrast in self.contrasts:
                raise ValueError("prior contrasts must exclude the target contrast")

    @property
    def n_prior(self) -> int:
        if self.kind == "similar_slices":
            return self.k
        if self.kind == "contrasts":
            return len(self.contrasts)
        return 0


@dataclass
class SliceSample:
    corrupted: np.ndarray
    priors: np.ndarray
    target: np.ndarray
    subject_id: str = ""
    slice_index: int = 0
    trace: MotionTrace | None = None
    prior_sources: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.corrupted = np.asarray(self.corrupted, dtype=np.float32)
        self.target = np.asarray(self.target, dtype=np.float32)
        shape = self.target.shape
        if self.priors is None or len(self.priors) == 0:
            self.priors = np.zeros((0, *shape), dtype=np.float32)
        self.priors = np.asarray(self.priors, dtype=np.float32)
        if self.corrupted.shape != shape or self.priors.shape[1:] != shape:
            raise ValueError(
                f"sample arrays disagree in size: corrupted {self.corrupted.shape}, "
                f"priors {self.priors.shape}, target {shape}"
            )

    @property
    def n_prior(self) -> int:
        return self.priors.shape[0]


class SliceLoader:
    """Cached, normalized 2D slices from the volumes listed in a manifest."""

    def __init__(self, manifest: DatasetManifest, slice_axis: int = 2, normalization: str = "percentile",
                 p_lo: float = 0.0, p_hi: float = 99.5, cache_size: int = 256):
        self.manifest = manifest
        self.slice_axis = slice_axis
        self._norm = (normalization, p_lo, p_hi)
        self._load = lru_cache(maxsize=cache_size)(self._load_volume)

    def _load_volume(self, subject: str, contrast: str) -> np.ndarray:
        v = read_volume(self.manifest.path(subject, contrast), contrast=contrast, subject_id=subject)
        if not v.normalized:
            mode, lo, hi = self._norm
            v = normalize(v, mode, lo, hi)
        return v.data

    def volume(self, subject: str, contrast) -> np.ndarray:
        return self._load(subject, Contrast(contrast).value)

    def n_slices(self, subject: str, contrast) -> int:
        return self.volume(subject, contrast).shape[self.slice_axis]

    def slice(self, subject: str, contrast, index: int, reference_count: int | None = None) -> np.ndarray:
        """Slice ``index``; if ``reference_count`` differs from this volume's depth,
        the index is matched by fractional position."""
        data = self.volume(subject, contrast)
        n = data.shape[self.slice_axis]
        if reference_count is not None and reference_count != n:
            index = int(round(index / reference_count * n))
            index = min(max(index, 0), n - 1)
        if not 0 <= index < n:
            raise IndexError(f"slice {index} out of range for {subject}/{contrast} with {n} slices")
        return np.take(data, index, axis=self.slice_axis).copy()


def sample_similar_slices(manifest: DatasetManifest, subject: str, slice_index: int, k: int,
                          rng: np.random.Generator, contrast="T2", loader: SliceLoader | None = None,
                          ) -> tuple[np.ndarray, list[str]]:
    """Same-position, same-contrast slices from ``k`` other subjects of the same split.

    Returns the (k, H, W) stack and the donor subject ids in channel order.
    """
    loader = loader or SliceLoader(manifest)
    contrast = Contrast(contrast).value
    split = manifest.split.get(subject)
    pool = manifest.subjects_in(split) if split is not None else manifest.subjects
    donors = [s for s in pool if s != subject and contrast in manifest.entries.get(s, {})]
    if len(donors) < k:
        raise ValueError(f"insufficient donor subjects: need {k}, have {len(donors)}")
    picked = [donors[i] for i in rng.choice(len(donors), size=k, replace=False)]
    reference = loader.n_slices(subject, contrast) if contrast in manifest.entries.get(subject, {}) else None
    stack = np.stack([loader.slice(d, contrast, slice_index, reference) for d in picked])
    return stack, picked


def assemble_contrast_priors(manifest: DatasetManifest, subject: str, slice_index: int, contrasts,
                             loader: SliceLoader | None = None, target_contrast="T2") -> np.ndarray:
    """Same-subject slices of each requested contrast, stacked in the listed order."""
    loader = loader or SliceLoader(manifest)
    available = manifest.entries.get(subject, {})
    missing = [Contrast(c).value for c in contrasts if Contrast(c).value not in available]
    if missing:
        raise ValueError(f"subject {subject} lacks contrast(s) {', '.join(missing)}")
    reference = loader.n_slices(subject, target_contrast) if Contrast(target_contrast).value in available else None
    return np.stack([loader.slice(subject, c, slice_index, reference) for c in contrasts])


def make_sample(clean: np.ndarray, cfg: MotionConfig, mode: PriorMode, manifest: DatasetManifest | None,
                subject: str, slice_index: int, rng: np.random.Generator, loader: SliceLoader | None = None,
                prior_rng: np.random.Generator | None = None) -> SliceSample:
    """Corrupt ``clean`` and attach priors.

    ``rng`` drives the motion draw; ``prior_rng`` (default: ``rng``) drives donor
    selection so priors can be redrawn without changing the corruption.
    """
    clean = np.asarray(clean, dtype=np.float32)
    trace = draw_motion_params(cfg, clean.shape, rng, slice_index=slice_index)
    corrupted = np.clip(corrupt_slice(clean, trace), 0.0, 1.0)
    sources: list[str] = []
    if mode.kind == "none":
        priors = np.zeros((0, *clean.shape), dtype=np.float32)
    elif mode.kind == "similar_slices":
        priors, sources = sample_similar_slices(manifest, subject, slice_index, mode.k, prior_rng or rng,
                                                contrast=mode.target_contrast, loader=loader)
    else:
        priors = assemble_contrast_priors(manifest, subject, slice_index, mode.contrasts, loader=loader,
                                          target_contrast=mode.target_contrast)
        sources = [f"{subject}:{c}" for c in mode.contrasts]
    return SliceSample(corrupted, priors, clean, subject, slice_index, trace, sources)


def build_samples(loader: SliceLoader, subjects, cfg: MotionConfig, mode: PriorMode, *, epoch: int = 0,
                  slice_fraction: float = 0.6, min_foreground: float = 0.05,
                  foreground_threshold: float = 0.02, redraw_motion: bool = False) -> list[SliceSample]:
    """Samples for every kept slice of every subject.

    Slice i of subject s is corrupted with ``slice_rng(subject_seed(cfg.seed, s), i)``,
    the same stream ``corrupt_volume`` uses with that subject seed. With
    ``redraw_motion`` and ``epoch > 0`` the motion is instead drawn from a stream
    keyed on the epoch, giving fresh corruption every training epoch. Similar-slice
    donors are redrawn per epoch when ``mode.redraw_each_epoch`` is set.
    """
    manifest = loader.manifest
    target = mode.target_contrast
    samples = []
    for subject in subjects:
        n = loader.n_slices(subject, target)
        sseed = subject_seed(cfg.seed, subject)
        scfg = replace(cfg, seed=sseed)
        for i in central_slice_range(n, slice_fraction):
            clean = loader.slice(subject, target, i)
            if foreground_fraction(clean, foreground_threshold) < min_foreground:
                continue
            prior_epoch = epoch if mode.redraw_each_epoch else 0
            prior_rng = np.random.default_rng([sseed, i, 1, prior_epoch])
            if redraw_motion and epoch > 0:
                motion_rng = np.random.default_rng([sseed, i, 2, epoch])
            else:
                motion_rng = slice_rng(sseed, i)
            samples.append(make_sample(clean, scfg, mode, manifest, subject, i, motion_rng,
                                       loader=loader, prior_rng=prior_rng))
    return samples


# ---------------------------------------------------------------------------
# persistence: raw float32 arrays plus a JSON index
# ---------------------------------------------------------------------------

def _write_array(path: Path, a: np.ndarray) -> dict:
    path.write_bytes(np.ascontiguousarray(a, dtype="<f4").tobytes())
    return {"file": path.name, "shape": list(a.shape)}


def _read_array(directory: Path, ref: dict) -> np.ndarray:
    raw = (directory / ref["file"]).read_bytes()
    return np.frombuffer(raw, dtype="<f4").reshape(ref["shape"]).astype(np.float32)


def save_samples(samples, directory, mode: PriorMode | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = []
    for n, s in enumerate(samples):
        stem = f"{n:05d}"
        index.append({
            "subject": s.subject_id,
            "slice": s.slice_index,
            "corrupted": _write_array(directory / f"{stem}_corrupted.raw", s.corrupted),
            "priors": _write_array(directory / f"{stem}_priors.raw", s.priors),
            "target": _write_array(directory / f"{stem}_target.raw", s.target),
            "trace": s.trace.to_dict() if s.trace is not None else None,
            "prior_sources": list(s.prior_sources),
        })
    doc = {"mode": None if mode is None else mode.__dict__ | {"contrasts": list(mode.contrasts)}, "samples": index}
    path = directory / "index.json"
    path.write_text(json.dumps(doc, indent=2) + "\n")
    return path


def load_samples(directory) -> list[SliceSample]:
    directory = Path(directory)
    doc = json.loads((directory / "index.json").read_text())
    out = []
    for e in doc["samples"]:
        out.append(SliceSample(
            corrupted=_read_array(directory, e["corrupted"]),
            priors=_read_array(directory, e["priors"]),
            target=_read_array(directory, e["target"]),
            subject_id=e["subject"],
            slice_index=e["slice"],
            trace=MotionTrace.from_dict(e["trace"]) if e["trace"] else None,
            prior_sources=e.get("prior_sources", []),
        ))
    return out
