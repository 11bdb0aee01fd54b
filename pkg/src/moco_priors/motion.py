"""Rotational bulk-motion artefacts composed line by line in k-space."""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from .volume import Volume

__all__ = [
    "MotionConfig",
    "MotionTrace",
    "draw_motion_params",
    "rotate_2d",
    "line_owners",
    "composite_kspace",
    "corrupt_slice",
    "corrupt_volume",
    "slice_rng",
    "subject_seed",
]


@dataclass(frozen=True)
class MotionConfig:
    n_movements: int = 10
    rot_range_deg: tuple[float, float] = (-1.75, 1.75)
    axis_choice: str = "random_xy"
    seed: int = 0
    anchor_center: bool = True
    slice_axis: int = 2
    translation: float = 0.0

    def __post_init__(self):
        lo, hi = self.rot_range_deg
        object.__setattr__(self, "rot_range_deg", (float(lo), float(hi)))
        if lo > hi:
            raise ValueError(f"rotation range lower bound {lo} exceeds upper bound {hi}")
        if self.n_movements < 1:
            raise ValueError("n_movements must be >= 1")
        if self.axis_choice not in ("random_xy", "x", "y"):
            raise ValueError(f"axis_choice must be random_xy, x or y; got {self.axis_choice!r}")
        if self.translation != 0:
            raise ValueError("translation is not supported; motion is rotation-only")
        if self.slice_axis not in (0, 1, 2):
            raise ValueError(f"slice_axis must be 0, 1 or 2, got {self.slice_axis}")


@dataclass(frozen=True)
class MotionTrace:
    """Ground-truth record of one simulated corruption.

    ``axis`` names the phase-encode direction: "Y" segments k-space rows
    (array axis 0), "X" segments columns (array axis 1). Segment 0 spans lines
    ``[0, cuts[0])`` and belongs to the unmoved image; segment k spans
    ``[cuts[k-1], cuts[k])`` and belongs to movement k. With ``anchor_center``
    the segment holding the centre line ``n_lines // 2`` is given back to the
    unmoved image.
    """

    angles_deg: tuple[float, ...]
    axis: str
    cuts: tuple[int, ...]
    seed: int = 0
    slice_index: int | None = None
    anchor_center: bool = True

    def __post_init__(self):
        object.__setattr__(self, "angles_deg", tuple(float(a) for a in self.angles_deg))
        object.__setattr__(self, "cuts", tuple(int(c) for c in self.cuts))
        if self.axis not in ("X", "Y"):
            raise ValueError(f"axis must be 'X' or 'Y', got {self.axis!r}")
        if len(self.angles_deg) != len(self.cuts):
            raise ValueError("need exactly one cut per movement")
        if any(b <= a for a, b in zip(self.cuts, self.cuts[1:])):
            raise ValueError(f"cuts must be strictly increasing: {self.cuts}")
        if self.cuts and self.cuts[0] < 0:
            raise ValueError("cuts must be non-negative")

    @property
    def n_movements(self) -> int:
        return len(self.angles_deg)

    @property
    def line_axis(self) -> int:
        return 0 if self.axis == "Y" else 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["angles_deg"] = list(self.angles_deg)
        d["cuts"] = list(self.cuts)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MotionTrace":
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def subject_seed(seed: int, subject_id: str) -> int:
    """Stable per-subject seed (independent of Python's hash randomisation)."""
    return (int(seed) * 1_000_003 + zlib.crc32(subject_id.encode())) % (2**63)


def slice_rng(seed: int, slice_index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(slice_index)])


def draw_motion_params(cfg: MotionConfig, slice_shape, rng: np.random.Generator, slice_index=None) -> MotionTrace:
    if cfg.axis_choice == "random_xy":
        axis = "X" if rng.integers(2) == 0 else "Y"
    else:
        axis = cfg.axis_choice.upper()
    n_lines = int(slice_shape[0 if axis == "Y" else 1])
    if n_lines < cfg.n_movements + 2:
        raise ValueError(f"{n_lines} k-space lines are too few for {cfg.n_movements} movements")
    lo, hi = cfg.rot_range_deg
    angles = rng.uniform(lo, hi, cfg.n_movements) if hi > lo else np.full(cfg.n_movements, lo)
    cuts = np.sort(rng.choice(np.arange(1, n_lines), size=cfg.n_movements, replace=False))
    return MotionTrace(
        angles_deg=tuple(angles.tolist()),
        axis=axis,
        cuts=tuple(cuts.tolist()),
        seed=cfg.seed,
        slice_index=slice_index,
        anchor_center=cfg.anchor_center,
    )


def rotate_2d(img: np.ndarray, angle_deg: float) -> np.ndarray:
    """Rotate about the array centre with bilinear interpolation and zero fill."""
    img = np.asarray(img)
    if angle_deg == 0:
        return img.copy()
    h, w = img.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    t = np.deg2rad(angle_deg)
    c, s = np.cos(t), np.sin(t)
    yy, xx = np.meshgrid(np.arange(h) - cy, np.arange(w) - cx, indexing="ij")
    # inverse map: output pixel -> source position
    sy = c * yy - s * xx + cy
    sx = s * yy + c * xx + cx

    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    fy = sy - y0
    fx = sx - x0
    out = np.zeros((h, w), dtype=np.float64)
    src = img.astype(np.float64)
    for dy, wy in ((0, 1 - fy), (1, fy)):
        for dx, wx in ((0, 1 - fx), (1, fx)):
            yi = y0 + dy
            xi = x0 + dx
            ok = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
            weight = np.where(ok, wy * wx, 0.0)
            out += weight * src[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
    return out.astype(img.dtype if img.dtype.kind == "f" else np.float64)


def line_owners(trace: MotionTrace, n_lines: int) -> np.ndarray:
    """Index of the source image (0 = unmoved, k = movement k) for every k-space line."""
    if trace.cuts and trace.cuts[-1] >= n_lines:
        raise ValueError(f"cut {trace.cuts[-1]} outside {n_lines} lines")
    segment = np.searchsorted(np.asarray(trace.cuts), np.arange(n_lines), side="right")
    if trace.anchor_center:
        centre_segment = segment[n_lines // 2]
        segment = np.where(segment == centre_segment, 0, segment)
    return segment


def _kspace(img: np.ndarray) -> np.ndarray:
    return np.fft.fftshift(np.fft.fft2(img))


def composite_kspace(img: np.ndarray, trace: MotionTrace) -> tuple[np.ndarray, list[np.ndarray], np.ndarray]:
    """Build the mixed k-space. Returns (composite, per-pose transforms, line owners)."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"expected a 2D slice, got shape {img.shape}")
    n_lines = img.shape[trace.line_axis]
    owners = line_owners(trace, n_lines)
    poses = [img] + [rotate_2d(img, a) for a in trace.angles_deg]
    spectra = [_kspace(p) for p in poses]
    composite = np.empty_like(spectra[0])
    for k, spec in enumerate(spectra):
        sel = owners == k
        if trace.line_axis == 0:
            composite[sel, :] = spec[sel, :]
        else:
            composite[:, sel] = spec[:, sel]
    return composite, spectra, owners


def corrupt_slice(img: np.ndarray, trace: MotionTrace) -> np.ndarray:
    """Magnitude image reconstructed from the motion-mixed k-space of ``img``."""
    composite, _, _ = composite_kspace(img, trace)
    out = np.abs(np.fft.ifft2(np.fft.ifftshift(composite)))
    return out.astype(np.float32)


def corrupt_volume(v: Volume, cfg: MotionConfig) -> tuple[Volume, list[MotionTrace]]:
    """Corrupt every slice along ``cfg.slice_axis`` with its own trace.

    Slice i draws from ``slice_rng(cfg.seed, i)`` so the result does not depend on
    processing order. The output is clipped to [0, 1] to stay a normalized volume.
    """
    if not v.normalized:
        raise ValueError("corrupt_volume expects a normalized volume")
    axis = cfg.slice_axis
    data = np.moveaxis(v.data, axis, 0)
    out = np.empty_like(data)
    traces = []
    for i, sl in enumerate(data):
        trace = draw_motion_params(cfg, sl.shape, slice_rng(cfg.seed, i), slice_index=i)
        out[i] = np.clip(corrupt_slice(sl, trace), 0.0, 1.0)
        traces.append(trace)
    return v.replace(data=np.moveaxis(out, 0, axis)), traces
