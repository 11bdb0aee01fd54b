"""SSIM and per-method evaluation reports."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

__all__ = [
    "SsimParams",
    "gaussian_window",
    "ssim",
    "ssim_torch",
    "EvalReport",
    "ComparisonTable",
    "evaluate",
    "aggregate",
]


@dataclass(frozen=True)
class SsimParams:
    window_size: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    data_range: float = 1.0

    def __post_init__(self):
        if self.window_size < 1 or self.window_size % 2 == 0:
            raise ValueError("window_size must be a positive odd integer")
        if not (self.sigma > 0 and self.k1 > 0 and self.k2 > 0 and self.data_range > 0):
            raise ValueError("sigma, K1, K2 and L must be positive")

    @property
    def c1(self) -> float:
        return (self.k1 * self.data_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.data_range) ** 2


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    """1D Gaussian taps normalised to sum to one."""
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    return g / g.sum()


def _filter(img: np.ndarray, taps: np.ndarray) -> np.ndarray:
    # separable Gaussian on a symmetric-padded (edge-repeating) image, same-size output
    pad = len(taps) // 2
    p = np.pad(img, pad, mode="symmetric")
    h, w = img.shape
    rows = sum(t * p[i:i + h, :] for i, t in enumerate(taps))
    return sum(t * rows[:, j:j + w] for j, t in enumerate(taps))


def ssim(x, y, p: SsimParams = SsimParams(), mask=None) -> tuple[float, np.ndarray]:
    """Mean SSIM and the SSIM map of two 2D images.

    Local statistics use a Gaussian window with symmetric boundary padding. The
    mean is the plain average of the map, or of the map inside ``mask`` if given.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    if x.ndim != 2:
        raise ValueError(f"ssim expects 2D images, got {x.ndim}D")
    taps = gaussian_window(p.window_size, p.sigma)
    mu_x = _filter(x, taps)
    mu_y = _filter(y, taps)
    var_x = _filter(x * x, taps) - mu_x**2
    var_y = _filter(y * y, taps) - mu_y**2
    cov = _filter(x * y, taps) - mu_x * mu_y
    c1, c2 = p.c1, p.c2
    smap = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / ((mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        return float(smap[mask].mean()), smap
    return float(smap.mean()), smap


def _pad_symmetric(t, pad: int):
    import torch

    # torch has no edge-repeating reflect mode; build it from flipped borders
    for dim in (-2, -1):
        n = t.shape[dim]
        if pad > n:
            raise ValueError(f"image dimension {n} smaller than SSIM window radius {pad}")
        head = t.narrow(dim, 0, pad).flip(dim)
        tail = t.narrow(dim, n - pad, pad).flip(dim)
        t = torch.cat([head, t, tail], dim=dim)
    return t


def ssim_torch(x, y, p: SsimParams = SsimParams()):
    """Differentiable mean SSIM per image for (B, C, H, W) tensors; returns shape (B,)."""
    import torch
    import torch.nn.functional as F

    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    c = x.shape[1]
    taps = torch.as_tensor(gaussian_window(p.window_size, p.sigma), dtype=x.dtype, device=x.device)
    kh = taps.view(1, 1, -1, 1).expand(c, 1, -1, 1)
    kw = taps.view(1, 1, 1, -1).expand(c, 1, 1, -1)
    pad = p.window_size // 2

    def blur(t):
        t = _pad_symmetric(t, pad)
        return F.conv2d(F.conv2d(t, kh, groups=c), kw, groups=c)

    mu_x, mu_y = blur(x), blur(y)
    var_x = blur(x * x) - mu_x**2
    var_y = blur(y * y) - mu_y**2
    cov = blur(x * y) - mu_x * mu_y
    smap = ((2 * mu_x * mu_y + p.c1) * (2 * cov + p.c2)) / ((mu_x**2 + mu_y**2 + p.c1) * (var_x + var_y + p.c2))
    return smap.flatten(1).mean(1)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

def _summary(values) -> dict[str, float]:
    v = np.asarray(values, dtype=np.float64)
    q1, median, q3 = np.percentile(v, [25, 50, 75])
    return {
        "mean": float(v.mean()),
        "median": float(median),
        "q1": float(q1),
        "q3": float(q3),
        "min": float(v.min()),
        "max": float(v.max()),
    }


@dataclass
class EvalReport:
    label: str
    sample_ids: list[str]
    ssim_corrupted: list[float]
    ssim_output: list[float]

    def __post_init__(self):
        if not (len(self.sample_ids) == len(self.ssim_corrupted) == len(self.ssim_output)):
            raise ValueError("report lists must have equal lengths")

    @property
    def aggregates(self) -> dict[str, float]:
        return _summary(self.ssim_output)

    @property
    def aggregates_corrupted(self) -> dict[str, float]:
        return _summary(self.ssim_corrupted)

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "sample_ids": list(self.sample_ids),
            "ssim_corrupted": list(self.ssim_corrupted),
            "ssim_output": list(self.ssim_output),
            "aggregates": self.aggregates,
            "aggregates_corrupted": self.aggregates_corrupted,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(d["label"], list(d["sample_ids"]), list(d["ssim_corrupted"]), list(d["ssim_output"]))


def _sample_id(sample, i: int) -> str:
    subject = getattr(sample, "subject_id", None)
    index = getattr(sample, "slice_index", None)
    if subject is None or index is None:
        return str(i)
    return f"{subject}:{index}"


def evaluate(predict, samples, p: SsimParams = SsimParams(), label: str = "corrupted") -> EvalReport:
    """SSIM of input and of ``predict(sample)`` against each sample's target.

    ``predict=None`` is the identity predictor (returns the corrupted input).
    """
    if not samples:
        raise ValueError("evaluate needs at least one sample")
    ids, before, after = [], [], []
    for i, s in enumerate(samples):
        s_in, _ = ssim(s.corrupted, s.target, p)
        if predict is None:
            s_out = s_in
        else:
            s_out, _ = ssim(np.asarray(predict(s)).reshape(s.target.shape), s.target, p)
        ids.append(_sample_id(s, i))
        before.append(s_in)
        after.append(s_out)
    return EvalReport(label, ids, before, after)


CSV_COLUMNS = ("method", "mean", "median", "q1", "q3", "min", "max")


@dataclass
class ComparisonTable:
    rows: list[dict] = field(default_factory=list)
    median_differences: dict[str, float] = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for row in self.rows:
            writer.writerow([row["method"]] + [repr(float(row[k])) for k in CSV_COLUMNS[1:]])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"rows": self.rows, "median_differences": self.median_differences}, indent=2) + "\n"


def aggregate(reports) -> ComparisonTable:
    """Five-number summaries per method and pairwise median differences (row minus column)."""
    reports = list(reports)
    if not reports:
        raise ValueError("no reports to aggregate")
    ref = reports[0].sample_ids
    for r in reports[1:]:
        if r.sample_ids != ref:
            raise ValueError(f"report {r.label!r} was computed on a different sample set")
    rows = [{"method": r.label, **r.aggregates} for r in reports]
    diffs = {}
    for a, b in combinations(rows, 2):
        diffs[f"{a['method']} - {b['method']}"] = a["median"] - b["median"]
    return ComparisonTable(rows, diffs)
