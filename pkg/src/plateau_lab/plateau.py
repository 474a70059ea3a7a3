"""Stage segmentation of cut-layer sweep curves and merge-start search.

The detector works on a min-max normalized copy of the curve, which makes
the located knee invariant to positive affine rescaling of the scores.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

TIE_TOL = 1e-9


@dataclass
class StageSegmentation:
    found: bool
    k_star: int | None = None
    early_end: int | None = None
    mid_end: int | None = None
    curve_smoothed: list[float] = field(default_factory=list)
    mid_slope: float | None = None
    plateau_slope: float | None = None
    noise_sigma: float | None = None
    smoothing_window: int = 3
    min_plateau_len: int = 2
    plateau_slope_tol_frac: float = 0.1
    fallback: bool = False
    reason: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


def smooth(values: Sequence[float], window: int = 3) -> np.ndarray:
    """Centered moving average with mirrored boundaries."""
    v = np.asarray(values, dtype=np.float64)
    if window <= 1:
        return v.copy()
    if window % 2 == 0:
        raise ValueError("smoothing window must be odd")
    half = window // 2
    padded = np.pad(v, half, mode="symmetric")
    return np.convolve(padded, np.ones(window) / window, mode="valid")


def _ls_slope(y: np.ndarray) -> float:
    if len(y) < 2:
        return 0.0
    x = np.arange(len(y), dtype=np.float64)
    x -= x.mean()
    return float(np.dot(x, y - y.mean()) / np.dot(x, x))


def _slope_stderr(n_points: int, sigma: float) -> float:
    if n_points < 2 or sigma == 0.0:
        return 0.0
    x = np.arange(n_points, dtype=np.float64)
    return sigma / math.sqrt(float(np.sum((x - x.mean()) ** 2)))


def noise_sigma(z: np.ndarray) -> float:
    """Robust per-point noise estimate from raw second differences (MAD)."""
    if len(z) < 3:
        return 0.0
    d2 = z[:-2] - 2.0 * z[1:-1] + z[2:]
    return float(np.median(np.abs(d2)) / 0.6745 / math.sqrt(6.0))


def _normalize(scores: np.ndarray) -> np.ndarray | None:
    lo, hi = float(scores.min()), float(scores.max())
    if hi - lo <= 1e-12 * max(1.0, abs(hi)):
        return None
    return (scores - lo) / (hi - lo)


def detect_plateau_onset(scores: Sequence[float], smoothing_window: int = 3, min_plateau_len: int = 2,
                         plateau_slope_tol_frac: float = 0.1) -> StageSegmentation:
    """Locate the elbow where a rising sweep curve turns into a plateau.

    ``scores[i]`` is the score at cut layer ``k = i + 1``. The onset ``k*`` is
    the most concave point of the smoothed curve (largest negative second
    difference, ties to the smallest ``k``) among points that are followed
    by at least ``min_plateau_len`` further points and whose following
    least-squares slope is at most ``plateau_slope_tol_frac`` times the slope
    of the preceding rise, plus two standard errors of that slope under the
    curve's estimated noise level. Returns ``found=False`` when no point
    qualifies.
    """
    raw = np.asarray(getattr(scores, "scores", scores), dtype=np.float64)
    n = len(raw)
    if n < 2 * min_plateau_len or n < 3:
        raise ValueError(f"curve with {n} points is too short for min_plateau_len={min_plateau_len}")
    params = dict(smoothing_window=smoothing_window, min_plateau_len=min_plateau_len,
                  plateau_slope_tol_frac=plateau_slope_tol_frac)
    z = _normalize(raw)
    if z is None:
        return StageSegmentation(False, curve_smoothed=raw.tolist(), reason="constant curve", **params)
    sm = smooth(z, smoothing_window)
    sigma = noise_sigma(z)
    d2 = np.zeros(n)
    d2[1:-1] = sm[:-2] - 2.0 * sm[1:-1] + sm[2:]

    best = None
    for i in range(1, n - min_plateau_len):
        concavity = -d2[i]
        if concavity <= TIE_TOL:
            continue
        convex = d2[:i]
        e = int(np.flatnonzero(convex >= convex.max() - TIE_TOL)[0]) if i > 1 else 0
        mid_slope = _ls_slope(z[e:i + 1])
        if mid_slope <= TIE_TOL:
            continue
        plateau_slope = _ls_slope(z[i:])
        allowance = 2.0 * _slope_stderr(n - i, sigma)
        if plateau_slope > plateau_slope_tol_frac * mid_slope + allowance + TIE_TOL:
            continue
        if best is None or concavity > best[0] + TIE_TOL:
            best = (concavity, i, e, mid_slope, plateau_slope)
    if best is None:
        return StageSegmentation(False, curve_smoothed=sm.tolist(), noise_sigma=sigma,
                                 reason="no rise-then-plateau knee", **params)
    _, i, e, mid_slope, plateau_slope = best
    return StageSegmentation(True, k_star=i + 1, early_end=e + 1, mid_end=i + 1, curve_smoothed=sm.tolist(),
                             mid_slope=mid_slope, plateau_slope=plateau_slope, noise_sigma=sigma, **params)


def fallback_k_star(num_layers: int) -> int:
    return math.ceil(2 * num_layers / 3)


def resolve_k_star(seg: StageSegmentation, num_layers: int) -> StageSegmentation:
    """Apply the ``ceil(2L/3)`` fallback when no plateau was found."""
    if seg.found:
        return seg
    k = fallback_k_star(num_layers)
    logger.warning("no plateau detected (%s); falling back to k* = %d", seg.reason, k)
    out = StageSegmentation(**{**asdict(seg), "k_star": k, "fallback": True})
    return out


def segmented_fit_knee(scores: Sequence[float]) -> int:
    """Brute-force oracle: best continuous three-piece linear fit, returns the last breakpoint ``k``.

    Every breakpoint pair ``e < c`` is tried; the fit for each pair is an
    ordinary least-squares problem on hinge features. Ties go to the
    smallest ``c``.
    """
    y = np.asarray(scores, dtype=np.float64)
    n = len(y)
    x = np.arange(n, dtype=np.float64)
    best = (np.inf, None)
    for e in range(0, n - 2):
        for c in range(e + 1, n - 1):
            basis = np.stack([np.ones(n), x, np.maximum(x - e, 0), np.maximum(x - c, 0)], axis=1)
            coef, *_ = np.linalg.lstsq(basis, y, rcond=None)
            sse = float(np.sum((basis @ coef - y) ** 2))
            if sse < best[0] - 1e-12:
                best = (sse, c)
    return best[1] + 1


def neighbor_candidates(k_star: int, radius: int, num_layers: int) -> list[int]:
    if radius < 0:
        raise ValueError("radius must be >= 0")
    lo, hi = max(2, k_star - radius), min(num_layers, k_star + radius)
    if lo > hi:
        lo = hi = min(max(k_star, 2), num_layers)
    return list(range(lo, hi + 1))


def neighbor_search_k0(k_star: int, radius: int, eval_fn: Callable[[int], float],
                       num_layers: int) -> tuple[int, dict[int, float | None]]:
    """Evaluate merge-start candidates around ``k*``; best score wins, ties to larger ``k0``."""
    table: dict[int, float | None] = {}
    for k0 in neighbor_candidates(k_star, radius, num_layers):
        try:
            table[k0] = float(eval_fn(k0))
        except Exception:
            logger.exception("evaluation failed for k0=%d", k0)
            table[k0] = None
    scored = [(s, k) for k, s in table.items() if s is not None]
    if not scored:
        raise RuntimeError("every k0 candidate failed evaluation")
    top = max(s for s, _ in scored)
    k0 = max(k for s, k in scored if s == top)
    return k0, table
