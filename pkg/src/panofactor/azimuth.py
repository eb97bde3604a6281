"""Binned sun-azimuth distributions, circular statistics and a brightest-blob estimator.

Bin ``b`` of ``AZIMUTH_BINS`` covers ``[-pi + b*w, -pi + (b+1)*w)`` with
``w = 2*pi / AZIMUTH_BINS``; expectations use bin centres.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .image import AZIMUTH_BINS, Panorama, luminance, rotate_pano

BIN_WIDTH = 2.0 * math.pi / AZIMUTH_BINS
SKY_FRACTION = 0.4
BRIGHT_PERCENTILE = 99.5
BRIGHT_FLOOR = 0.8
NEIGHBOUR_MASS = 0.24  # share of mass on the two adjacent bins for a centred peak


class AzimuthError(ValueError):
    """Invalid azimuth input, e.g. a distribution with no defined mean."""


def bin_centers(n: int = AZIMUTH_BINS) -> np.ndarray:
    return -math.pi + (np.arange(n) + 0.5) * (2.0 * math.pi / n)


def wrap_angle(a):
    """Map angles to [-pi, pi)."""
    return (np.asarray(a, dtype=np.float64) + math.pi) % (2.0 * math.pi) - math.pi


def angle_bin(angle: float, n: int = AZIMUTH_BINS) -> int:
    return int(math.floor((float(wrap_angle(angle)) + math.pi) / (2.0 * math.pi / n))) % n


@dataclass(frozen=True, eq=False)
class AzimuthDistribution:
    bins: np.ndarray

    def __post_init__(self):
        b = np.array(self.bins, dtype=np.float64)
        if b.shape != (AZIMUTH_BINS,):
            raise AzimuthError(f"expected {AZIMUTH_BINS} bins, got shape {b.shape}")
        if not np.isfinite(b).all() or b.min() < 0:
            raise AzimuthError("bin weights must be finite and non-negative")
        if abs(b.sum() - 1.0) > 1e-9:
            raise AzimuthError(f"bins must sum to 1, got {b.sum()!r}")
        b.setflags(write=False)
        object.__setattr__(self, "bins", b)

    @classmethod
    def from_weights(cls, w) -> "AzimuthDistribution":
        w = np.asarray(w, dtype=np.float64)
        # correctly rounded, so a cyclic shift of w normalises bit-identically
        total = math.fsum(w)
        if not total > 0:
            raise AzimuthError("weights must have a positive sum")
        return cls(w / total)

    @classmethod
    def uniform(cls) -> "AzimuthDistribution":
        return cls(np.full(AZIMUTH_BINS, 1.0 / AZIMUTH_BINS))

    @classmethod
    def delta(cls, b: int) -> "AzimuthDistribution":
        w = np.zeros(AZIMUTH_BINS)
        w[b % AZIMUTH_BINS] = 1.0
        return cls(w)

    def shifted(self, k: int) -> "AzimuthDistribution":
        """Cyclic shift by ``k`` bins (positive moves mass to larger angles)."""
        return AzimuthDistribution(np.roll(self.bins, k))

    @property
    def argmax(self) -> int:
        return int(np.argmax(self.bins))

    def __eq__(self, other):
        if not isinstance(other, AzimuthDistribution):
            return NotImplemented
        return np.array_equal(self.bins, other.bins)

    __hash__ = None


def weighted_circular_mean(angles, weights=None) -> float:
    """``atan2(E[sin], E[cos])`` of weighted angles; raises when the resultant vanishes."""
    a = np.asarray(angles, dtype=np.float64)
    w = np.ones_like(a) if weights is None else np.asarray(weights, dtype=np.float64)
    total = w.sum()
    if a.size == 0 or not total > 0:
        raise AzimuthError("circular mean of an empty or zero-weight set")
    s = float((w * np.sin(a)).sum() / total)
    c = float((w * np.cos(a)).sum() / total)
    if math.hypot(s, c) <= 1e-9:
        raise AzimuthError("circular mean undefined: resultant vector is zero")
    return math.atan2(s, c)


def circular_mean(phi: AzimuthDistribution) -> float:
    """Expected azimuth (radians) of a binned distribution."""
    return weighted_circular_mean(bin_centers(), phi.bins)


def circular_mean_grad(phi: AzimuthDistribution) -> np.ndarray:
    """Derivative of :func:`circular_mean` with respect to each bin weight."""
    centers = bin_centers()
    s = float(phi.bins @ np.sin(centers))
    c = float(phi.bins @ np.cos(centers))
    r2 = s * s + c * c
    if r2 <= 1e-18:
        raise AzimuthError("circular mean undefined: resultant vector is zero")
    return (c * np.sin(centers) - s * np.cos(centers)) / r2


def von_mises_concentration(neighbour_mass: float = NEIGHBOUR_MASS, n: int = AZIMUTH_BINS) -> float:
    """Concentration whose kernel, centred on a bin, puts ``neighbour_mass`` on the two adjacent bins.

    The neighbour share first grows with concentration (mass leaves the far
    bins) and then shrinks (mass collapses onto the centre bin); this returns
    the root on the concentrated side.
    """
    from scipy.optimize import brentq

    offsets = 2.0 * math.pi / n * (np.arange(n) - n // 2)

    def share(kappa):
        w = np.exp(kappa * (np.cos(offsets) - 1.0))
        w /= w.sum()
        return w[n // 2 - 1] + w[n // 2 + 1] - neighbour_mass

    # the share peaks near kappa = (n / 2pi)^2; twice that is past the peak
    lo = 2.0 * (n / (2.0 * math.pi)) ** 2
    if not 0.0 < neighbour_mass < share(lo) + neighbour_mass:
        raise AzimuthError(f"neighbour mass {neighbour_mass} outside the reachable range")
    return brentq(share, lo, 1e6)


_KAPPA = {}


def _kappa(neighbour_mass: float) -> float:
    kappa = _KAPPA.get(neighbour_mass)
    if kappa is None:
        kappa = _KAPPA[neighbour_mass] = von_mises_concentration(neighbour_mass)
    return kappa


def soft_assign(angle: float, neighbour_mass: float = NEIGHBOUR_MASS) -> AzimuthDistribution:
    w = np.exp(_kappa(neighbour_mass) * (np.cos(bin_centers() - angle) - 1.0))
    return AzimuthDistribution.from_weights(w)


def _arc_start(columns: np.ndarray, width: int) -> int:
    """First column after the widest empty gap of a set of columns on the circle."""
    c = np.unique(columns)
    gaps = np.diff(np.r_[c, c[0] + width])
    return int(c[(int(np.argmax(gaps)) + 1) % c.size])


def _wrapped_labels(mask: np.ndarray) -> tuple[np.ndarray, int]:
    """Connected components (8-neighbour) with the left and right edges joined."""
    labels, count = ndimage.label(mask, structure=np.ones((3, 3), dtype=int))
    if count == 0:
        return labels, 0
    parent = list(range(count + 1))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    h = mask.shape[0]
    left, right = labels[:, 0], labels[:, -1]
    for y in range(h):
        for dy in (-1, 0, 1):
            yy = y + dy
            if 0 <= yy < h and left[y] and right[yy]:
                ra, rb = find(left[y]), find(right[yy])
                if ra != rb:
                    parent[max(ra, rb)] = min(ra, rb)
    roots = np.array([find(i) for i in range(count + 1)])
    return roots[labels], count


def estimate_azimuth(
    p: Panorama,
    sky_fraction: float = SKY_FRACTION,
    percentile: float = BRIGHT_PERCENTILE,
    floor: float = BRIGHT_FLOOR,
    neighbour_mass: float = NEIGHBOUR_MASS,
) -> AzimuthDistribution:
    """Sun-azimuth distribution from the largest bright blob in the sky band.

    Pixels in the top ``sky_fraction`` of rows whose luminance reaches both
    the ``percentile`` of the band and the absolute ``floor`` form the bright
    set.  The largest connected component (wrapping horizontally) gives a
    luminance-weighted circular centroid, which is spread over the bins by a
    von Mises kernel.  With no pixel that bright the normalised column
    luminance marginal is returned instead (uniform for a black band).
    """
    data = p.data if isinstance(p, Panorama) else np.asarray(p, dtype=np.float64)
    h, w = data.shape[:2]
    if w % AZIMUTH_BINS:
        raise AzimuthError(f"panorama width {w} is not a multiple of {AZIMUTH_BINS}")
    rows = max(1, int(round(h * sky_fraction)))
    lum = luminance(data[:rows])
    threshold = max(float(np.percentile(lum, percentile)), floor)
    bright = lum >= threshold
    if not bright.any():
        marginal = lum.sum(axis=0).reshape(AZIMUTH_BINS, -1).sum(axis=1)
        if not marginal.sum() > 0:
            return AzimuthDistribution.uniform()
        return AzimuthDistribution.from_weights(marginal)
    labels, _ = _wrapped_labels(bright)
    ids = np.unique(labels[bright])
    sizes = np.array([(labels == i).sum() for i in ids])
    energy = np.array([lum[labels == i].sum() for i in ids])
    # ties on size fall back to total brightness, which keeps the choice independent of scan order
    best = ids[np.lexsort((-energy, -sizes))[0]]
    yy, xx = np.nonzero(labels == best)
    # Work relative to the blob's first column so that rotating the panorama
    # by whole bins rolls the result exactly, with no float drift in the angles.
    ref = _arc_start(xx, w)
    per_bin = w // AZIMUTH_BINS
    base, sub = divmod(ref, per_bin)
    rel = ((xx - ref) % w + sub + 0.5) * (2.0 * math.pi / w)
    centroid = weighted_circular_mean(rel, lum[yy, xx])
    rel_centers = (np.arange(AZIMUTH_BINS) + 0.5) * BIN_WIDTH
    weights = np.exp(_kappa(neighbour_mass) * (np.cos(rel_centers - centroid) - 1.0))
    return AzimuthDistribution.from_weights(weights).shifted(base)


def snap_to_bin(angle: float) -> int:
    """Nearest whole number of bins to ``angle``."""
    return int(round(float(angle) / BIN_WIDTH))


def sun_normalize(m, phi_bar: float):
    """Rotate so the sun (at ``phi_bar``) sits at heading 0, snapped to whole bins."""
    if not math.isfinite(phi_bar):
        raise AzimuthError("phi_bar must be finite")
    return rotate_pano(m, -snap_to_bin(phi_bar) * BIN_WIDTH)


def sun_denormalize(m, phi_bar: float):
    if not math.isfinite(phi_bar):
        raise AzimuthError("phi_bar must be finite")
    return rotate_pano(m, snap_to_bin(phi_bar) * BIN_WIDTH)


def _check_pairs(predictions, ground_truth):
    p = np.asarray(predictions, dtype=np.float64).ravel()
    g = np.asarray(ground_truth, dtype=np.float64).ravel()
    if p.size == 0 or p.size != g.size:
        raise AzimuthError(f"need equal-length non-empty lists, got {p.size} and {g.size}")
    return p, g


def calibrate_offset(predictions, ground_truth) -> float:
    """Bin-multiple rotation maximising mean ``cos(pred + offset - gt)``."""
    p, g = _check_pairs(predictions, ground_truth)
    offsets = -math.pi + np.arange(AZIMUTH_BINS) * BIN_WIDTH
    scores = np.cos(p[None, :] + offsets[:, None] - g[None, :]).mean(axis=1)
    best = int(np.argmax(np.round(scores, 12)))
    return float(offsets[best])


def azimuth_metrics(predictions, ground_truth) -> tuple[float, float]:
    """(mean cosine similarity, median absolute angular error in degrees)."""
    p, g = _check_pairs(predictions, ground_truth)
    d = wrap_angle(p - g)
    err = np.abs(d)
    # an exact half turn wraps to -pi; report it as 180 degrees either way
    return float(np.cos(p - g).mean()), float(np.degrees(np.median(err)))


# Reference numbers for the trained model on real street-level panoramas;
# recorded for documentation, not a target for the estimator above.
REFERENCE_COSINE = 0.806
REFERENCE_MEDIAN_DEG = 9.2
