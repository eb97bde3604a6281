"""Bi-color shading model shared by the fitter and the synthetic oracle."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class BiColorShading:
    """Grayscale log intensity plus sun/sky log-color offsets mixed by a mask.

    Full log shading is ``log_intensity + c1 * M + c2 * (1 - M)`` per channel.
    """

    log_intensity: np.ndarray
    c1: np.ndarray
    c2: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        li = np.asarray(self.log_intensity, dtype=np.float64)
        m = np.asarray(self.mask, dtype=np.float64)
        c1 = np.asarray(self.c1, dtype=np.float64).reshape(3)
        c2 = np.asarray(self.c2, dtype=np.float64).reshape(3)
        if li.ndim != 2 or m.shape != li.shape:
            raise ValueError(f"log_intensity {li.shape} and mask {m.shape} must be matching H x W maps")
        if m.min() < 0 or m.max() > 1:
            raise ValueError("mixing mask must lie in [0, 1]")
        for name, v in (("log_intensity", li), ("c1", c1), ("c2", c2)):
            if not np.all(np.isfinite(v)):
                raise ValueError(f"{name} contains non-finite values")
        for name, v in (("log_intensity", li), ("c1", c1), ("c2", c2), ("mask", m)):
            v.setflags(write=False)
            object.__setattr__(self, name, v)

    @property
    def color_field(self) -> np.ndarray:
        """The H x W x 3 bi-color term ``c1 * M + c2 * (1 - M)``."""
        m = self.mask[:, :, None]
        return self.c1 * m + self.c2 * (1.0 - m)

    def full(self) -> np.ndarray:
        return self.log_intensity[:, :, None] + self.color_field

    def shifted(self, k) -> "BiColorShading":
        """Move a per-channel constant ``k`` into both illuminant colors."""
        k = np.asarray(k, dtype=np.float64)
        return BiColorShading(self.log_intensity, self.c1 + k, self.c2 + k, self.mask)
