"""Joint spline alignment of a stack by minimizing pairwise log-domain L1.

Each frame ``i`` gets a control grid ``theta_i``; the aligned frame samples the
input at ``x + flow_i(x)``.  The objective is the pairwise L1 disagreement of
the aligned log frames (RGB mode) or of per-frame reflectance estimates
``aligned log frame - estimated log shading`` (REFLECTANCE mode).

The update is Adam (``beta1 = 0`` by default) with step rejection: a step that
does not lower the objective is retried at half the size, so the loss trace is
non-increasing between shading refits and near-converged stacks stay put
instead of oscillating at the learning-rate scale.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy import ndimage

from ._kernels import flow_gradient, sample_bilinear
from .image import LOG_FLOOR, GammaParams, Panorama
from .ingest import Stack
from .losses import pairwise_l1
from .spline import GRID_COLS, GRID_ROWS, WarpGrid, eval_spline, invert_flow, spline_adjoint, warp

# (n, H, W, 3) log frames -> (n, H, W, 3) log shading estimates
Factorizer = Callable[[np.ndarray], np.ndarray]


class AlignError(RuntimeError):
    """Alignment could not run or diverged."""


class AlignMode(str, enum.Enum):
    RGB = "rgb"
    REFLECTANCE = "reflectance"


@dataclass(frozen=True)
class AlignConfig:
    steps: int = 200
    learning_rate: float = 0.1  # pixels per step for a unit-normalised gradient
    beta1: float = 0.0
    beta2: float = 0.999
    eps: float = 1e-8
    mode: AlignMode = AlignMode.RGB
    init_noise: float = 1e-3
    seed: int = 0
    refit_every: int = 5
    smooth: float = 0.0  # Charbonnier scale in log units; 0 gives plain L1
    max_halvings: int = 10
    gamma: GammaParams = field(default_factory=GammaParams)

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning rate must be positive, got {self.learning_rate}")
        if not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1:
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.init_noise < 0 or self.smooth < 0:
            raise ValueError("init_noise and smooth must be non-negative")
        if self.refit_every < 1:
            raise ValueError("refit_every must be >= 1")
        object.__setattr__(self, "mode", AlignMode(self.mode))

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "gamma"}
        d["mode"] = self.mode.value
        d["gamma"] = {"A": self.gamma.A, "gamma": self.gamma.gamma}
        return d


@dataclass(frozen=True)
class AlignResult:
    warps: tuple[WarpGrid, ...]
    stack: Stack
    loss_trace: tuple[float, ...]  # objective before the first step, then after each step
    rejected: int  # step proposals that were halved away


def log_frames(stack: Stack, gamma: GammaParams = GammaParams(), floor: float = LOG_FLOOR) -> np.ndarray:
    """Stack frames as linear log intensities, shape (n, H, W, 3)."""
    lin = (stack.array() / gamma.A) ** (1.0 / gamma.gamma)
    return np.log(np.maximum(lin, floor))


def median_shading(logs: np.ndarray, size: int = 5) -> np.ndarray:
    """Default shading estimate for REFLECTANCE mode.

    Shading is the median-filtered deviation of each frame from the temporal
    median.  The filter keeps broad illumination changes and shadow steps but
    rejects the thin double edges that misalignment leaves behind, so those
    survive in the reflectance residual and keep driving the warp.
    """
    dev = logs - np.median(logs, axis=0)
    r = size // 2
    padded = np.pad(dev, ((0, 0), (0, 0), (r, r), (0, 0)), mode="wrap")
    out = ndimage.median_filter(padded, size=(1, size, size, 1), mode="nearest")
    return out[:, :, r : r + dev.shape[2]]


def _objective(logs, theta, shading, smooth):
    n, h, w, _ = logs.shape
    res = np.empty_like(logs)
    jac = []
    for i in range(n):
        out, ddx, ddy = sample_bilinear(logs[i], eval_spline(theta[i], h, w), True)
        res[i] = out if shading is None else out - shading[i]
        jac.append((ddx, ddy))
    loss, g = pairwise_l1(res, smooth, True)
    grad = np.empty_like(theta)
    for i in range(n):
        grad[i] = spline_adjoint(flow_gradient(g[i], *jac[i]))
    return loss, grad


def _center(theta: np.ndarray) -> np.ndarray:
    # a warp shared by all frames does not change their agreement; pin it to zero
    return theta - theta.mean(axis=0, keepdims=True)


def align_stack(stack: Stack, cfg: AlignConfig = AlignConfig(), factorizer: Factorizer | None = None) -> AlignResult:
    if len(stack) < 2:
        raise AlignError(f"{stack.stack_id}: alignment needs at least 2 frames")
    logs = log_frames(stack, cfg.gamma)
    n, h, w, _ = logs.shape
    reflectance = cfg.mode is AlignMode.REFLECTANCE
    if reflectance and factorizer is None:
        factorizer = median_shading

    rng = np.random.default_rng(cfg.seed)
    theta = _center(rng.normal(0.0, cfg.init_noise, (n, GRID_ROWS, GRID_COLS, 2))) if cfg.init_noise > 0 else np.zeros((n, GRID_ROWS, GRID_COLS, 2))

    def refit(th):
        aligned = np.stack([warp(logs[i], eval_spline(th[i], h, w)) for i in range(n)])
        return factorizer(aligned)

    def evaluate(th, shading):
        loss, grad = _objective(logs, th, shading, cfg.smooth)
        if not (math.isfinite(loss) and np.isfinite(grad).all()):
            raise AlignError(f"{stack.stack_id}: non-finite alignment loss {loss}")
        return loss, grad

    shading = refit(theta) if reflectance else None
    loss, grad = evaluate(theta, shading)
    trace = [loss]
    v = np.zeros_like(theta)
    m = np.zeros_like(theta)
    scale = 1.0
    rejected = 0
    for step in range(1, cfg.steps + 1):
        if reflectance and step > 1 and (step - 1) % cfg.refit_every == 0:
            shading = refit(theta)
            loss, grad = evaluate(theta, shading)
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * grad
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * grad * grad
        direction = (m / (1.0 - cfg.beta1**step)) / (np.sqrt(v / (1.0 - cfg.beta2**step)) + cfg.eps)
        for _ in range(cfg.max_halvings + 1):
            proposal = _center(theta - cfg.learning_rate * scale * direction)
            new_loss, new_grad = evaluate(proposal, shading)
            if new_loss < loss:
                theta, loss, grad = proposal, new_loss, new_grad
                scale = min(1.0, scale * 1.1)
                break
            scale *= 0.5
            rejected += 1
        trace.append(loss)

    warps = tuple(WarpGrid(theta[i]) for i in range(n))
    frames = tuple(
        Panorama(np.clip(warp(f.data, eval_spline(theta[i], h, w)), 0.0, 1.0)) for i, f in enumerate(stack.frames)
    )
    aligned = replace(stack, frames=frames, warps=warps)
    return AlignResult(warps, aligned, tuple(float(x) for x in trace), rejected)


def stack_variance(stack) -> tuple[np.ndarray, float]:
    """Unbiased per-pixel variance across frames and its mean over pixels and channels."""
    a = stack.array() if isinstance(stack, Stack) else np.asarray(stack, dtype=np.float64)
    if a.shape[0] < 2:
        raise ValueError("variance needs at least 2 frames")
    var = a.var(axis=0, ddof=1)
    return var, float(var.mean())


def endpoint_error(recovered, applied, height: int, width: int) -> float:
    """Mean endpoint error between recovered alignment flows and the true ones.

    ``applied[i]`` is the grid whose flow perturbed frame ``i``; the flow that
    undoes it is its fixed-point inverse.  Both sets of flows are compared
    after removing their cross-frame mean, the component alignment cannot
    observe.
    """
    rec = np.stack([eval_spline(_control(g), height, width) for g in recovered])
    gt = np.stack([invert_flow(eval_spline(_control(g), height, width)) for g in applied])
    rec -= rec.mean(axis=0)
    gt -= gt.mean(axis=0)
    return float(np.linalg.norm(rec - gt, axis=-1).mean())


def _control(g) -> np.ndarray:
    return g.control if isinstance(g, WarpGrid) else np.asarray(g, dtype=np.float64)
