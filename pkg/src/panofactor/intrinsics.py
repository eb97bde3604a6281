"""Stack factorization into a shared log reflectance and per-frame shading.

Two factorizers live here: the gradient-median baseline (temporal median of
log-image gradients followed by a Poisson solve) and a direct fit of the
bi-color shading model.  Both return a :class:`Decomposition` whose per-frame
log shading composes with the shared log reflectance to reconstruct frames.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import fft, optimize

from ._kernels import bicolor_terms
from .image import LOG_FLOOR, GammaParams, luminance, recompose_array
from .ingest import Stack
from .losses import loss_rc, loss_wl, pairwise_l1  # noqa: F401  re-exported loss primitives
from .shading import BiColorShading

class FitError(RuntimeError):
    """The factorization could not run or diverged."""


@dataclass(frozen=True, eq=False)
class Decomposition:
    log_reflectance: np.ndarray  # H x W x 3
    log_shadings: np.ndarray  # n x H x W x 3 full log shading per frame
    bicolor: tuple[BiColorShading, ...] | None = None
    fit_report: dict = field(default_factory=dict)

    def __post_init__(self):
        r = np.asarray(self.log_reflectance, dtype=np.float64)
        s = np.asarray(self.log_shadings, dtype=np.float64)
        if r.ndim != 3 or s.ndim != 4 or s.shape[1:] != r.shape:
            raise ValueError(f"shadings {s.shape} do not match reflectance {r.shape}")
        if self.bicolor is not None and len(self.bicolor) != s.shape[0]:
            raise ValueError("one bi-color shading per frame required")
        object.__setattr__(self, "log_reflectance", r)
        object.__setattr__(self, "log_shadings", s)

    def __len__(self):
        return self.log_shadings.shape[0]

    def reconstruct(self, i: int, log_reflectance: np.ndarray | None = None, gamma: GammaParams = GammaParams()) -> np.ndarray:
        """sRGB frame ``i`` from its shading and (by default) the shared reflectance."""
        r = self.log_reflectance if log_reflectance is None else log_reflectance
        return gamma.A * recompose_array(r, self.log_shadings[i]) ** gamma.gamma


@dataclass(frozen=True)
class FitConfig:
    iterations: int = 100
    learning_rate: float = 0.02  # only used by the Adam optimizer
    weight_recon: float = 1.0
    weight_rc: float = 1.0
    weight_wl: float = 1e-3
    weight_smooth: float = 1.0
    mono_color: bool = False
    seed: int = 0
    smooth: float = 0.01  # Charbonnier scale that makes the L1 terms differentiable
    optimizer: str = "lbfgs"  # or "adam"
    init: str = "shade_floor"  # or "median"
    refine_rounds: int = 2  # per-pixel least-squares restarts for free bi-color masks
    # second start for free masks: a short descent under a heavier white-light
    # weight, then the same schedule; the lower final objective wins
    warm_wl: float = 0.1
    warm_iterations: int = 40

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError(f"iterations must be >= 0, got {self.iterations}")
        if self.refine_rounds < 0 or self.warm_iterations < 0:
            raise ValueError("refine_rounds and warm_iterations must be >= 0")
        for name in ("weight_recon", "weight_rc", "weight_wl", "weight_smooth", "warm_wl"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not self.learning_rate > 0 or not self.smooth > 0:
            raise ValueError("learning_rate and smooth must be positive")
        if self.optimizer not in ("lbfgs", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.init not in ("shade_floor", "median"):
            raise ValueError(f"unknown initialisation {self.init!r}")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def stack_logs(stack, gamma: GammaParams = GammaParams(), floor: float = LOG_FLOOR) -> np.ndarray:
    a = stack.array() if isinstance(stack, Stack) else np.asarray(stack, dtype=np.float64)
    return np.log(np.maximum((a / gamma.A) ** (1.0 / gamma.gamma), floor))


# --- gradient-median baseline ----------------------------------------------


def forward_gradients(u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Forward differences, wrapping in x and zero on the last row in y."""
    gx = np.roll(u, -1, axis=1) - u
    gy = np.zeros_like(u)
    gy[:-1] = u[1:] - u[:-1]
    return gx, gy


def _divergence_adjoint(gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """``Dx^T gx + Dy^T gy`` for the forward-difference operators above."""
    out = np.roll(gx, 1, axis=1) - gx
    out[:-1] -= gy[:-1]
    out[1:] += gy[:-1]
    return out


def poisson_reconstruct(gx: np.ndarray, gy: np.ndarray, return_residual: bool = False):
    """Least-squares integration of a gradient field, zero-mean gauge.

    The normal equations ``(Dx^T Dx + Dy^T Dy) u = Dx^T gx + Dy^T gy`` are
    diagonalised by an FFT along the periodic x axis and a DCT-II along the
    Neumann y axis, so the solve is exact up to rounding.
    """
    gx = np.asarray(gx, dtype=np.float64)
    gy = np.asarray(gy, dtype=np.float64)
    if gx.shape != gy.shape or gx.ndim != 2:
        raise ValueError(f"gradient maps must be matching 2-D arrays, got {gx.shape} and {gy.shape}")
    if not (np.isfinite(gx).all() and np.isfinite(gy).all()):
        raise ValueError("gradient field contains non-finite values")
    h, w = gx.shape
    rhs = _divergence_adjoint(gx, gy)
    lam_x = 2.0 - 2.0 * np.cos(2.0 * np.pi * np.arange(w) / w)
    lam_y = 2.0 - 2.0 * np.cos(np.pi * np.arange(h) / h)
    spec = fft.fft(fft.dct(rhs, type=2, axis=0, norm="ortho"), axis=1)
    denom = lam_y[:, None] + lam_x[None, :]
    denom[0, 0] = 1.0
    spec /= denom
    spec[0, 0] = 0.0
    u = fft.idct(fft.ifft(spec, axis=1).real, type=2, axis=0, norm="ortho")
    if return_residual:
        ux, uy = forward_gradients(u)
        res = math.sqrt(float(((ux - gx) ** 2).sum() + ((uy[:-1] - gy[:-1]) ** 2).sum()))
        return u, res
    return u


def weiss_mle(stack, gamma: GammaParams = GammaParams()) -> Decomposition:
    """Reflectance from the temporal median of log gradients, shading as the remainder."""
    logs = stack_logs(stack, gamma)
    n = logs.shape[0]
    refl = np.empty(logs.shape[1:])
    residuals = []
    for ch in range(3):
        grads = [forward_gradients(logs[i, :, :, ch]) for i in range(n)]
        gx = np.median(np.stack([g[0] for g in grads]), axis=0)
        gy = np.median(np.stack([g[1] for g in grads]), axis=0)
        refl[:, :, ch], res = poisson_reconstruct(gx, gy, return_residual=True)
        residuals.append(res)
    shading = logs - refl
    return Decomposition(refl, shading, None, {"method": "weiss", "poisson_residual": residuals})


# --- bi-color direct fit -----------------------------------------------------


def _rho(x, eps):
    r = np.sqrt(x * x + eps * eps)
    return r - eps, x / r


def forward_gradients_batch(s: np.ndarray):
    gx = np.roll(s, -1, axis=-1) - s
    gy = np.zeros_like(s)
    gy[..., :-1, :] = s[..., 1:, :] - s[..., :-1, :]
    return gx, gy


def divergence_adjoint_batch(gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    out = np.roll(gx, 1, axis=-1) - gx
    out[..., :-1, :] -= gy[..., :-1, :]
    out[..., 1:, :] += gy[..., :-1, :]
    return out


def shade_floor_init(logs: np.ndarray, mono_color: bool = False, rank: int = 0) -> dict:
    """Initial factors from each pixel's darkest exposures.

    Frames are first normalised by their median offset from the temporal
    median.  Outdoors most surfaces fall into shadow in some frame, so the
    ``rank``-th lowest normalised observation approximates reflectance under
    skylight; whatever a frame adds on top of it is attributed to the sun
    through the mixing mask.
    """
    n = logs.shape[0]
    med = np.median(logs, axis=0)
    offset = np.median((logs - med).reshape(n, -1, 3), axis=1)  # (n, 3)
    norm = logs - offset[:, None, None, :]
    R = np.sort(norm, axis=0)[min(rank, n - 1)]
    excess = luminance(norm - R)
    gray = luminance(offset)
    if mono_color:
        return {"R": R, "s": gray[:, None, None] + excess}
    strength = np.maximum(np.percentile(excess, 95, axis=(1, 2)), 0.05)
    m = np.clip(excess / strength[:, None, None], 0.02, 0.98)
    c2 = offset - gray[:, None]
    return {
        "R": R,
        "s": np.broadcast_to(gray[:, None, None], excess.shape).copy(),
        "c1": c2 + strength[:, None],
        "c2": c2,
        "a": np.log(m / (1.0 - m)),
    }


def median_init(logs: np.ndarray, mono_color: bool = False, seed: int = 0) -> dict:
    """Temporal-median reflectance, luminance-residual intensity, neutral colors.

    ``c1 = c2`` with a uniform mask is a saddle of the objective, so the mask
    logits get a tiny seeded jitter to let the two illuminants separate.
    """
    n, h, w, _ = logs.shape
    R = np.median(logs, axis=0)
    parts = {"R": R, "s": luminance(logs - R)}
    if not mono_color:
        parts["c1"] = np.zeros((n, 3))
        parts["c2"] = np.zeros((n, 3))
        parts["a"] = 1e-2 * np.random.default_rng(seed).standard_normal((n, h, w))
    return parts


class BiColorProblem:
    """Objective and gradient over the packed free variables of the bi-color model.

    ``f = w_recon * mean rho(log I - R - S) + w_rc * L_RC(log I - S)
    + w_wl * L_WL(B) + w_smooth * mean |grad s|^2`` with ``rho`` the
    Charbonnier form of ``|.|`` at scale ``cfg.smooth``.
    """

    def __init__(self, logs, cfg: FitConfig, fixed_mask=None):
        self.logs = np.ascontiguousarray(logs, dtype=np.float64)
        self.cfg = cfg
        n, h, w, _ = logs.shape
        self.n, self.h, self.w = n, h, w
        self.fixed_mask = None if fixed_mask is None else np.asarray(fixed_mask, dtype=np.float64)
        self.has_color = not cfg.mono_color
        self.free_mask = self.has_color and self.fixed_mask is None
        sizes = [("R", (h, w, 3)), ("s", (n, h, w))]
        if self.has_color:
            sizes += [("c1", (n, 3)), ("c2", (n, 3))]
        if self.free_mask:
            sizes.append(("a", (n, h, w)))
        self.layout = []
        off = 0
        for name, shape in sizes:
            size = int(np.prod(shape))
            self.layout.append((name, shape, off, off + size))
            off += size
        self.size = off
        # per-pixel variables see ~1/P of the curvature of the global colors;
        # optimizing in rescaled coordinates keeps quasi-Newton steps balanced
        self.scale = np.ones(off)
        for name, shape, a, b in self.layout:
            if name in ("R", "s", "a"):
                self.scale[a:b] = math.sqrt(h * w)

    def unpack(self, x):
        return {name: x[a:b].reshape(shape) for name, shape, a, b in self.layout}

    def pack(self, parts) -> np.ndarray:
        x = np.empty(self.size)
        for name, shape, a, b in self.layout:
            x[a:b] = np.asarray(parts[name], dtype=np.float64).reshape(-1)
        return x

    def initial(self) -> np.ndarray:
        if self.cfg.init == "median":
            parts = median_init(self.logs, self.cfg.mono_color, self.cfg.seed)
        else:
            parts = shade_floor_init(self.logs, self.cfg.mono_color)
        return self.pack(parts)

    def mask(self, p):
        if not self.has_color:
            return np.zeros((self.n, self.h, self.w))
        if self.fixed_mask is not None:
            return self.fixed_mask
        return 1.0 / (1.0 + np.exp(-p["a"]))

    def shading(self, p):
        """Full log shading (n, H, W, 3) and bi-color fields (None when mono-color)."""
        S = np.repeat(p["s"][..., None], 3, axis=-1)
        if not self.has_color:
            return S, None
        M = self.mask(p)[..., None]
        B = p["c2"][:, None, None, :] + M * (p["c1"] - p["c2"])[:, None, None, :]
        return S + B, B

    def terms(self, x) -> dict:
        """Unsmoothed value of every term, for reports."""
        p = self.unpack(x)
        S, B = self.shading(p)
        refl = self.logs - S
        gx, gy = forward_gradients_batch(p["s"])
        return {
            "recon": float(np.abs(refl - p["R"]).mean()),
            "rc": float(loss_rc(refl)),
            "wl": float(loss_wl(B)) if B is not None else 0.0,
            "smooth": float(((gx * gx).sum() + (gy * gy).sum()) / p["s"].size),
        }

    def _smooth_term(self, s):
        gx, gy = forward_gradients_batch(s)
        k = self.cfg.weight_smooth / s.size
        return k * float((gx * gx).sum() + (gy * gy).sum()), 2.0 * k * divergence_adjoint_batch(gx, gy)

    def _finish(self, p, f, dR, ds, dc1, dc2, dM):
        fs, gs = self._smooth_term(p["s"])
        grad = {"R": dR, "s": ds + gs}
        if self.has_color:
            grad["c1"], grad["c2"] = dc1, dc2
            if self.free_mask:
                m = self.mask(p)
                grad["a"] = dM * m * (1.0 - m)
        return float(f + fs), self.pack(grad)

    def __call__(self, x):
        cfg = self.cfg
        p = self.unpack(x)
        c1 = p["c1"] if self.has_color else np.zeros((self.n, 3))
        c2 = p["c2"] if self.has_color else np.zeros((self.n, 3))
        out = bicolor_terms(
            self.logs, np.ascontiguousarray(p["R"]), np.ascontiguousarray(p["s"]), c1, c2,
            np.ascontiguousarray(self.mask(p)), self.has_color,
            cfg.weight_recon, cfg.weight_rc, cfg.weight_wl, cfg.smooth,
        )
        return self._finish(p, *out)

    def reference(self, x):
        """Vectorised numpy evaluation of the same objective (independent route)."""
        cfg = self.cfg
        eps = cfg.smooth
        n = self.n
        p = self.unpack(x)
        S, B = self.shading(p)
        refl = self.logs - S
        resid = refl - p["R"]
        val_r, psi = _rho(resid, eps)
        f = cfg.weight_recon * val_r.mean()
        d_refl = cfg.weight_recon * psi / resid.size
        dR = -d_refl.sum(axis=0)
        if cfg.weight_rc > 0 and n >= 2:
            norm = n * (n - 1) // 2 * refl[0].size
            d_rc = np.zeros_like(refl)
            for i in range(n - 1):
                for j in range(i + 1, n):
                    v, g = _rho(refl[i] - refl[j], eps)
                    f += cfg.weight_rc * v.sum() / norm
                    d_rc[i] += g
                    d_rc[j] -= g
            d_refl = d_refl + cfg.weight_rc * d_rc / norm
        dS = -d_refl
        ds = dS.sum(axis=-1)
        dc1 = dc2 = dM = None
        if B is not None:
            dB = dS.copy()
            if cfg.weight_wl > 0:
                sB = B.sum(axis=0)
                v, g = _rho(sB, eps)
                f += cfg.weight_wl * v.mean()
                dB += cfg.weight_wl * g / sB.size
            M = self.mask(p)[..., None]
            dc1 = (dB * M).sum(axis=(1, 2))
            dc2 = (dB * (1.0 - M)).sum(axis=(1, 2))
            dM = (dB * (p["c1"] - p["c2"])[:, None, None, :]).sum(axis=-1)
        return self._finish(p, f, dR, ds, dc1, dc2, dM)


class _Best:
    """Lowest objective seen across optimizer stages; the trace records it."""

    def __init__(self, f, x):
        self.f, self.x = f, x.copy()
        self.trace = [f]

    def offer(self, f, x):
        if not math.isfinite(f):
            raise FitError(f"non-finite objective {f}")
        if f < self.f:
            self.f, self.x = f, x.copy()


def _minimize_adam(problem, x, iterations, cfg: FitConfig, best: _Best):
    f, g = problem(x)
    best.offer(f, x)
    v = np.zeros_like(x)
    scale = 1.0
    for t in range(1, iterations + 1):
        v = 0.999 * v + 0.001 * g * g
        direction = g / (np.sqrt(v / (1.0 - 0.999**t)) + 1e-8)
        for _ in range(12):
            cand = x - cfg.learning_rate * scale * direction
            fc, gc = problem(cand)
            if fc < f:
                x, f, g = cand, fc, gc
                scale = min(1.0, scale * 1.1)
                break
            scale *= 0.5
        best.offer(f, x)
        best.trace.append(best.f)


def _minimize_lbfgs(problem, x, iterations, cfg: FitConfig, best: _Best):
    d = problem.scale

    def fun(z):
        x = z * d
        f, g = problem(x)
        best.offer(f, x)
        return f, g * d

    def callback(z):
        best.trace.append(best.f)

    optimize.minimize(
        fun, x / d, jac=True, method="L-BFGS-B", callback=callback,
        options={"maxiter": iterations, "maxcor": 5, "ftol": 0.0, "gtol": 1e-12, "maxfun": iterations * 4},
    )


def pixel_refine(problem: "BiColorProblem", x: np.ndarray, rounds: int = 4) -> np.ndarray:
    """Re-solve reflectance and mixing masks per pixel with the frame colors held.

    With ``s``, ``c1`` and ``c2`` fixed the residual ``y_i = log I_i - s_i -
    c2_i`` is linear in ``(R, M_i)``: ``y_i = R + M_i k_i`` with ``k_i = c1_i -
    c2_i``.  Eliminating each ``M_i`` leaves a 3x3 least-squares system for
    ``R`` per pixel; the color spread of the ``k_i`` pins down the part of
    ``R`` that a gradient fit trades against masks that are never zero.
    Masks leaving ``[0, 1]`` are clamped at the bound and the solve repeated
    (an active-set pass), at most ``rounds`` times.  Directions the system
    leaves undetermined (all ``k_i`` parallel, as under gray light) keep the
    current ``R``.
    """
    p = {k: v.copy() for k, v in problem.unpack(x).items()}
    logs = problem.logs
    n = logs.shape[0]
    k = p["c1"] - p["c2"]
    kk = np.maximum((k * k).sum(axis=1), 1e-12)
    y = logs - p["s"][..., None] - p["c2"][:, None, None, :]
    proj = np.einsum("ic,id->icd", k, k) / kk[:, None, None]
    fixed = np.zeros(logs.shape[:3], dtype=bool)
    value = np.zeros(logs.shape[:3])
    R0 = p["R"]
    for _ in range(rounds):
        free = (~fixed).astype(np.float64)
        ky = np.einsum("ic,ihwc->ihw", k, y) / kk[:, None, None]
        G = n * np.eye(3) - np.einsum("ihw,icd->hwcd", free, proj)
        rhs = y.sum(axis=0) - np.einsum("ihw,ic->hwc", free * ky + fixed * value, k)
        lam, V = np.linalg.eigh(G)
        inv = np.where(lam > 1e-9 * n, 1.0 / np.where(lam > 0, lam, 1.0), 0.0)
        r = np.einsum("hwcd,hwc->hwd", V, rhs - np.einsum("hwcd,hwd->hwc", G, R0))
        R = R0 + np.einsum("hwcd,hwd->hwc", V, inv * r)
        M = np.einsum("ic,ihwc->ihw", k, y - R[None]) / kk[:, None, None]
        M = np.where(fixed, value, M)
        grown = fixed | (M < 0.0) | (M > 1.0)
        value = np.where(grown & ~fixed, np.clip(M, 0.0, 1.0), value)
        if (grown == fixed).all():
            break
        fixed = grown
    M = np.clip(M, 1e-4, 1.0 - 1e-4)
    p["R"] = R
    p["a"] = np.log(M / (1.0 - M))
    return problem.pack(p)


def _stages(iterations: int, rounds: int) -> list[int]:
    """Iteration budget per optimizer stage: 30% after each refinement, the rest first."""
    later = [int(math.ceil(0.3 * iterations))] * rounds
    first = iterations - sum(later)
    if first < 1:
        return [iterations]
    return [first] + later


def _descend(problem: BiColorProblem, starts, cfg: FitConfig) -> _Best:
    """Optimizer stages with per-pixel refits in between.

    Every start runs the first stage; the lowest objective continues alone.
    """
    bests = []
    for x in starts:
        f0 = problem(x)[0]
        if not math.isfinite(f0):
            raise FitError(f"non-finite objective {f0}")
        bests.append(_Best(f0, x))
    if cfg.iterations == 0:
        return bests[0]
    minimize = _minimize_adam if cfg.optimizer == "adam" else _minimize_lbfgs
    rounds = cfg.refine_rounds if problem.free_mask else 0
    first, *later = _stages(cfg.iterations, rounds)
    for best in bests:
        minimize(problem, best.x, first, cfg, best)
    best = min(bests, key=lambda b: b.f)
    for budget in later:
        # the refined point usually costs more than the one it restarts
        # from; only a lower objective downstream replaces the best
        minimize(problem, pixel_refine(problem, best.x), budget, cfg, best)
    return best


def white_light_gauge(problem: BiColorProblem, x):
    """Move a global colour shift between reflectance and both light colours.

    Shifting every ``c1``, ``c2`` by ``k`` and ``R`` by ``-k`` leaves the
    reconstruction, consistency and smoothness terms unchanged, so only the
    white-light term sees it.  Per channel its L1 form is minimised by
    ``k = -median(sum_i B_i) / n``, which the weak white-light weight leaves
    the optimiser slow to find.
    """
    p = problem.unpack(x)
    _, B = problem.shading(p)
    k = -np.median(B.sum(axis=0), axis=(0, 1)) / problem.n
    p["R"] = p["R"] - k
    p["c1"] = p["c1"] + k
    p["c2"] = p["c2"] + k
    return problem.pack(p)


def bicolor_fit(stack, cfg: FitConfig = FitConfig(), gamma: GammaParams = GammaParams(), fixed_mask=None) -> Decomposition:
    """Fit the shared reflectance and per-frame bi-color (or mono-color) shading.

    ``fixed_mask`` (n x H x W in [0, 1]) replaces the free mixing masks, for
    callers that know the sun-visibility geometry.
    """
    logs = stack_logs(stack, gamma)
    if logs.shape[0] < 2:
        raise FitError("bi-color fitting needs at least 2 frames")
    if fixed_mask is not None:
        fm = np.asarray(fixed_mask, dtype=np.float64)
        if fm.shape != logs.shape[:3] or fm.min() < 0 or fm.max() > 1:
            raise FitError(f"fixed mask must be {logs.shape[:3]} with values in [0, 1]")
    problem = BiColorProblem(logs, cfg, fixed_mask)
    x = problem.initial()
    starts = [x]
    if cfg.iterations > 0 and cfg.warm_iterations > 0 and problem.free_mask:
        # free masks can settle where they soak up a reflectance offset (open
        # sky is the usual case); a start steered toward white total light
        # escapes that basin, and the shared objective picks between the two
        # after the first stage
        warm_cfg = FitConfig(**{**cfg.to_dict(), "weight_wl": cfg.warm_wl})
        warm = BiColorProblem(logs, warm_cfg, fixed_mask)
        pre = _Best(warm(x)[0], x)
        _minimize_lbfgs(warm, x, cfg.warm_iterations, warm_cfg, pre)
        starts.append(pixel_refine(problem, pre.x))
    best = _descend(problem, starts, cfg)
    x, trace = best.x, best.trace
    if not np.isfinite(x).all():
        raise FitError("non-finite parameters after fitting")

    if problem.has_color and cfg.weight_wl > 0:
        x = white_light_gauge(problem, x)
    p = problem.unpack(x)
    # report logR in the zero-mean gauge; the offset moves into log intensity,
    # which leaves every term of the objective unchanged
    offset = p["R"].mean()
    p["R"] = p["R"] - offset
    p["s"] = p["s"] + offset
    S, _ = problem.shading(p)
    mask = problem.mask(p)
    zeros = np.zeros(3)
    shadings = tuple(
        BiColorShading(
            p["s"][i],
            p["c1"][i] if problem.has_color else zeros,
            p["c2"][i] if problem.has_color else zeros,
            mask[i],
        )
        for i in range(logs.shape[0])
    )
    report = {
        "method": "monocolor" if cfg.mono_color else "bicolor",
        "objective_trace": trace,
        "terms": problem.terms(x),
        "config": cfg.to_dict(),
    }
    return Decomposition(p["R"].copy(), S, shadings, report)


def fit_stack(stack, method: str, cfg: FitConfig | None = None, gamma: GammaParams = GammaParams()) -> Decomposition:
    """Dispatch by method name: ``weiss``, ``bicolor`` or ``monocolor``."""
    if method == "weiss":
        return weiss_mle(stack, gamma)
    if method in ("bicolor", "monocolor"):
        base = cfg or FitConfig()
        if (method == "monocolor") != base.mono_color:
            base = FitConfig(**{**base.to_dict(), "mono_color": method == "monocolor"})
        return bicolor_fit(stack, base, gamma)
    raise ValueError(f"unknown factorization method {method!r}")


# --- baselines and metrics ---------------------------------------------------


def mse(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(((a - b) ** 2).mean())


def pixel_nn_baseline(stack, target_index: int) -> float:
    """MSE between the target frame and the closest other frame of the stack."""
    a = stack.array() if isinstance(stack, Stack) else np.asarray(stack, dtype=np.float64)
    if a.shape[0] < 2:
        raise ValueError("pixel nearest neighbour needs at least 2 frames")
    if not 0 <= target_index < a.shape[0]:
        raise IndexError(f"target index {target_index} out of range")
    return min(mse(a[target_index], a[j]) for j in range(a.shape[0]) if j != target_index)


def correlation(a, b) -> float:
    """Pearson correlation per channel, averaged (invariant to per-channel offsets)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 2:
        return float(np.corrcoef(a.ravel(), b.ravel())[0, 1])
    return float(np.mean([np.corrcoef(a[..., c].ravel(), b[..., c].ravel())[0, 1] for c in range(a.shape[-1])]))
