"""Independent reference computations shared by the unit and acceptance tests."""
import numpy as np

from panofactor.spline import GRID_COLS, GRID_ROWS, eval_spline, warp, warp_grad


def bspline_kernel(u):
    """Centred uniform cubic B-spline, piecewise closed form."""
    a = np.abs(u)
    return np.where(a < 1, (4 - 6 * a**2 + 3 * a**3) / 6, np.where(a < 2, (2 - a) ** 3 / 6, 0.0))


def brute_force_flow(control, h, w):
    """Direct sum of tensor-product basis functions over every control point.

    Each control point adds its own separable bump to the whole image; rows
    past the lattice edge reuse the edge row and columns wrap.
    """
    flow = np.zeros((h, w, 2))
    sy, sx = h / GRID_ROWS, w / GRID_COLS
    ys = (np.arange(h) + 0.5) / sy - 0.5
    xs = (np.arange(w) + 0.5) / sx - 0.5
    for j in range(-3, GRID_ROWS + 3):
        by = bspline_kernel(ys - j)
        jj = min(max(j, 0), GRID_ROWS - 1)
        for i in range(-3, GRID_COLS + 3):
            bump = by[:, None] * bspline_kernel(xs - i)[None, :]
            flow += bump[..., None] * control[jj, i % GRID_COLS]
    return flow


def _cells(flow, h):
    yy, xx = np.mgrid[0 : flow.shape[0], 0 : flow.shape[1]]
    sx = xx + flow[..., 0]
    sy = yy + flow[..., 1]
    # interior cell index plus the two clamped regions above and below
    cy = np.where(sy <= 0, -1, np.where(sy >= h - 1, h, np.floor(sy)))
    return np.floor(sx), cy


def stencil_crosses_kink(theta, idx, step, h, w):
    """True when moving one control value by +-step takes some sample into another bilinear cell."""
    tp, tm = theta.copy(), theta.copy()
    tp[idx] += step
    tm[idx] -= step
    ap = _cells(eval_spline(tp, h, w), h)
    am = _cells(eval_spline(tm, h, w), h)
    return not (np.array_equal(ap[0], am[0]) and np.array_equal(ap[1], am[1]))


def smooth_test_image(rng, h, w):
    yy, xx = np.mgrid[0:h, 0:w]
    return np.stack([np.sin(xx / 5.0 + c) * np.cos(yy / 4.0 - c) for c in range(3)], -1) + 0.1 * rng.normal(size=(h, w, 3))


def warp_grad_fd_errors(seed, h=32, w=96, step=1e-3, coords=8, max_draws=200):
    """Relative errors of ``warp_grad`` against central differences on one random instance.

    The loss is ``sum(upstream * warp(img, flow(theta)))``.  Along one control
    coordinate it is piecewise quadratic between bilinear kinks, so a central
    difference is exact unless its stencil straddles a kink; such coordinates
    are redrawn.  Returns ``(errors, skipped)``.
    """
    rng = np.random.default_rng(seed)
    img = smooth_test_image(rng, h, w)
    theta = rng.uniform(-1.5, 1.5, (GRID_ROWS, GRID_COLS, 2))
    up = rng.normal(size=img.shape)
    grad = warp_grad(img, theta, up)

    def loss(t):
        return float(np.sum(up * warp(img, eval_spline(t, h, w))))

    errors, skipped = [], 0
    for _ in range(max_draws):
        if len(errors) == coords:
            break
        idx = (int(rng.integers(GRID_ROWS)), int(rng.integers(GRID_COLS)), int(rng.integers(2)))
        if stencil_crosses_kink(theta, idx, step, h, w):
            skipped += 1
            continue
        tp, tm = theta.copy(), theta.copy()
        tp[idx] += step
        tm[idx] -= step
        fd = (loss(tp) - loss(tm)) / (2 * step)
        errors.append(abs(fd - grad[idx]) / max(abs(fd), abs(grad[idx]), 1e-8))
    return errors, skipped


def sparse_shadow_stack(seed, n=8, w=240, h=80):
    """Fixed textured reflectance under per-frame smooth plus sparse-edge shading.

    Every frame gets a constant level and three rectangular shadows at random
    places, so shading gradients are zero away from the shadow edges.  Values stay inside ``(1/255, 1)``
    so neither clipping nor the log floor touches the data.  Returns the
    sRGB frames (gamma 1/2.2) and the true log reflectance.
    """
    from panofactor.synth import fbm, pixel_directions

    rng = np.random.default_rng(seed)
    d = pixel_directions(w, h).reshape(-1, 3)
    logr = np.stack([np.log(0.2 + 0.6 * fbm(d * 6.0, seed * 3 + c)) for c in range(3)], -1).reshape(h, w, 3)
    yy, xx = np.mgrid[0:h, 0:w]
    frames = []
    for _ in range(n):
        s = np.full((h, w), rng.uniform(-0.6, 0.0))
        for _ in range(3):
            x0, y0 = rng.integers(0, w), rng.integers(0, h)
            ww, hh = rng.integers(10, 40), rng.integers(8, 30)
            rect = ((xx - x0) % w < ww) & (yy >= y0) & (yy < y0 + hh)
            s[rect] -= rng.uniform(0.3, 0.8)
        frames.append(np.exp(logr + s[..., None]) ** (1 / 2.2))
    return np.array(frames), logr


def constant_shading_stack(seed, n=6, w=240, h=80):
    """Reflectance of a synthetic scene under spatially constant per-frame shading."""
    from panofactor.synth import SynthScene, scene_geometry

    rng = np.random.default_rng(seed)
    logr = scene_geometry(SynthScene.generate(seed), w, h).log_reflectance
    # keep every value strictly inside (floor, 1)
    logr = np.clip(logr, np.log(0.06), np.log(0.9))
    frames = [np.exp(logr + rng.uniform(-0.1, 0.0, 3)) ** (1 / 2.2) for _ in range(n)]
    return np.array(frames), logr
