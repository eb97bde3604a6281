"""Evaluation protocols on the synthetic corpus.

* scene consistency: split an 8-frame stack into halves, factor each half,
  swap the shared reflectances and measure the sRGB reconstruction error;
* space-time completion: rebuild a withheld (scene, time) cell from the
  factors of its row and the illumination of its column;
* alignment and azimuth benchmarks, and a relighting demo.

Where the learned geometry pathway would predict a sun-visibility mask, the
synthetic shadow oracle is used instead; every report says so in its notes.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from functools import partial

import numpy as np

from .azimuth import (
    AzimuthDistribution,
    AzimuthError,
    azimuth_metrics,
    calibrate_offset,
    circular_mean,
    estimate_azimuth,
    wrap_angle,
)
from .congeal import AlignConfig, AlignMode, align_stack, endpoint_error, stack_variance
from .image import DEFAULT_RESOLUTION, GammaParams, Panorama, recompose_array
from .ingest import Stack
from .intrinsics import Decomposition, FitConfig, fit_stack, mse
from .parallel import pmap
from .synth import (
    Illumination,
    SpaceTimeGrid,
    SynthScene,
    make_stack,
    random_illuminations,
    render,
    scene_geometry,
    sky_glow,
    sun_mask,
    sun_visible,
)

SCHEMA_VERSION = 1
CONSISTENCY_METHODS = ("bicolor", "monocolor", "weiss", "pixel_nn")
ORACLE_NOTE = "sun-visibility masks at transferred azimuths come from the synthetic shadow oracle"

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["schema_version", "protocol", "seed", "config", "methods", "summary", "instances", "notes"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "protocol": {"enum": ["consistency", "completion", "alignment", "azimuth", "relight"]},
        "seed": {"type": "integer"},
        "config": {"type": "object"},
        "methods": {"type": "array", "items": {"type": "string"}},
        "summary": {"type": "object", "additionalProperties": {"type": "number"}},
        "instances": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "values"],
                "properties": {
                    "id": {"type": "string"},
                    "values": {"type": "object", "additionalProperties": {"type": ["number", "boolean"]}},
                },
            },
        },
        "notes": {"type": "array", "items": {"type": "string"}},
    },
}


@dataclass
class EvalReport:
    protocol: str
    seed: int
    methods: list[str]
    summary: dict[str, float]
    instances: list[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.protocol in ("consistency", "completion"):
            bad = {m: v for m, v in self.summary.items() if m in self.methods and not v >= 0}
            if bad:
                raise ValueError(f"negative or undefined MSE in report: {bad}")

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "protocol": self.protocol,
            "seed": int(self.seed),
            "config": self.config,
            "methods": list(self.methods),
            "summary": {k: float(v) for k, v in self.summary.items()},
            "instances": self.instances,
            "notes": list(self.notes),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def validate(self) -> None:
        validate_report(self.to_dict())

    def to_csv(self) -> str:
        """One row per summary entry: ``protocol,name,value``."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["protocol", "name", "value"])
        for k, v in self.summary.items():
            w.writerow([self.protocol, k, repr(float(v))])
        return buf.getvalue()


def validate_report(data: dict) -> None:
    import jsonschema

    jsonschema.validate(data, REPORT_SCHEMA)


def _srgb(decomp: Decomposition, i: int, log_reflectance=None, gamma: GammaParams = GammaParams()) -> np.ndarray:
    return np.clip(decomp.reconstruct(i, log_reflectance, gamma), 0.0, 1.0)


# --- scene consistency -------------------------------------------------------


def consistency_detail(stack: Stack, method: str, cfg: FitConfig | None = None, gamma: GammaParams = GammaParams()) -> dict:
    """Swap and own-reflectance reconstruction errors for one 8-frame stack.

    ``pixel_nn`` predicts every frame by the closest frame (in MSE) of the
    other half; its swap and own errors coincide.
    """
    if len(stack) != 8:
        raise ValueError(f"{stack.stack_id}: scene consistency needs exactly 8 frames, got {len(stack)}")
    halves = (stack.subset(range(4)), stack.subset(range(4, 8)))
    if method == "pixel_nn":
        a, b = halves[0].array(), halves[1].array()
        errs = [min(mse(x, y) for y in b) for x in a] + [min(mse(y, x) for x in a) for y in b]
        e = float(np.mean(errs))
        return {"swap": e, "own": e}
    if method not in CONSISTENCY_METHODS:
        raise ValueError(f"unknown method {method!r}")
    fits = [fit_stack(h, method, cfg, gamma) for h in halves]
    swap, own = [], []
    for k, (half, fit) in enumerate(zip(halves, fits)):
        other = fits[1 - k].log_reflectance
        for i, frame in enumerate(half.frames):
            swap.append(mse(_srgb(fit, i, other, gamma), frame.data))
            own.append(mse(_srgb(fit, i, None, gamma), frame.data))
    return {"swap": float(np.mean(swap)), "own": float(np.mean(own))}


def scene_consistency(stack: Stack, method: str, cfg: FitConfig | None = None, gamma: GammaParams = GammaParams()) -> float:
    """Mean sRGB MSE of the 8 frames rebuilt with the other half's reflectance."""
    return consistency_detail(stack, method, cfg, gamma)["swap"]


def consistency_corpus(
    n_stacks: int = 20,
    seed: int = 7,
    resolution: tuple[int, int] = DEFAULT_RESOLUTION,
    gamma: GammaParams = GammaParams(),
) -> list[Stack]:
    """Aligned 8-frame stacks, each a fresh scene under 8 random illuminations."""
    rng = np.random.default_rng([seed, 0xC0515])
    stacks = []
    for k in range(n_stacks):
        scene = SynthScene.generate(int(rng.integers(0, 2**31 - 1)))
        illums = random_illuminations(rng, 8)
        st, _, _ = make_stack(scene, illums, 0.0, seed, resolution, gamma, stack_id=f"consistency-{k:02d}")
        stacks.append(st)
    return stacks


def _consistency_instance(stack, methods, cfg, gamma):
    out = {}
    for m in methods:
        d = consistency_detail(stack, m, cfg, gamma)
        out[m] = d["swap"]
        out[f"{m}_own"] = d["own"]
    return {"id": stack.stack_id, "values": out}


def consistency_benchmark(
    stacks,
    methods=CONSISTENCY_METHODS,
    cfg: FitConfig | None = None,
    gamma: GammaParams = GammaParams(),
    seed: int = 7,
    workers: int = 1,
) -> EvalReport:
    methods = list(methods)
    instances = pmap(partial(_consistency_instance, methods=methods, cfg=cfg, gamma=gamma), stacks, workers)
    summary = {m: float(np.mean([inst["values"][m] for inst in instances])) for m in methods}
    return EvalReport(
        "consistency",
        seed,
        methods,
        summary,
        instances,
        {"fit": (cfg or FitConfig()).to_dict(), "stacks": len(instances), "gamma": gamma.gamma},
        ["MSE in sRGB [0, 1]; reflectance swapped between frames 0-3 and 4-7"],
    )


# --- space-time completion ---------------------------------------------------


def _row_stack(grid: SpaceTimeGrid, row: int, cols) -> Stack:
    return Stack(f"row{row}", tuple(grid.cell(row, c).pano for c in cols))


def _descriptors(decomp: Decomposition, sky: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per frame: log shading of a fully shadowed and of a fully sunlit surface point."""
    out = []
    for b in decomp.bicolor:
        level = float(np.median(b.log_intensity[~sky]))
        out.append((level + b.c2, level + b.c1))
    return out


def _fit_row(grid: SpaceTimeGrid, row: int, cols, cfg, gamma):
    cols = tuple(cols)
    decomp = fit_stack(_row_stack(grid, row, cols), "bicolor", cfg, gamma)
    geo = scene_geometry(grid.scenes[row], *grid.resolution)
    return decomp, dict(zip(cols, _descriptors(decomp, geo.sky)))


def _full_row_descriptors(grid, row, cfg, gamma):
    return _fit_row(grid, row, range(grid.shape[1]), cfg, gamma)[1]


def transferred_azimuth(grid: SpaceTimeGrid, withheld: tuple[int, int]) -> float:
    """Circular mean of the pooled azimuth estimates of the other scenes in the column."""
    r, c = withheld
    pooled = sum(estimate_azimuth(grid.cell(k, c).pano).bins for k in range(grid.shape[0]) if k != r)
    dist = AzimuthDistribution.from_weights(pooled)
    try:
        return circular_mean(dist)
    except AzimuthError:
        return float(-math.pi + (dist.argmax + 0.5) * 2.0 * math.pi / dist.bins.size)


def complete_cell(
    grid: SpaceTimeGrid,
    withheld: tuple[int, int],
    cfg: FitConfig | None = None,
    gamma: GammaParams = GammaParams(),
    donors: dict | None = None,
) -> dict:
    """Rebuild one withheld cell; returns its MSE, the pixel-NN MSE and the transferred azimuth.

    Reflectance comes from a fit of the row without the withheld time.  The
    shadowed and sunlit shading levels come from full-row fits of the other
    scenes, moved into the target row's log gauge by the median level
    difference over the times both fits share.  The sun mask and sky glow
    for the target are recomputed by the synthetic oracle at the azimuth
    estimated from the column's other panoramas.
    """
    n_rows, n_cols = grid.shape
    r, c = withheld
    if not (0 <= r < n_rows and 0 <= c < n_cols):
        raise IndexError(f"withheld cell {withheld} outside a {n_rows}x{n_cols} grid")
    cols = [k for k in range(n_cols) if k != c]
    decomp, own = _fit_row(grid, r, cols, cfg, gamma)
    donors = donors if donors is not None else {}
    shadow, sunlit = [], []
    for d in range(n_rows):
        if d == r:
            continue
        if d not in donors:
            donors[d] = _full_row_descriptors(grid, d, cfg, gamma)
        desc = donors[d]
        delta = np.median([own[k][0] - desc[k][0] for k in cols], axis=0)
        shadow.append(desc[c][0] + delta)
        sunlit.append(desc[c][1] + delta)
    a = np.median(shadow, axis=0)
    b = np.median(sunlit, axis=0)

    az = transferred_azimuth(grid, withheld)
    scene = grid.scenes[r]
    geo = scene_geometry(scene, *grid.resolution)
    m = sun_mask(scene, geo, az)[..., None]
    log_shading = a + m * (b - a) + sky_glow(scene, geo, az)[..., None]
    pred = np.clip(gamma.A * recompose_array(decomp.log_reflectance, log_shading) ** gamma.gamma, 0.0, 1.0)
    target = grid.cell(r, c).pano.data
    true_az = grid.illuminations[c].sun_azimuth
    return {
        "mse": mse(pred, target),
        "pixel_nn": min(mse(grid.cell(r, k).pano.data, target) for k in cols),
        "azimuth_error_deg": math.degrees(abs(float(wrap_angle(az - true_az)))),
        "prediction": pred,
    }


def spacetime_completion(
    grid: SpaceTimeGrid, withheld: tuple[int, int], cfg: FitConfig | None = None, gamma: GammaParams = GammaParams()
) -> float:
    """sRGB MSE of the rebuilt withheld cell against its true render."""
    return complete_cell(grid, withheld, cfg, gamma)["mse"]


def _completion_instance(cell, grid, cfg, gamma, donors):
    out = complete_cell(grid, cell, cfg, gamma, dict(donors))
    values = {
        "bicolor_transfer": out["mse"],
        "pixel_nn": out["pixel_nn"],
        "azimuth_error_deg": out["azimuth_error_deg"],
        "win": bool(out["mse"] < out["pixel_nn"]),
    }
    return {"id": f"r{cell[0]}c{cell[1]}", "values": values}


def completion_benchmark(
    grid: SpaceTimeGrid, cfg: FitConfig | None = None, gamma: GammaParams = GammaParams(), workers: int = 1
) -> EvalReport:
    """Withhold every cell in turn."""
    n_rows, n_cols = grid.shape
    full = pmap(partial(_full_row_descriptors, grid, cfg=cfg, gamma=gamma), range(n_rows), workers)
    donors = dict(enumerate(full))
    cells = [(r, c) for r in range(n_rows) for c in range(n_cols)]
    instances = pmap(partial(_completion_instance, grid=grid, cfg=cfg, gamma=gamma, donors=donors), cells, workers)
    wins = [inst["values"]["win"] for inst in instances]
    summary = {
        "bicolor_transfer": float(np.mean([i["values"]["bicolor_transfer"] for i in instances])),
        "pixel_nn": float(np.mean([i["values"]["pixel_nn"] for i in instances])),
        "win_fraction": float(np.mean(wins)),
    }
    return EvalReport(
        "completion",
        grid.seed,
        ["bicolor_transfer", "pixel_nn"],
        summary,
        instances,
        {"fit": (cfg or FitConfig()).to_dict(), "grid": list(grid.shape), "resolution": list(grid.resolution)},
        [ORACLE_NOTE, "pixel_nn is the closest other cell of the same row"],
    )


# --- alignment ---------------------------------------------------------------


@dataclass(frozen=True)
class AlignmentCase:
    stack: Stack
    warps: tuple  # applied perturbation per frame


def alignment_corpus(
    n_stacks: int = 20,
    n_frames: int = 4,
    jitter: float = 3.0,
    seed: int = 7,
    varying_illumination: bool = False,
    resolution: tuple[int, int] = DEFAULT_RESOLUTION,
    gamma: GammaParams = GammaParams(),
) -> list[AlignmentCase]:
    """Jittered stacks; one shared illumination per stack unless ``varying_illumination``."""
    rng = np.random.default_rng([seed, 0xA11C, int(varying_illumination)])
    cases = []
    for k in range(n_stacks):
        scene = SynthScene.generate(int(rng.integers(0, 2**31 - 1)))
        if varying_illumination:
            illums = random_illuminations(rng, n_frames)
        else:
            illums = (Illumination.random(rng),) * n_frames
        st, warps, _ = make_stack(scene, illums, jitter, seed * 1000 + k, resolution, gamma, stack_id=f"align-{k:02d}")
        cases.append(AlignmentCase(st, warps))
    return cases


def _alignment_instance(case: AlignmentCase, modes, cfg: AlignConfig):
    h, w = case.stack.frames[0].height, case.stack.frames[0].width
    values = {"variance_before": stack_variance(case.stack)[1]}
    for mode in modes:
        res = align_stack(case.stack, AlignConfig(**{**_cfg_kwargs(cfg), "mode": AlignMode(mode)}))
        values[f"{mode}_epe"] = endpoint_error(res.warps, case.warps, h, w)
        values[f"{mode}_variance_after"] = stack_variance(res.stack)[1]
    return {"id": case.stack.stack_id, "values": values}


def _cfg_kwargs(cfg: AlignConfig) -> dict:
    return {k: getattr(cfg, k) for k in cfg.__dataclass_fields__}


def alignment_bench(
    corpus, modes=("rgb",), cfg: AlignConfig = AlignConfig(), seed: int = 7, workers: int = 1
) -> EvalReport:
    modes = [AlignMode(m).value for m in modes]
    instances = pmap(partial(_alignment_instance, modes=modes, cfg=cfg), corpus, workers)
    summary = {}
    for mode in modes:
        summary[f"{mode}_epe"] = float(np.mean([i["values"][f"{mode}_epe"] for i in instances]))
        summary[f"{mode}_variance_decreased"] = float(
            np.mean([i["values"][f"{mode}_variance_after"] < i["values"]["variance_before"] for i in instances])
        )
    return EvalReport(
        "alignment",
        seed,
        modes,
        summary,
        instances,
        {"align": cfg.to_dict(), "stacks": len(instances)},
        ["endpoint error in pixels against the inverse of the applied warp, cross-frame mean removed"],
    )


# --- azimuth -----------------------------------------------------------------


def azimuth_corpus(
    n: int = 100, seed: int = 7, resolution: tuple[int, int] = DEFAULT_RESOLUTION, gamma: GammaParams = GammaParams()
) -> list[tuple[Panorama, float]]:
    """Rendered panoramas whose sun disk is at least partly visible, with true azimuths."""
    rng = np.random.default_rng([seed, 0xA21])
    out = []
    while len(out) < n:
        scene = SynthScene.generate(int(rng.integers(0, 2**31 - 1)))
        illum = Illumination.random(rng)
        if sun_visible(scene, illum.sun_azimuth, resolution):
            out.append((render(scene, illum, resolution, gamma)[0], illum.sun_azimuth))
    return out


def _estimate_mean(pano: Panorama) -> float:
    try:
        return circular_mean(estimate_azimuth(pano))
    except AzimuthError:
        return 0.0


def azimuth_bench(test, validation=None, seed: int = 7, workers: int = 1, ids=None) -> EvalReport:
    """Score the estimator on ``test`` after calibrating its offset on ``validation`` (or on ``test``)."""
    test = list(test)
    pred = np.array(pmap(_estimate_mean, [p for p, _ in test], workers))
    gt = np.array([g for _, g in test])
    if validation:
        validation = list(validation)
        vpred = np.array(pmap(_estimate_mean, [p for p, _ in validation], workers))
        offset = calibrate_offset(vpred, [g for _, g in validation])
    else:
        offset = calibrate_offset(pred, gt)
    calibrated = wrap_angle(pred + offset)
    cos_sim, median_deg = azimuth_metrics(calibrated, gt)
    ids = list(ids) if ids is not None else [f"pano-{k:03d}" for k in range(len(test))]
    instances = [
        {
            "id": ids[k],
            "values": {
                "phi_bar_deg": math.degrees(calibrated[k]),
                "gt_deg": math.degrees(gt[k]),
                "cos_sim": float(math.cos(calibrated[k] - gt[k])),
                "ang_err_deg": math.degrees(abs(float(wrap_angle(calibrated[k] - gt[k])))),
            },
        }
        for k in range(len(test))
    ]
    return EvalReport(
        "azimuth",
        seed,
        ["brightest_component"],
        {"cosine_similarity": cos_sim, "median_error_deg": median_deg, "offset_deg": math.degrees(offset)},
        instances,
        {"test": len(test), "validation": len(validation) if validation else 0},
        ["offset calibrated over whole bins"],
    )


# --- relighting --------------------------------------------------------------


def relight_demo(
    decomp: Decomposition,
    scene: SynthScene,
    frame_index: int,
    source: Illumination,
    target,
    resolution: tuple[int, int] = DEFAULT_RESOLUTION,
    gamma: GammaParams = GammaParams(),
) -> dict:
    """Relight fitted frame ``frame_index`` (lit by ``source``) to a new sun azimuth or illumination.

    The fitted log shading keeps everything except the sun term and the sky
    glow, which are swapped out using oracle masks at the old and new
    azimuths.  A donor :class:`Illumination` also moves the shadow level and
    sun contrast by the donor's difference to the source.  Returns the sRGB
    relit panorama, the true render and their MSE.
    """
    if decomp.bicolor is None:
        raise ValueError("relighting needs a bi-color decomposition")
    if not 0 <= frame_index < len(decomp):
        raise IndexError(f"frame {frame_index} out of range")
    new = source.rotated(float(target) - source.sun_azimuth) if not isinstance(target, Illumination) else target
    geo = scene_geometry(scene, *resolution)
    fitted = decomp.bicolor[frame_index]
    contrast = fitted.c1 - fitted.c2
    level = np.zeros(3)
    new_contrast = contrast
    if isinstance(target, Illumination):
        level = (math.log(new.sky_intensity) + new.c2) - (math.log(source.sky_intensity) + source.c2)
        new_contrast = contrast + (new.c1 - new.c2) - (source.c1 - source.c2)
    m_old = sun_mask(scene, geo, source.sun_azimuth)[..., None]
    m_new = sun_mask(scene, geo, new.sun_azimuth)[..., None]
    glow = sky_glow(scene, geo, new.sun_azimuth) - sky_glow(scene, geo, source.sun_azimuth)
    log_shading = decomp.log_shadings[frame_index] + level - m_old * contrast + m_new * new_contrast + glow[..., None]
    relit = np.clip(gamma.A * recompose_array(decomp.log_reflectance, log_shading) ** gamma.gamma, 0.0, 1.0)
    truth = render(scene, new, resolution, gamma)[0].data
    return {"pano": relit, "truth": truth, "mse": mse(relit, truth), "illumination": new}
