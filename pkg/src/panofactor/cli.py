"""Command-line entry point.

Every subcommand accepts ``--seed``, ``--out``, ``--config`` (a JSON object
whose keys are option names, overriding defaults; explicit flags still win),
``--threads``, ``--resolution`` and ``--gamma``, and finishes by writing a
run manifest: the full configuration, the argument vector and the SHA-256 of
every artifact it wrote.  ``replay`` re-executes a run manifest and checks
that the artifacts come out identical.

Exit codes: 0 success, 1 usage error, 2 data error.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import sys
from functools import partial
from pathlib import Path

import numpy as np

from . import __version__
from .azimuth import AzimuthError, azimuth_metrics, circular_mean, estimate_azimuth, wrap_angle
from .congeal import AlignConfig, AlignError, AlignMode, align_stack
from .corpus import frame_id, load_synth_corpus, write_synth_corpus
from .evaluate import (
    alignment_bench,
    alignment_corpus,
    AlignmentCase,
    azimuth_bench,
    azimuth_corpus,
    completion_benchmark,
    consistency_benchmark,
    consistency_corpus,
    relight_demo,
)
from .image import (
    DEFAULT_RESOLUTION,
    GammaParams,
    ImageError,
    display_normalize,
    parse_resolution,
    read_png,
    sidecar,
    write_float_map,
    write_png,
)
from .ingest import (
    DEFAULT_RADIUS_M,
    CaptureRecord,
    StackError,
    StackSkeleton,
    greedy_cluster,
    load_stack,
    read_manifest,
    write_manifest,
)
from .intrinsics import FitConfig, FitError, fit_stack
from .parallel import available_threads, pmap
from .synth import spacetime_grid, sun_visible

log = logging.getLogger("panofactor")

RUN_MANIFEST = "run_manifest.json"
DATA_ERRORS = (StackError, ImageError, FitError, AlignError, AzimuthError, OSError, ValueError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


# --- helpers -----------------------------------------------------------------


def _gamma(args) -> GammaParams:
    if not args.gamma >= 1:
        raise UsageError(f"--gamma must be >= 1 (the display exponent, e.g. 2.2), got {args.gamma}")
    return GammaParams(1.0, 1.0 / args.gamma)


def _resolution(args) -> tuple[int, int]:
    try:
        return parse_resolution(args.resolution)
    except ImageError as exc:
        raise UsageError(str(exc)) from None


def _require(args, *names):
    for n in names:
        if getattr(args, n, None) is None:
            raise UsageError(f"{args.command}: --{n.replace('_', '-')} is required")


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def _skeletons(args) -> list[StackSkeleton]:
    skels = read_manifest(args.manifest)
    if args.stack:
        wanted = set(args.stack)
        missing = wanted - {s.stack_id for s in skels}
        if missing:
            raise StackError(f"{args.manifest}: no stack(s) {sorted(missing)}")
        skels = [s for s in skels if s.stack_id in wanted]
    return skels


def _manifest_dir(args) -> Path:
    return Path(args.manifest).resolve().parent


def _preview(path: Path, log_map: np.ndarray) -> Path:
    """Display-only PNG of a log-domain map, stretched per image."""
    write_png(path, display_normalize(log_map))
    return path


# --- subcommands -------------------------------------------------------------


def cmd_ingest(args, out: Path) -> list[Path]:
    _require(args, "records")
    try:
        obj = json.loads(Path(args.records).read_text())
    except json.JSONDecodeError as exc:
        raise StackError(f"{args.records}: malformed JSON ({exc})") from None
    entries = obj.get("records") if isinstance(obj, dict) else obj
    if not isinstance(entries, list):
        raise StackError(f"{args.records}: expected a list of capture records")
    records = [CaptureRecord.from_json(e) for e in entries]
    stacks = greedy_cluster(records, args.radius)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(stacks, out / "manifest.json")
    log.info("%d records -> %d stacks", len(records), len(stacks))
    return [out / "manifest.json"]


def cmd_synth(args, out: Path) -> list[Path]:
    if args.scenes < 1 or not 1 <= args.times <= 8 or args.jitter < 0:
        raise UsageError("synth: need --scenes >= 1, --times in 1..8 and --jitter >= 0")
    return write_synth_corpus(out, args.scenes, args.times, args.jitter, args.seed, _resolution(args), _gamma(args), args.threads)


def _align_one(skel, base, resolution, cfg):
    return align_stack(load_stack(skel, resolution, base), cfg)


def cmd_align(args, out: Path) -> list[Path]:
    _require(args, "manifest")
    cfg = AlignConfig(
        steps=args.steps, learning_rate=args.learning_rate, mode=AlignMode(args.mode), seed=args.seed, gamma=_gamma(args)
    )
    skels = _skeletons(args)
    results = pmap(partial(_align_one, base=_manifest_dir(args), resolution=_resolution(args), cfg=cfg), skels, args.threads)
    written, new_skels = [], []
    for skel, res in zip(skels, results):
        d = out / skel.stack_id
        d.mkdir(parents=True, exist_ok=True)
        records = []
        for rec, frame, grid in zip(skel.records, res.stack.frames, res.warps):
            png = d / f"{rec.id}.png"
            write_png(png, frame)
            grid.save(d / f"{rec.id}.warp.f32")
            written += [png, d / f"{rec.id}.warp.f32"]
            # aligned frames are already heading-normalised
            records.append(CaptureRecord(rec.id, f"{skel.stack_id}/{rec.id}.png", rec.lat, rec.lon, 0.0, rec.timestamp))
        written.append(_write_json(d / "align.json", {"config": cfg.to_dict(), "loss_trace": list(res.loss_trace), "rejected": res.rejected}))
        new_skels.append(StackSkeleton(skel.stack_id, tuple(records)))
    write_manifest(new_skels, out / "manifest.json")
    return [out / "manifest.json"] + written


def _fit_one(skel, base, resolution, method, cfg, gamma):
    return fit_stack(load_stack(skel, resolution, base), method, cfg, gamma)


def cmd_decompose(args, out: Path) -> list[Path]:
    _require(args, "manifest")
    gamma = _gamma(args)
    cfg = FitConfig(iterations=args.iterations, seed=args.seed, mono_color=args.method == "monocolor")
    skels = _skeletons(args)
    fits = pmap(
        partial(_fit_one, base=_manifest_dir(args), resolution=_resolution(args), method=args.method, cfg=cfg, gamma=gamma),
        skels,
        args.threads,
    )
    written = []
    for skel, fit in zip(skels, fits):
        d = out / skel.stack_id
        d.mkdir(parents=True, exist_ok=True)
        write_float_map(d / "log_reflectance.f32", fit.log_reflectance, "log")
        written += [d / "log_reflectance.f32", _preview(d / "log_reflectance.preview.png", fit.log_reflectance)]
        for i, rec in enumerate(skel.records):
            write_float_map(d / f"{rec.id}.shading.f32", fit.log_shadings[i], "log")
            recon = d / f"{rec.id}.recon.png"
            write_png(recon, np.clip(fit.reconstruct(i, gamma=gamma), 0.0, 1.0))
            written += [d / f"{rec.id}.shading.f32", recon, _preview(d / f"{rec.id}.shading.preview.png", fit.log_shadings[i])]
        report = {
            "stack_id": skel.stack_id,
            "method": args.method,
            "frames": [r.id for r in skel.records],
            "previews": "min/max normalised per image, display only",
            "fit": {k: v for k, v in fit.fit_report.items()},
        }
        if fit.bicolor is not None:
            report["illumination"] = [{"c1": b.c1.tolist(), "c2": b.c2.tolist()} for b in fit.bicolor]
        written.append(_write_json(d / "fit.json", report))
    return written


def cmd_azimuth(args, out: Path | None) -> list[Path]:
    if (args.image is None) == (args.manifest is None):
        raise UsageError("azimuth: give exactly one of --image or --manifest")
    if args.image is not None:
        pano = read_png(args.image)
        dist = estimate_azimuth(pano)
        phi = circular_mean(dist)
        lines = ["bins " + " ".join(f"{v:.6f}" for v in dist.bins), f"phi_bar_deg {math.degrees(phi):.4f}"]
        result = {"image": str(args.image), "bins": dist.bins.tolist(), "phi_bar_deg": math.degrees(phi)}
        if args.gt_deg is not None:
            cos_sim, err = azimuth_metrics([phi], [math.radians(args.gt_deg)])
            lines.append(f"cos_sim {cos_sim:.6f}")
            lines.append(f"ang_err_deg {err:.4f}")
            result.update(gt_deg=args.gt_deg, cos_sim=cos_sim, ang_err_deg=err)
        print("\n".join(lines))
        if out is None:
            return []
        out.mkdir(parents=True, exist_ok=True)
        return [_write_json(out / "azimuth.json", result)]
    # batch mode: ground truth comes from a synthetic corpus beside the manifest, if there is one
    base = _manifest_dir(args)
    truth = {}
    if (base / "corpus.json").is_file():
        corpus = json.loads((base / "corpus.json").read_text())
        for r, _ in enumerate(corpus["scenes"]):
            for t, il in enumerate(corpus["illuminations"]):
                truth[frame_id(r, t)] = il["sun_azimuth"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "phi_bar_deg", "gt_deg", "cos_sim", "ang_err_deg"])
    for skel in _skeletons(args):
        stack = load_stack(skel, _resolution(args), base)
        for rec, frame in zip(skel.records, stack.frames):
            try:
                phi = circular_mean(estimate_azimuth(frame))
            except AzimuthError:
                w.writerow([rec.id, "", "", "", ""])
                continue
            row = [rec.id, f"{math.degrees(phi):.4f}", "", "", ""]
            if rec.id in truth:
                gt = truth[rec.id]
                row[2:] = [f"{math.degrees(gt):.4f}", f"{math.cos(phi - gt):.6f}", f"{math.degrees(abs(float(wrap_angle(phi - gt)))):.4f}"]
            w.writerow(row)
    if out is None:
        sys.stdout.write(buf.getvalue())
        return []
    out.mkdir(parents=True, exist_ok=True)
    (out / "azimuth.csv").write_text(buf.getvalue())
    return [out / "azimuth.csv"]


def cmd_relight(args, out: Path) -> list[Path]:
    _require(args, "corpus", "stack")
    if (args.azimuth_deg is None) == (args.donor_time is None):
        raise UsageError("relight: give exactly one of --azimuth-deg or --donor-time")
    corpus = load_synth_corpus(args.corpus)
    ids = [s.stack_id for s in corpus.stacks]
    if args.stack not in ids:
        raise StackError(f"{args.corpus}: no stack {args.stack!r}")
    r = ids.index(args.stack)
    stack = corpus.stacks[r]
    if not 0 <= args.frame < len(stack):
        raise StackError(f"{args.stack}: no frame {args.frame}")
    if args.donor_time is not None and not 0 <= args.donor_time < len(corpus.illuminations):
        raise StackError(f"{args.corpus}: no time {args.donor_time}")
    fit = fit_stack(stack, "bicolor", FitConfig(seed=args.seed), corpus.gamma)
    target = math.radians(args.azimuth_deg) if args.azimuth_deg is not None else corpus.illuminations[args.donor_time]
    demo = relight_demo(fit, corpus.scenes[r], args.frame, corpus.illuminations[args.frame], target, corpus.resolution, corpus.gamma)
    out.mkdir(parents=True, exist_ok=True)
    write_png(out / "relit.png", demo["pano"])
    write_png(out / "truth.png", demo["truth"])
    info = {"stack": args.stack, "frame": args.frame, "mse": demo["mse"], "target": demo["illumination"].to_dict()}
    return [out / "relit.png", out / "truth.png", _write_json(out / "relight.json", info)]


def _corpus_alignment_cases(corpus):
    return [AlignmentCase(s, corpus.applied_warps(r)) for r, s in enumerate(corpus.stacks)]


def cmd_eval(args, out: Path) -> list[Path]:
    gamma = _gamma(args)
    resolution = _resolution(args)
    corpus = load_synth_corpus(args.corpus) if args.corpus else None
    fit_cfg = FitConfig(seed=args.seed)
    p = args.protocol
    if p == "consistency":
        if corpus is not None:
            stacks = list(corpus.stacks)
            bad = [s for s in stacks if len(s) != 8]
            if bad:
                raise StackError(f"{args.corpus}: consistency needs 8-frame stacks; {bad[0].stack_id} has {len(bad[0])}")
        else:
            stacks = consistency_corpus(args.stacks, args.seed, resolution, gamma)
        report = consistency_benchmark(stacks, cfg=fit_cfg, gamma=corpus.gamma if corpus else gamma, seed=args.seed, workers=args.threads)
    elif p == "completion":
        grid = corpus.to_grid() if corpus is not None else spacetime_grid(3, 4, args.seed, resolution, gamma)
        report = completion_benchmark(grid, fit_cfg, corpus.gamma if corpus else gamma, args.threads)
    elif p == "alignment":
        if corpus is not None:
            cases = _corpus_alignment_cases(corpus)
        else:
            cases = alignment_corpus(args.stacks, seed=args.seed, resolution=resolution, gamma=gamma)
        report = alignment_bench(cases, args.modes, AlignConfig(seed=args.seed, gamma=gamma), args.seed, args.threads)
    else:
        if corpus is not None:
            test, ids = [], []
            for r, (scene, stack) in enumerate(zip(corpus.scenes, corpus.stacks)):
                for t, il in enumerate(corpus.illuminations):
                    if sun_visible(scene, il.sun_azimuth, corpus.resolution):
                        test.append((stack.frames[t], il.sun_azimuth))
                        ids.append(frame_id(r, t))
            if not test:
                raise StackError(f"{args.corpus}: no frame shows the sun")
            report = azimuth_bench(test, None, args.seed, args.threads, ids)
        else:
            test = azimuth_corpus(args.stacks * 5, args.seed, resolution, gamma)
            validation = azimuth_corpus(20, args.seed + 1, resolution, gamma)
            report = azimuth_bench(test, validation, args.seed, args.threads)
    report.validate()
    if str(out).endswith(".json"):
        path, csv_path = out, out.with_suffix(".csv")
        path.parent.mkdir(parents=True, exist_ok=True)
    else:
        out.mkdir(parents=True, exist_ok=True)
        path, csv_path = out / "report.json", out / "report.csv"
    path.write_text(report.to_json())
    csv_path.write_text(report.to_csv())
    for k, v in report.summary.items():
        print(f"{p} {k} {v:.6g}")
    return [path, csv_path]


COMMANDS = {
    "ingest": cmd_ingest,
    "synth": cmd_synth,
    "align": cmd_align,
    "decompose": cmd_decompose,
    "azimuth": cmd_azimuth,
    "relight": cmd_relight,
    "eval": cmd_eval,
}


# --- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    g = common.add_argument_group("common options")
    g.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    g.add_argument("--out", type=Path, help="output directory")
    g.add_argument("--config", type=Path, help="JSON object of option defaults; explicit flags win")
    g.add_argument("--threads", type=int, default=available_threads(), help="worker processes (default: available cores)")
    g.add_argument("--resolution", default="%dx%d" % DEFAULT_RESOLUTION, help="working resolution WxH (default 240x80)")
    g.add_argument("--gamma", type=float, default=2.2, help="display gamma; sRGB = linear^(1/gamma) (default 2.2)")
    g.add_argument("-v", "--verbose", action="count", default=0)

    parser = _Parser(prog="panofactor", description="Panorama stack alignment, intrinsic factorization and relighting.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    p = sub.add_parser("ingest", parents=[common], help="cluster capture records into stacks")
    p.add_argument("--records", type=Path, help="JSON list of capture records")
    p.add_argument("--radius", type=float, default=DEFAULT_RADIUS_M, help="co-location radius in metres")

    p = sub.add_parser("synth", parents=[common], help="render a synthetic corpus with ground truth")
    p.add_argument("--scenes", type=int, default=2)
    p.add_argument("--times", type=int, default=4)
    p.add_argument("--jitter", type=float, default=0.0, help="warp control-point amplitude in pixels")

    p = sub.add_parser("align", parents=[common], help="jointly align the frames of each stack")
    p.add_argument("--manifest", type=Path)
    p.add_argument("--stack", action="append", help="stack id (repeatable; default all)")
    p.add_argument("--mode", choices=[m.value for m in AlignMode], default="rgb")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--learning-rate", type=float, default=0.1)

    p = sub.add_parser("decompose", parents=[common], help="factor stacks into reflectance and shading")
    p.add_argument("--manifest", type=Path)
    p.add_argument("--stack", action="append", help="stack id (repeatable; default all)")
    p.add_argument("--method", choices=["bicolor", "monocolor", "weiss"], default="bicolor")
    p.add_argument("--iterations", type=int, default=100)

    p = sub.add_parser("azimuth", parents=[common], help="estimate sun azimuth distributions")
    p.add_argument("--image", type=Path)
    p.add_argument("--gt-deg", type=float)
    p.add_argument("--manifest", type=Path)
    p.add_argument("--stack", action="append", help="stack id (repeatable; default all)")

    p = sub.add_parser("relight", parents=[common], help="relight a frame of a synthetic corpus")
    p.add_argument("--corpus", type=Path)
    p.add_argument("--stack")
    p.add_argument("--frame", type=int, default=0)
    p.add_argument("--azimuth-deg", type=float)
    p.add_argument("--donor-time", type=int, help="take the illumination of this corpus time")

    p = sub.add_parser("eval", parents=[common], help="run an evaluation protocol")
    p.add_argument("--protocol", choices=["consistency", "completion", "alignment", "azimuth"], default="consistency")
    p.add_argument("--corpus", type=Path, help="synthetic corpus directory (default: generate one from --seed)")
    p.add_argument("--stacks", type=int, default=20, help="size of a generated corpus")
    p.add_argument("--modes", nargs="+", choices=[m.value for m in AlignMode], default=["rgb"])

    p = sub.add_parser("replay", help="re-run a run manifest and compare artifact hashes")
    p.add_argument("run_manifest", type=Path)
    parser.set_defaults(_subparsers=sub.choices)
    return parser


def _parse(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        raise UsageError(parser.format_help())
    if getattr(args, "config", None) is not None:
        try:
            overrides = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"--config {args.config}: {exc}") from None
        if not isinstance(overrides, dict):
            raise UsageError(f"--config {args.config}: expected a JSON object")
        sub = args._subparsers[args.command]
        known = {a.dest for a in sub._actions} - {"help", "config", "command"}
        unknown = set(overrides) - known
        if unknown:
            raise UsageError(f"--config {args.config}: unknown option(s) {sorted(unknown)}")
        sub.set_defaults(**overrides)
        args = parser.parse_args(argv)
    return args


def _config_echo(args) -> dict:
    out = {}
    for k, v in sorted(vars(args).items()):
        if k.startswith("_"):
            continue
        out[k] = str(v) if isinstance(v, Path) else v
    return out


def _replay(args) -> int:
    manifest = json.loads(Path(args.run_manifest).read_text())
    code = main(manifest["argv"])
    if code != 0:
        return code
    base = Path(args.run_manifest).parent
    mismatched = [p for p, h in manifest["artifacts"].items() if not (base / p).is_file() or _sha256(base / p) != h]
    if mismatched:
        print(f"replay: {len(mismatched)} artifact(s) differ, first {mismatched[0]}", file=sys.stderr)
        return 2
    print(f"replay: {len(manifest['artifacts'])} artifacts reproduced")
    return 0


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _parse(argv)
        if args.command == "replay":
            return _replay(args)
        logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        _resolution(args)
        _gamma(args)
        out = args.out
        if out is None and args.command != "azimuth":
            raise UsageError(f"{args.command}: --out is required")
        written = COMMANDS[args.command](args, out)
        if out is not None:
            base = out.parent if str(out).endswith(".json") else out
            base.mkdir(parents=True, exist_ok=True)
            run_name = out.stem + ".run.json" if base is not out else RUN_MANIFEST
            files = set(map(Path, written))
            files |= {sidecar(p) for p in files if sidecar(p).is_file()}
            artifacts = {p.relative_to(base).as_posix(): _sha256(p) for p in sorted(files)}
            _write_json(
                base / run_name,
                {"tool": "panofactor", "version": __version__, "argv": argv, "config": _config_echo(args), "artifacts": artifacts},
            )
        return 0
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return 1
    except DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
