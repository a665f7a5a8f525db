"""Command-line entry point: ``emfisim <subcommand>``.

Exit codes: 0 success, 2 configuration error, 3 data error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import warnings
from dataclasses import replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (DEFAULT_THRESHOLDS, accuracy_histogram, classify_records,
                       compare_counts, compute_rates, count_classes, spatial_map)
from .campaign import (CampaignConfig, Phase, baseline_result, config_snapshot,
                       format_trial_log, parse_campaign_config, parse_trial_log, run_exploration,
                       run_spot)
from .fileformat import FormatError, atomic_write, format_table
from .mitigation import (ReferenceCheckPolicy, RedundancyPolicy, WatchdogPolicy,
                         episodes_from_records, evaluate_redundancy, evaluate_reference_check,
                         evaluate_watchdog, format_episodes, parse_episodes)
from .surface import CalibrationError, load_calibration
from .svgplot import histogram_svg, rate_plane_svg, spatial_svg
from .taxonomy import CLASSES, canonical_model

EXIT_CONFIG, EXIT_DATA = 2, 3


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


class RunManifest:
    """Provenance for one command invocation; ``id`` hashes everything but the outputs."""

    def __init__(self, command: str, calibration_sha256: str | None, config: dict, master_seed: int):
        self.body = {"tool_version": __version__, "command": command,
                     "calibration_sha256": calibration_sha256, "config": config,
                     "master_seed": master_seed}
        self.outputs: list[str] = []

    @property
    def id(self) -> str:
        blob = json.dumps(self.body, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def write(self, out: Path) -> Path:
        doc = dict(self.body, id=self.id, outputs=sorted(self.outputs))
        return atomic_write(out / "manifest.json", json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _emit(manifest: RunManifest, out: Path, name: str, text: str) -> None:
    atomic_write(out / name, text)
    manifest.outputs.append(name)


def _tagged_csv(kind: str, manifest: RunManifest, columns, rows) -> str:
    return f"# emfisim-{kind} v1 manifest={manifest.id}\n" + format_table(list(columns), rows)


def _tagged_svg(svg: str, manifest: RunManifest) -> str:
    first, rest = svg.split("\n", 1)
    return f"{first}\n<!-- manifest={manifest.id} -->\n{rest}"


def _fraction_text(f: Fraction | None) -> tuple[str, str]:
    if f is None:
        return "", ""
    return repr(float(f)), f"{f.numerator}/{f.denominator}"


# -- configuration -----------------------------------------------------------

DEFAULT_CONFIG = """emfi-campaign v1
[campaign]
phase = spot
model = resnet18
models = resnet18, resnet50, vgg11
n_images = 512
n_trials = 256
[pulse]
x_mm = 123.4
y_mm = 155.1
z_mm = 0.25
voltage_v = 348
"""


def _load_surface(args):
    try:
        return load_calibration(args.calibration)
    except (OSError, CalibrationError, FormatError, ValueError, KeyError) as exc:
        raise ConfigError(f"calibration: {exc}") from exc


def _load_config(args, phase: str | None, extra: dict | None = None) -> CampaignConfig:
    try:
        text = Path(args.config).read_text() if args.config else DEFAULT_CONFIG
        overrides = dict(extra or {})
        if phase is not None:
            overrides["phase"] = phase
        if args.seed is not None:
            overrides["seed"] = args.seed
        cfg = parse_campaign_config(text, overrides)
        if cfg.phase is Phase.SPOT and getattr(args, "pulse", None):
            x, y, z, v = args.pulse
            cfg = replace(cfg, pulse=replace(cfg.pulse or _any_pulse(), x_mm=x, y_mm=y, z_mm=z,
                                             voltage_v=v))
        return cfg
    except (OSError, FormatError, ValueError, KeyError) as exc:
        raise ConfigError(f"config: {exc}") from exc


def _any_pulse():
    from .surface import PulseConfig
    return PulseConfig(120.0, 154.0, 0.5, 300.0)


def _campaign_overrides(args) -> dict:
    keys = {"model": "model", "mode": "mode", "probe": "probe", "n_images": "n_images",
            "n_trials": "n_trials", "delay_s": "delay_s", "sampler": "sampler"}
    return {cfg_key: getattr(args, attr) for attr, cfg_key in keys.items()
            if getattr(args, attr, None) is not None}


# -- subcommands -------------------------------------------------------------

def cmd_baseline(args) -> int:
    surface = _load_surface(args)
    cfg = _load_config(args, None)
    models = [canonical_model(m) for m in args.models.split(",")] if args.models else list(cfg.models)
    n = args.n_images or cfg.n_images
    profiles = surface.profiles or None
    manifest = RunManifest("baseline", surface.source_sha256,
                           {"models": models, "n_images": n}, cfg.master_seed)
    rows = []
    for m in models:
        try:
            res = baseline_result(m, n, profiles)
        except KeyError as exc:
            raise ConfigError(exc.args[0]) from exc
        from .workload import get_profile
        p = get_profile(m, profiles)
        rows.append([m, n, repr(res.top1), repr(res.top5), repr(p.baseline_top1),
                     repr(p.baseline_top5)])
    out = Path(args.out)
    _emit(manifest, out, "baseline.csv", _tagged_csv(
        "baseline", manifest, ("model", "n_images", "top1", "top5", "reference_top1",
                               "reference_top5"), rows))
    manifest.write(out)
    for r in rows:
        print(f"{r[0]:>10}  top1={float(r[2]):.4f}  top5={float(r[3]):.4f}")
    return 0


def _run_campaign(args, phase: str) -> int:
    surface = _load_surface(args)
    extra = _campaign_overrides(args)
    if phase == "explore" and args.fixed_voltage is not None:
        cfg = _load_config(args, phase, extra)
        cfg = replace(cfg, fixed={**cfg.fixed, "voltage_v": args.fixed_voltage},
                      space=type(cfg.space)(tuple(d for d in cfg.space.dims if d[0] != "voltage_v")))
    else:
        cfg = _load_config(args, phase, extra)
    try:
        records = run_spot(cfg, surface=surface) if phase == "spot" else run_exploration(cfg, surface=surface)
    except (ValueError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc
    manifest = RunManifest(phase, surface.source_sha256, config_snapshot(cfg), cfg.master_seed)
    out = Path(args.out)
    _emit(manifest, out, "trials.csv", format_trial_log(records, manifest.id))
    _emit(manifest, out, "episodes.csv", format_episodes(episodes_from_records(records), manifest.id))
    manifest.write(out)
    counts = count_classes(records)
    print(f"{len(records)} trials  C0..C3 = {counts}")
    return 0


def cmd_spot(args) -> int:
    return _run_campaign(args, "spot")


def cmd_explore(args) -> int:
    return _run_campaign(args, "explore")


def _read_logs(paths):
    records = []
    for p in paths:
        try:
            recs, _ = parse_trial_log(Path(p).read_text())
        except OSError as exc:
            raise DataError(str(exc)) from exc
        except FormatError as exc:
            raise DataError(f"{p}: {exc}") from exc
        records.extend(recs)
    return records


def _read_baselines(path) -> dict:
    try:
        lines = [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]
        import csv
        return {(canonical_model(r["model"]), int(r["n_images"])): float(r["top1"])
                for r in csv.DictReader(lines)}
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"baseline file: {exc}") from exc


def cmd_analyze(args) -> int:
    surface = _load_surface(args)
    records = _read_logs(args.logs)
    profiles = surface.profiles or None
    manifest = RunManifest("analyze", surface.source_sha256,
                           {"logs": [Path(p).name for p in args.logs], "bins": args.bins,
                            "cell_mm": args.cell_mm}, 0)
    out = Path(args.out)
    if not records:
        warnings.warn("trial log is empty; writing empty reports")
        print("warning: empty trial log, nothing to analyse", file=sys.stderr)

    baselines = _read_baselines(args.baseline) if args.baseline else {}
    for key in {(r.model, r.n_images) for r in records}:
        if key not in baselines:
            try:
                baselines[key] = baseline_result(key[0], key[1], profiles).top1
            except KeyError as exc:
                raise DataError(exc.args[0]) from exc
    if not args.trust_classes or any(r.outcome_class is None for r in records):
        try:
            classify_records(records, baselines, DEFAULT_THRESHOLDS)
        except ValueError as exc:
            raise DataError(str(exc)) from exc

    groups: dict[tuple, list] = {}
    for r in records:
        groups.setdefault((r.model, r.timing.value, r.mode.value, r.pulse.probe.name), []).append(r)
    rate_rows, plane, hist_rows = [], [], []
    for key in sorted(groups):
        recs = groups[key]
        s = compute_rates(recs)
        base = baselines[(recs[0].model, recs[0].n_images)]
        h = accuracy_histogram(recs, base, args.bins)
        rate_rows.append([*key, s.n_trial, *s.counts, *_fraction_text(s.r_mis),
                          *_fraction_text(s.r_fail), *_fraction_text(s.r_persist),
                          repr(h.intermediate_fraction), int(h.bimodal)])
        label = "/".join(key[:3])
        plane.append((label, s.r_persist, s.r_fail))
        for lo, hi, c in zip(h.edges[:-1], h.edges[1:], h.counts):
            hist_rows.append([label, repr(float(lo)), repr(float(hi)), int(c)])
        _emit(manifest, out, f"histogram_{'_'.join(key[:3])}.svg",
              _tagged_svg(histogram_svg(h, base, f"Top-1 accuracy, {label}"), manifest))

    _emit(manifest, out, "rates.csv", _tagged_csv(
        "rates", manifest,
        ("model", "timing", "mode", "probe", "n_trial", "n_c0", "n_c1", "n_c2", "n_c3",
         "r_mis", "r_mis_exact", "r_fail", "r_fail_exact", "r_persist", "r_persist_exact",
         "intermediate_fraction", "bimodal"), rate_rows))
    _emit(manifest, out, "histogram.csv",
          _tagged_csv("histogram", manifest, ("group", "bin_lo", "bin_hi", "count"), hist_rows))
    smap = spatial_map(records, args.cell_mm)
    map_rows = []
    for cell in sorted(smap.cells):
        cx, cy = smap.center(cell)
        dom = smap.dominant(cell)
        map_rows.append([repr(cx), repr(cy), *smap.cells[cell], dom.value if dom else ""])
    _emit(manifest, out, "spatial_map.csv", _tagged_csv(
        "spatial-map", manifest, ("x_mm", "y_mm", "n_c0", "n_c1", "n_c2", "n_c3", "dominant_fault"),
        map_rows))
    _emit(manifest, out, "spatial_map.svg", _tagged_svg(spatial_svg(smap), manifest))
    _emit(manifest, out, "rate_plane.csv", _tagged_csv(
        "rate-plane", manifest, ("group", "r_persist", "r_fail"),
        [[lbl, repr(float(rp)), repr(float(rf))] for lbl, rp, rf in plane]))
    _emit(manifest, out, "rate_plane.svg", _tagged_svg(rate_plane_svg(plane), manifest))
    manifest.write(out)
    for row in rate_rows:
        print(f"{'/'.join(row[:3]):>24}  counts={tuple(row[5:9])}  "
              f"r_persist={float(row[13]):.4f}  r_fail={float(row[11]):.4f}")
    return 0


def cmd_mitigate(args) -> int:
    try:
        episodes = parse_episodes(Path(args.episodes).read_text())
    except OSError as exc:
        raise DataError(str(exc)) from exc
    except FormatError as exc:
        raise DataError(f"{args.episodes}: {exc}") from exc
    try:
        policies = {
            "watchdog": WatchdogPolicy(timeout_s=args.timeout),
            "reference": ReferenceCheckPolicy(k_references=args.k, interval_inferences=args.interval,
                                              compare_mode=args.compare,
                                              correlation=args.correlation),
            "redundancy": RedundancyPolicy(n_replicas=args.replicas,
                                           max_inferences=args.max_inferences),
        }
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    seed = args.seed or 0
    manifest = RunManifest("mitigate", None, {
        "episodes": Path(args.episodes).name, "timeout_s": args.timeout, "k": args.k,
        "interval": args.interval, "compare": args.compare, "correlation": args.correlation,
        "replicas": args.replicas, "max_inferences": args.max_inferences,
        "strategies": args.strategy}, seed)
    chosen = list(policies) if args.strategy == "all" else [args.strategy]
    rows = []
    for i, name in enumerate(chosen):
        rng = np.random.default_rng([seed, i])
        pol = policies[name]
        if name == "watchdog":
            rep = evaluate_watchdog(pol, episodes, rng)
        elif name == "reference":
            rep = evaluate_reference_check(pol, episodes, rng)
        else:
            rep = evaluate_redundancy(pol, episodes, rng)
        lat = max(rep.latencies) if rep.latencies else ""
        for r in rep.rows():
            rows.append([*r, repr(lat) if lat != "" else "", rep.latency_unit,
                         repr(rep.false_alarm_rate), repr(rep.overhead)])
    out = Path(args.out)
    _emit(manifest, out, "coverage.csv", _tagged_csv(
        "coverage", manifest, ("strategy", "class", "episodes", "detected", "detection",
                               "max_latency", "latency_unit", "false_alarm_rate", "overhead"), rows))
    manifest.write(out)
    for r in rows:
        if r[2]:
            print(f"{r[0]:>16} {r[1]}: {r[3]}/{r[2]} detected")
    return 0


def cmd_repeat(args) -> int:
    surface = _load_surface(args)
    cfg = _load_config(args, "spot", _campaign_overrides(args))
    seed_b = args.seed_b if args.seed_b is not None else cfg.master_seed + 1
    runs = [run_spot(cfg, surface=surface), run_spot(replace(cfg, master_seed=seed_b), surface=surface)]
    manifest = RunManifest("repeat", surface.source_sha256,
                           dict(config_snapshot(cfg), seed_b=seed_b), cfg.master_seed)
    out = Path(args.out)
    for tag, recs in zip("ab", runs):
        _emit(manifest, out, f"trials_{tag}.csv", format_trial_log(recs, manifest.id))
    ca, cb = count_classes(runs[0]), count_classes(runs[1])
    rep = compare_counts(ca, cb)
    rows = [[c.value, a, b, d] for c, a, b, d in zip(CLASSES, ca, cb, rep.deltas)]
    rows.append(["max", "", "", rep.max_delta])
    _emit(manifest, out, "comparison.csv", _tagged_csv(
        "repeatability", manifest, ("class", "run_a", "run_b", "abs_delta"), rows))
    manifest.write(out)
    print(f"run A {ca}  run B {cb}  max delta {rep.max_delta}")
    return 0


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="campaign config file")
    common.add_argument("--calibration", default=argparse.SUPPRESS,
                        help="fault-surface calibration file (default: bundled surface)")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="master seed")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")

    p = argparse.ArgumentParser(prog="emfisim", parents=[common],
                                description="Simulated EM fault-injection campaigns on an "
                                            "edge inference accelerator.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def campaign_flags(sp, explore=False):
        sp.add_argument("--model")
        sp.add_argument("--mode", choices=("sync", "async"))
        sp.add_argument("--probe")
        sp.add_argument("--n-images", type=int)
        sp.add_argument("--n-trials", type=int)
        sp.add_argument("--delay-s", type=float)
        if explore:
            sp.add_argument("--sampler", choices=("tpe", "uniform"))
            sp.add_argument("--fixed-voltage", type=float)
        else:
            sp.add_argument("--pulse", type=float, nargs=4, metavar=("X", "Y", "Z", "V"))

    sp = sub.add_parser("baseline", parents=[common], help="clean-device accuracy per model")
    sp.add_argument("--models", help="comma-separated model names")
    sp.add_argument("--n-images", type=int)
    sp.set_defaults(func=cmd_baseline)

    sp = sub.add_parser("spot", parents=[common], help="fixed-parameter spot campaign")
    campaign_flags(sp)
    sp.set_defaults(func=cmd_spot)

    sp = sub.add_parser("explore", parents=[common], help="sampler-driven exploration")
    campaign_flags(sp, explore=True)
    sp.set_defaults(func=cmd_explore)

    sp = sub.add_parser("analyze", parents=[common], help="classify logs, compute rates, plot")
    sp.add_argument("logs", nargs="+", help="trial-log CSV file(s)")
    sp.add_argument("--baseline", help="baseline.csv from the baseline subcommand")
    sp.add_argument("--bins", type=int, default=50)
    sp.add_argument("--cell-mm", type=float, default=1.0)
    sp.add_argument("--trust-classes", action="store_true",
                    help="keep logged outcome classes instead of re-classifying")
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("mitigate", parents=[common], help="evaluate mitigations on episodes")
    sp.add_argument("episodes", help="episode-stream CSV")
    sp.add_argument("--strategy", choices=("all", "watchdog", "reference", "redundancy"),
                    default="all")
    sp.add_argument("--timeout", type=float, default=5.0)
    sp.add_argument("--k", type=int, default=1)
    sp.add_argument("--interval", type=int, default=64)
    sp.add_argument("--compare", choices=("top1", "logit"), default="top1")
    sp.add_argument("--correlation", type=float, default=0.0)
    sp.add_argument("--replicas", type=int, default=2)
    sp.add_argument("--max-inferences", type=int)
    sp.set_defaults(func=cmd_mitigate)

    sp = sub.add_parser("repeat", parents=[common], help="two same-config spot runs, compared")
    campaign_flags(sp)
    sp.add_argument("--seed-b", type=int)
    sp.set_defaults(func=cmd_repeat)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for name, default in (("config", None), ("calibration", None), ("seed", None), ("out", ".")):
        if not hasattr(args, name):
            setattr(args, name, default)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"emfisim: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"emfisim: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
