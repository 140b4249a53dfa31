"""Command-line front end: generate data, train ablation cells, aggregate result tables.

Directory layout under ``output_dir``::

    data/sigma_0.50/seed_0/            dataset manifest + PPM images
    runs/sigma_0.50/<variant>/seed_0/  steps.csv, epochs.csv, checkpoint.ickp,
                                       metrics.json, timing.json,
                                       similarity.csv/.pgm, loyalty_ranks.csv
    report.csv

Configuration is an INI file with sections ``[experiment]``, ``[data]``,
``[train]`` and ``[toggles]``; keys are the field names of ``ExperimentSpec``,
``DatasetConfig``, ``TrainConfig`` (plus ``mu``/``alpha``) and
``AblationToggles``.  Precedence: command-line flag > ``INTENT_CIR_OUTPUT_DIR``
(output_dir only) > file > built-in default.

Every failure exits nonzero after printing a single line
``error: <kind>: <message>`` on stderr.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import composer as cmp
from . import fourier, gradcheck
from .data import DatasetConfig, export_dataset, generate_dataset, load_dataset
from .evaluation import block_ranks, export_similarity_heat, write_rank_csv
from .objectives import AblationToggles
from .pnm import read_pnm, write_pnm
from .training import EPOCH_FIELDS, INTERVENTIONS, STEP_FIELDS, TrainConfig, TrainingDiverged, train, write_log_csv

log = logging.getLogger("intent_cir")

ENV_OUTPUT_DIR = "INTENT_CIR_OUTPUT_DIR"
METRICS = ("R@1", "R@5", "R_sub@1")

# name -> (toggle overrides, train overrides); ablation presets plus one preset per intervention
VARIANTS = {
    "full": ({}, {}),
    "wo_vic": ({"enable_vic": False}, {}),
    "wo_pwr": ({"enable_pwr": False}, {}),
    "wo_nwr": ({"enable_nwr": False}, {}),
    "wo_both_reward": ({"enable_pwr": False, "enable_nwr": False}, {}),
    "wo_robust": ({"enable_robust": False}, {}),
    "wo_mask": ({"mask_diagonal": False}, {}),
    "wo_sod": ({"enable_sod": False}, {}),
    "caco_mse": ({"caco_metric": "mse"}, {}),
    "caco_l1": ({"caco_metric": "l1"}, {}),
    "caco_l2": ({"caco_metric": "l2"}, {}),
    **{f"int_{op}": ({}, {"intervention_op": op}) for op in INTERVENTIONS},
}


class CliError(Exception):
    """Expected failure with a short machine-readable kind."""

    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


@dataclass(frozen=True)
class ExperimentSpec:
    data: DatasetConfig = field(default_factory=DatasetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    toggles: AblationToggles = field(default_factory=AblationToggles)
    noise_sweep: tuple = (0.0, 0.2, 0.5, 0.8)
    seeds: tuple = (0,)
    variants: tuple = ("full",)
    output_dir: str = "intent_runs"

    def __post_init__(self):
        if not self.noise_sweep or not self.seeds or not self.variants:
            raise ValueError("noise_sweep, seeds and variants must be non-empty")
        unknown = [v for v in self.variants if v not in VARIANTS]
        if unknown:
            raise ValueError(f"unknown variants {unknown}; choose from {sorted(VARIANTS)}")

    def cells(self):
        for sigma in self.noise_sweep:
            for variant in self.variants:
                for seed in self.seeds:
                    yield sigma, variant, seed


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


def _convert(raw: str, default, key: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            return {"true": True, "yes": True, "1": True, "on": True, "false": False, "no": False, "0": False, "off": False}[
                raw.lower()
            ]
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(_convert(x, default[0] if default else "", key) for x in raw.split(",") if x.strip())
    except (KeyError, ValueError):
        raise CliError("config", f"cannot parse {key}={raw!r} as {type(default).__name__}") from None
    return raw


def _apply(obj, values: dict, section: str):
    known = {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj)}
    updates = {}
    for key, raw in values.items():
        if key not in known or dataclasses.is_dataclass(known[key]):
            raise CliError("config", f"unknown key [{section}] {key}")
        updates[key] = _convert(raw, known[key], f"[{section}] {key}")
    try:
        return replace(obj, **updates)
    except ValueError as exc:
        raise CliError("config", f"[{section}] {exc}") from None


def _apply_train(base: TrainConfig, values: dict) -> TrainConfig:
    values = dict(values)
    weights = {k: values.pop(k) for k in ("mu", "alpha") if k in values}
    cfg = _apply(base, values, "train")
    if weights:
        cfg = replace(cfg, weights=_apply(cfg.weights, weights, "train"))
    return cfg


def load_spec(path: str | None = None, overrides: dict | None = None) -> ExperimentSpec:
    """Build a spec from defaults, an optional INI file, the environment and ``overrides``.

    ``overrides`` maps ``section`` -> {key: raw string}, as produced from flags.
    """
    sections: dict[str, dict] = {"experiment": {}, "data": {}, "train": {}, "toggles": {}}
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise CliError("config", f"cannot read {path}: {exc.strerror}") from None
        except configparser.Error as exc:
            raise CliError("config", str(exc).splitlines()[0]) from None
        for name in parser.sections():
            if name not in sections:
                raise CliError("config", f"unknown section [{name}]")
            sections[name].update(parser[name])
    if os.environ.get(ENV_OUTPUT_DIR):
        sections["experiment"]["output_dir"] = os.environ[ENV_OUTPUT_DIR]
    for name, values in (overrides or {}).items():
        sections[name].update({k: v for k, v in values.items() if v is not None})

    exp = sections["experiment"]
    spec = ExperimentSpec()
    data = _apply(spec.data, sections["data"], "data")
    train_cfg = _apply_train(spec.train, sections["train"])
    toggles = _apply(spec.toggles, sections["toggles"], "toggles")
    fields = {}
    for key, raw in exp.items():
        if key not in ("noise_sweep", "seeds", "variants", "output_dir"):
            raise CliError("config", f"unknown key [experiment] {key}")
        default = {"noise_sweep": (0.0,), "seeds": (0,), "variants": ("",), "output_dir": ""}[key]
        fields[key] = _convert(raw, default, f"[experiment] {key}")
    try:
        return ExperimentSpec(data=data, train=train_cfg, toggles=toggles, **fields)
    except ValueError as exc:
        raise CliError("config", str(exc)) from None


def dataset_dir(spec: ExperimentSpec, sigma: float, seed: int) -> Path:
    return Path(spec.output_dir) / "data" / f"sigma_{sigma:.2f}" / f"seed_{seed}"


def run_dir(spec: ExperimentSpec, sigma: float, variant: str, seed: int) -> Path:
    return Path(spec.output_dir) / "runs" / f"sigma_{sigma:.2f}" / variant / f"seed_{seed}"


def variant_configs(spec: ExperimentSpec, variant: str, seed: int) -> tuple[TrainConfig, AblationToggles]:
    toggle_over, train_over = VARIANTS[variant]
    return replace(spec.train, seed=seed, **train_over), replace(spec.toggles, **toggle_over)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_generate(spec: ExperimentSpec) -> list[Path]:
    written = []
    for sigma in spec.noise_sweep:
        for seed in spec.seeds:
            cfg = replace(spec.data, noise_ratio=float(sigma), seed=int(seed))
            out = export_dataset(generate_dataset(cfg), dataset_dir(spec, sigma, seed))
            log.info("wrote %s (%d noisy)", out, cfg.n_noisy)
            written.append(out)
    return written


def _diagnostics(params: cmp.ComposerParams, dataset, config: TrainConfig, out: Path) -> dict:
    """Heat map of the first validation block; similarity and loyalty ranks over all blocks."""
    val = dataset.validation
    b = min(config.batch_size, len(val))
    if b < 2:
        return {}
    block = val[:b]
    export_similarity_heat(params, [(t.reference, t.tokens) for t in block], np.stack([t.target for t in block]), out / "similarity")
    sim_rank, loy_rank = block_ranks(params, val, b, config.tau)
    write_rank_csv(out / "loyalty_ranks.csv", sim_rank, loy_rank)
    return {"mean_similarity_rank": float(sim_rank.mean()), "mean_loyalty_rank": float(loy_rank.mean())}


def train_cell(spec: ExperimentSpec, sigma: float, variant: str, seed: int) -> dict:
    src = dataset_dir(spec, sigma, seed)
    if not (src / "triplets.jsonl").exists():
        raise CliError("missing-dataset", f"no dataset at {src}; run 'generate' with the same config first")
    dataset = load_dataset(src)
    config, toggles = variant_configs(spec, variant, seed)
    out = run_dir(spec, sigma, variant, seed)
    out.mkdir(parents=True, exist_ok=True)
    try:
        result = train(dataset, config, toggles, dump_dir=out)
    except TrainingDiverged as exc:
        raise CliError("diverged", f"{exc} (state dumped to {out / 'diverged.json'})") from None
    write_log_csv(out / "steps.csv", result.step_log, STEP_FIELDS)
    write_log_csv(out / "epochs.csv", result.epoch_log, EPOCH_FIELDS)
    cmp.save_checkpoint(result.params, out / "checkpoint.ickp")
    metrics = {"sigma": float(sigma), "variant": variant, "seed": int(seed), **result.final_metrics}
    metrics.update(_diagnostics(result.params, dataset, config, out))
    (out / "metrics.json").write_text(json.dumps(metrics, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    (out / "timing.json").write_text(json.dumps({"runtime_s": result.runtime_s}) + "\n", encoding="utf-8")
    log.info("sigma=%.2f variant=%s seed=%d R@1=%.3f (%.1fs)", sigma, variant, seed, metrics["R@1"], result.runtime_s)
    return metrics


def _train_cell_args(args):
    return train_cell(*args)


def cmd_train(spec: ExperimentSpec, workers: int = 1) -> list[dict]:
    cells = list(spec.cells())
    missing = sorted({str(dataset_dir(spec, s, k)) for s, _, k in cells if not (dataset_dir(spec, s, k) / "triplets.jsonl").exists()})
    if missing:
        raise CliError("missing-dataset", f"{len(missing)} dataset(s) absent, first: {missing[0]}; run 'generate' first")
    if workers <= 1:
        return [train_cell(spec, *c) for c in cells]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_train_cell_args, [(spec, *c) for c in cells]))


def _mean_std(values: list[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (n - 1 denominator; 0 for a single value)."""
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std(ddof=1)) if len(arr) > 1 else 0.0


REPORT_COLUMNS = ("sigma", "variant", "n_runs") + tuple(f"{m}_{s}" for m in (*METRICS, "runtime_s") for s in ("mean", "std"))


def collect_runs(output_dir: str | Path) -> dict:
    """(sigma, variant) -> list of per-seed records found under ``runs/``."""
    cells: dict = {}
    for path in sorted(Path(output_dir).glob("runs/sigma_*/*/seed_*/metrics.json")):
        m = json.loads(path.read_text(encoding="utf-8"))
        timing = path.with_name("timing.json")
        m["runtime_s"] = json.loads(timing.read_text(encoding="utf-8"))["runtime_s"] if timing.exists() else float("nan")
        cells.setdefault((round(m["sigma"], 6), m["variant"]), []).append(m)
    return cells


def cmd_report(spec: ExperimentSpec | None, output_dir: str | Path) -> tuple[Path, list[str]]:
    """Aggregate per-seed metrics into ``report.csv``; returns the path and a list of problems.

    Expected cells come from ``spec`` when given; any cell with fewer seeds than
    expected is listed, and a cell with none is written as MISSING.
    """
    found = collect_runs(output_dir)
    expected = set(found)
    n_seeds = None
    if spec is not None:
        expected |= {(round(float(s), 6), v) for s, v, _ in spec.cells()}
        n_seeds = len(spec.seeds)
    if not expected:
        raise CliError("no-runs", f"no metrics under {Path(output_dir) / 'runs'} and no spec to list expected cells")
    problems = []
    rows = []
    for sigma, variant in sorted(expected):
        runs = found.get((sigma, variant), [])
        if not runs:
            problems.append(f"missing sigma={sigma:g} variant={variant}")
            rows.append([f"{sigma:g}", variant, 0] + ["MISSING"] * (len(REPORT_COLUMNS) - 3))
            continue
        if n_seeds is not None and len(runs) < n_seeds:
            problems.append(f"incomplete sigma={sigma:g} variant={variant} runs={len(runs)}/{n_seeds}")
        row = [f"{sigma:g}", variant, len(runs)]
        for key in (*METRICS, "runtime_s"):
            mean, std = _mean_std([r[key] for r in runs])
            row += [repr(mean), repr(std)]
        rows.append(row)
    path = Path(output_dir) / "report.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("# mean over seeds; std is the sample standard deviation (n-1 denominator, 0 for one run); "
                 "runtime_s is wall-clock seconds\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        w.writerows(rows)
    return path, problems


def cmd_gradcheck(seed: int = 0) -> tuple[bool, list[str], float]:
    results, elapsed = gradcheck.run_suite(seed=seed)
    return all(r.passed for r in results), gradcheck.format_results(results), elapsed


def cmd_demo_intervene(
    input_path: str, output_path: str, op: str, distractor: str | None, lam: float, crop_ratio: float, seed: int, config: TrainConfig
) -> Path:
    image = read_pnm(input_path)
    if op == "fft_mix":
        if distractor is None:
            raise CliError("usage", "fft_mix needs --distractor")
        other = read_pnm(distractor)
        out = fourier.make_counterfactual(image, other, fourier.MixParams(lam, crop_ratio, seed))
    elif op == "random_mask":
        out = fourier.random_mask(image, config.mask_patch, config.mask_fraction, seed)
    elif op == "patch_shuffle":
        out = fourier.patch_shuffle(image, config.shuffle_grid, seed)
    elif op == "gaussian_blur":
        out = fourier.gaussian_blur(image, config.blur_sigma, config.blur_radius)
    elif op == "grayscale":
        out = fourier.grayscale(image)
    else:
        out = image
    write_pnm(output_path, out)
    return Path(output_path)


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _add_spec_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="INI file (sections: experiment, data, train, toggles)")
    p.add_argument("--output-dir", help="root for data/, runs/ and report.csv")
    p.add_argument("--sigmas", help="comma-separated noise ratios, e.g. 0,0.2,0.5,0.8")
    p.add_argument("--seeds", help="comma-separated integer seeds")
    p.add_argument("--variants", help=f"comma-separated presets: {', '.join(VARIANTS)}")
    p.add_argument("--n-triplets", help="training triplets per dataset")
    p.add_argument("--clutter", help="background clutter level in [0, 1]")
    p.add_argument("--epochs")
    p.add_argument("--batch-size")
    p.add_argument("--learning-rate")
    p.add_argument("--optimizer", choices=("sgd", "adam"))
    p.add_argument("--intervention", choices=INTERVENTIONS)
    p.add_argument(
        "--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override any config key (repeatable)"
    )


def _spec_from_args(args) -> ExperimentSpec:
    over = {
        "experiment": {"output_dir": args.output_dir, "noise_sweep": args.sigmas, "seeds": args.seeds, "variants": args.variants},
        "data": {"n_triplets": args.n_triplets, "clutter_level": args.clutter},
        "train": {
            "epochs": args.epochs,
            "batch_size": args.batch_size,
            "learning_rate": args.learning_rate,
            "optimizer": args.optimizer,
            "intervention_op": args.intervention,
        },
        "toggles": {},
    }
    for item in args.set:
        key, sep, value = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot or section not in over:
            raise CliError("usage", f"--set expects SECTION.KEY=VALUE with SECTION in {sorted(over)}, got {item!r}")
        over[section][name.strip()] = value
    return load_spec(args.config, over)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="intent-cir", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write one synthetic dataset per (sigma, seed)")
    _add_spec_flags(g)
    t = sub.add_parser("train", help="train every (sigma, variant, seed) cell")
    _add_spec_flags(t)
    t.add_argument("--workers", type=int, default=1, help="parallel worker processes")
    r = sub.add_parser("report", help="aggregate metrics into report.csv")
    _add_spec_flags(r)
    gc = sub.add_parser("gradcheck", help="finite-difference suite for every loss")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--quiet", action="store_true", help="print the summary line only")
    d = sub.add_parser("demo-intervene", help="apply one intervention to a PPM image")
    d.add_argument("--input", required=True)
    d.add_argument("--output", required=True)
    d.add_argument("--op", choices=INTERVENTIONS, default="fft_mix")
    d.add_argument("--distractor", help="second PPM supplying the amplitude (fft_mix)")
    d.add_argument("--lam", type=float, default=0.5)
    d.add_argument("--crop-ratio", type=float, default=0.25)
    d.add_argument("--seed", type=int, default=0)
    return parser


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s", stream=sys.stderr)
    if args.command == "generate":
        for path in cmd_generate(_spec_from_args(args)):
            print(path)
    elif args.command == "train":
        spec = _spec_from_args(args)
        for m in cmd_train(spec, args.workers):
            print(f"sigma={m['sigma']:g} variant={m['variant']} seed={m['seed']} R@1={m['R@1']:.4f} R@5={m['R@5']:.4f}")
    elif args.command == "report":
        spec = _spec_from_args(args)
        path, problems = cmd_report(spec, spec.output_dir)
        for line in problems:
            print(f"warning: {line}", file=sys.stderr)
        print(path)
    elif args.command == "gradcheck":
        ok, lines, elapsed = cmd_gradcheck(args.seed)
        if not args.quiet:
            print("\n".join(lines))
        print(f"gradcheck {'passed' if ok else 'FAILED'}: {len(lines)} cases in {elapsed:.1f}s")
        if not ok:
            raise CliError("gradcheck-failed", f"{sum('FAIL' in x for x in lines)} case(s) exceed tolerance")
    elif args.command == "demo-intervene":
        cfg = TrainConfig()
        try:
            print(cmd_demo_intervene(args.input, args.output, args.op, args.distractor, args.lam, args.crop_ratio, args.seed, cfg))
        except FileNotFoundError as exc:
            raise CliError("io", f"{exc.filename}: not found") from None
    return 0


def main(argv=None) -> int:
    try:
        return run(argv)
    except CliError as exc:
        print(f"error: {exc.kind}: {exc}".replace("\n", " "), file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}".replace("\n", " "), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
