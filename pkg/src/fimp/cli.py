"""Command-line entry point: ``fimp {run,table,gen,dump-features,count-params}``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import fields
from pathlib import Path
from typing import Sequence

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from .config import ExperimentConfig, dump_config, load_config
from .data import GeneratorConfig, generate_samples, load_feature_file, save_feature_file
from .errors import ConfigurationError, FeatureFileError
from .federation import metrics_csv, rounds_csv, run_experiment
from .metrics import SOURCES, dump_features, seed_mean
from .models import GlobalModel, ImputerConfig, ModelConfig, count_parameters, fin_parameter_formula
from .state import load_checkpoint

log = logging.getLogger("fimp")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
INCOMPLETE_MARKER = "INCOMPLETE"
STRATEGY_ORDER = ("zero", "uniform", "fin")


class UsageError(Exception):
    pass


# -- run ------------------------------------------------------------------------------------
def result_key(cfg: ExperimentConfig) -> str:
    setup = "heterogeneous" if cfg.heterogeneous else "homogeneous"
    return f"{cfg.partition}|{cfg.imputation}|{setup}"


def cmd_run(config_path: str, out_dir: str, workers: int = 1) -> int:
    cfg = load_config(config_path)
    if workers < 1:
        raise UsageError(f"--workers must be >= 1, got {workers}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    marker = out / INCOMPLETE_MARKER
    marker.write_text("run in progress or aborted; outputs in this directory are partial\n")
    (out / "config.toml").write_text(dump_config(cfg))

    per_seed = []
    for seed in cfg.seeds:
        seed_dir = out / f"seed_{seed}"
        seed_dir.mkdir(exist_ok=True)
        result = run_experiment(cfg, seed, workers=workers, checkpoint_path=seed_dir / "checkpoint.bin")
        (seed_dir / "rounds.csv").write_text(rounds_csv(result.reports))
        (seed_dir / "metrics.csv").write_text(metrics_csv(result.reports))
        best = result.best
        per_seed.append({"seed": seed, "best_round": best.round, "val_macro_auc": best.val.value,
                         "test_macro_auc": best.test.value})
        log.info("seed %d done: best round %d, test macro AUC %.4f", seed, best.round, best.test.value)

    tests = [r["test_macro_auc"] for r in per_seed]
    mean, sd = seed_mean(tests) if len(tests) > 1 else (tests[0], math.nan)
    summary = {
        "partition": cfg.partition,
        "imputation": cfg.imputation,
        "heterogeneous": cfg.heterogeneous,
        "seeds": list(cfg.seeds),
        "mean_test_macro_auc": mean,
        "sd_test_macro_auc": None if math.isnan(sd) else sd,
        "runs": per_seed,
    }
    (out / "summary.csv").write_text(
        "partition,imputation,heterogeneous,n_seeds,mean_test_macro_auc,sd_test_macro_auc\n"
        f"{cfg.partition},{cfg.imputation},{str(cfg.heterogeneous).lower()},{len(tests)},{mean!r},"
        f"{'' if math.isnan(sd) else repr(sd)}\n"
    )
    (out / "results.json").write_text(json.dumps({result_key(cfg): summary}, indent=2, sort_keys=True) + "\n")
    marker.unlink()
    sd_text = "n/a" if math.isnan(sd) else f"{sd:.4f}"
    print(f"{cfg.partition} {cfg.imputation}: test macro AUC {mean:.4f} +/- {sd_text} over {len(tests)} seed(s)")
    return EXIT_OK


# -- table ------------------------------------------------------------------------------------
def collect_results(results_dir: str | Path) -> dict[str, dict]:
    merged: dict[str, dict] = {}
    for path in sorted(Path(results_dir).rglob("results.json")):
        merged.update(json.loads(path.read_text()))
    return merged


def build_table(results: dict[str, dict]) -> tuple[list[str], list[str], dict[tuple[str, str], dict]]:
    """Strategies as rows, partitions (suffixed for the heterogeneous setup) as columns."""
    cells: dict[tuple[str, str], dict] = {}
    columns: list[str] = []
    for entry in results.values():
        col = entry["partition"] + (" het" if entry["heterogeneous"] else "")
        if col not in columns:
            columns.append(col)
        cells[(entry["imputation"], col)] = entry
    columns.sort(key=lambda c: (c.endswith(" het"), [-int(x) for x in c.split()[0].split(":")]))
    present = {s for s, _ in cells}
    rows = [s for s in STRATEGY_ORDER if s in present] + sorted(present - set(STRATEGY_ORDER))
    return rows, columns, cells


def format_cell(entry: dict | None) -> str:
    if entry is None:
        return "-"
    sd = entry.get("sd_test_macro_auc")
    return f"{entry['mean_test_macro_auc']:.4f}" + ("" if sd is None else f" +/- {sd:.4f}")


def format_table(rows: list[str], columns: list[str], cells: dict[tuple[str, str], dict]) -> str:
    width = max(20, *(len(c) + 2 for c in columns))
    lines = ["I:T:M".ljust(10) + "".join(c.rjust(width) for c in columns)]
    for strategy in rows:
        line = strategy.ljust(10)
        for col in columns:
            entry = cells.get((strategy, col))
            line += format_cell(entry).rjust(width)
        lines.append(line)
    return "\n".join(lines)


def cmd_table(results_dir: str) -> int:
    if not Path(results_dir).is_dir():
        raise UsageError(f"results directory not found: {results_dir}")
    results = collect_results(results_dir)
    if not results:
        print(f"no completed runs (results.json) found under {results_dir}", file=sys.stderr)
        return EXIT_RUNTIME
    print(format_table(*build_table(results)))
    return EXIT_OK


# -- gen --------------------------------------------------------------------------------------
GEN_KEYS = {f.name for f in fields(GeneratorConfig)} | {"n"}


def load_generator_config(path: str | Path) -> tuple[GeneratorConfig, int]:
    """Flat TOML with GeneratorConfig keys plus ``n`` (default 1000)."""
    try:
        raw = tomllib.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigurationError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(f"{path}: {exc}") from None
    unknown = sorted(set(raw) - GEN_KEYS)
    if unknown:
        raise ConfigurationError(f"unknown generator config keys: {', '.join(unknown)}")
    n = raw.pop("n", 1000)
    if not isinstance(n, int) or isinstance(n, bool):
        raise ConfigurationError(f"n must be an integer, got {n!r}")
    for key in ("noise_sigma", "modality_correlation"):
        if key in raw:
            raw[key] = float(raw[key])
    cfg = GeneratorConfig(**raw)
    cfg.validate()
    return cfg, n


def cmd_gen(config_path: str, out_path: str) -> int:
    cfg, n = load_generator_config(config_path)
    save_feature_file(out_path, generate_samples(cfg, n))
    print(f"wrote {n} samples to {out_path}")
    return EXIT_OK


# -- dump-features -------------------------------------------------------------------------
def model_from_checkpoint(path: str | Path) -> GlobalModel:
    sections = load_checkpoint(path)
    if "main" not in sections:
        raise FeatureFileError(f"{path}: checkpoint has no main-model section")
    main = sections["main"]

    def encoder_dims(prefix: str) -> list[tuple[int, int]]:
        dims, i = [], 0
        while f"{prefix}.layers.{i}.weight" in main:
            dims.append(main[f"{prefix}.layers.{i}.weight"].shape)
            i += 1
        if not dims:
            raise FeatureFileError(f"{path}: no {prefix} layers in checkpoint")
        return dims

    img, txt = encoder_dims("image_encoder"), encoder_dims("text_encoder")
    bottleneck = img[-1][1]
    hidden = tuple(d[1] for d in img[:-1])
    imputer = ImputerConfig(feature_dim=bottleneck)
    with_imputers = "imputer_text" in sections
    if with_imputers:
        phi = sections["imputer_text"]
        depth = sum(1 for k in phi if k.endswith(".norm1.gamma"))
        heads = int(sections["meta"]["imputer_heads"][0]) if "meta" in sections else 4
        imputer = ImputerConfig(bottleneck, depth, heads, phi["blocks.0.ffn_in.weight"].shape[1])
    cfg = ModelConfig(img[0][0], txt[0][0], main["classifier.weight"].shape[1], bottleneck, hidden, imputer)
    model = GlobalModel(cfg, seed=0, with_imputers=with_imputers)
    model.load_main_state(main)
    if with_imputers:
        model.imputer_text.load_state_dict(sections["imputer_text"])
        model.imputer_image.load_state_dict(sections["imputer_image"])
    return model


def cmd_dump_features(ckpt: str, data_path: str, out_path: str, sources: Sequence[str] | None = None) -> int:
    model = model_from_checkpoint(ckpt)
    fs = load_feature_file(data_path)
    if sources is None:
        sources = [s for s in SOURCES if s != "fin" or model.has_imputers]
        if not model.has_imputers:
            print("checkpoint carries no imputers; skipping the 'fin' source", file=sys.stderr)
    index = dump_features(model, fs, sources, out_path)
    print(f"wrote {len(fs) * len(sources)} rows ({', '.join(sources)}) to {out_path}; index {index}")
    return EXIT_OK


# -- count-params -----------------------------------------------------------------------------
def parameter_counts(cfg: ExperimentConfig) -> dict[str, int]:
    model = GlobalModel(cfg.model_config(), seed=0, with_imputers=True)
    counts = {
        "image_encoder": count_parameters(model.image_encoder),
        "text_encoder": count_parameters(model.text_encoder),
        "classifier": count_parameters(model.classifier),
    }
    counts["main_model"] = sum(counts.values())
    counts["imputer"] = count_parameters(model.imputer_text)
    counts["imputer_closed_form"] = fin_parameter_formula(cfg.bottleneck, cfg.imputer_depth, cfg.imputer_ffn)
    counts["imputers_both"] = counts["imputer"] + count_parameters(model.imputer_image)
    return counts


def cmd_count_params(config_path: str) -> int:
    counts = parameter_counts(load_config(config_path, apply_env=False))
    print(f"{'component':<28}{'parameters':>14}")
    for label, key in (("image encoder", "image_encoder"), ("text encoder", "text_encoder"),
                       ("classifier", "classifier"), ("main model (total)", "main_model"),
                       ("imputation network (one)", "imputer"), ("  closed form", "imputer_closed_form"),
                       ("imputation networks (both)", "imputers_both")):
        print(f"{label:<28}{counts[key]:>14,}")
    return EXIT_OK


# -- entry point --------------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fimp", description="Multimodal federated learning with missing modalities.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-round progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run an experiment for every configured seed")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=1, help="parallel client workers (default 1)")

    p = sub.add_parser("table", help="tabulate mean test macro AUC across runs")
    p.add_argument("--dir", required=True)

    p = sub.add_parser("gen", help="write a synthetic feature file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("dump-features", help="write bottleneck features per source for external plotting")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sources", nargs="+", choices=SOURCES)

    p = sub.add_parser("count-params", help="parameter counts of the main model and imputers")
    p.add_argument("--config", required=True)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "run":
            return cmd_run(args.config, args.out, args.workers)
        if args.command == "table":
            return cmd_table(args.dir)
        if args.command == "gen":
            return cmd_gen(args.config, args.out)
        if args.command == "dump-features":
            return cmd_dump_features(args.ckpt, args.data, args.out, args.sources)
        return cmd_count_params(args.config)
    except (ConfigurationError, UsageError) as exc:
        print(f"fimp: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FeatureFileError as exc:
        print(f"fimp: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - top-level diagnostic
        print(f"fimp: runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
