"""Command-line front end for the whole pipeline.

Subcommands: preprocess, cv, network, diffnet, simulate. A flat JSON
config file can supply any flag; explicit flags win. All randomness flows
from the single --seed through named streams, and every command writes
byte-identical outputs when rerun with the same configuration.

Exit codes: 0 success, 2 configuration errors, 3 data errors,
4 numerical failures.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import data_model, network, solver, synth
from ._seeds import derive_seed
from .errors import ConfigError, DataError, NumericalError
from .sac_cv import (
    ALGORITHMS,
    COMPARISON_HEADER,
    SacConfig,
    comparison_line,
    paired_compare,
    run_sac,
    write_records,
)

_EXIT_CONFIG = 2
_EXIT_DATA = 3
_EXIT_NUMERIC = 4

_DEFAULTS = {
    "k_folds": 5,
    "seed": 0,
    "min_prevalence": 0.10,
    "inner_folds": 5,
    "n_lambda": 20,
    "lambda_min_ratio": 1e-3,
    "n_gamma": 5,
    "tol": 1e-6,
    "max_iter": 100_000,
    "tau_diff": network.DEFAULT_TAU,
    "algorithms": ",".join(ALGORITHMS),
    "threads": 0,  # 0 means machine parallelism
}


def _resolve(args: argparse.Namespace) -> dict:
    """Defaults, overridden by --config JSON, overridden by explicit flags."""
    cfg = dict(_DEFAULTS)
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        try:
            loaded = json.loads(path.read_text())
        except json.JSONDecodeError as err:
            raise ConfigError(f"config file {path} is not valid JSON: {err}") from None
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a flat JSON object")
        unknown = set(loaded) - set(_DEFAULTS) - {"input", "metadata", "out"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(loaded)
    for key in cfg:
        flag = getattr(args, key, None)
        if flag is not None:
            cfg[key] = flag
    for key in ("input", "metadata", "out"):
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    if isinstance(cfg["algorithms"], str):
        cfg["algorithms"] = tuple(a for a in cfg["algorithms"].split(",") if a)
    cfg["threads"] = int(cfg["threads"]) or (os.cpu_count() or 1)
    if cfg["k_folds"] < 2:
        raise ConfigError("k-folds must be at least 2")
    return cfg


def _sac_config(cfg: dict) -> SacConfig:
    return SacConfig(
        inner_folds=int(cfg["inner_folds"]),
        n_lambda=int(cfg["n_lambda"]),
        lambda_min_ratio=float(cfg["lambda_min_ratio"]),
        n_gamma=int(cfg["n_gamma"]),
        tol=float(cfg["tol"]),
        max_iter=int(cfg["max_iter"]),
    )


def _load_prepared(cfg: dict) -> tuple[data_model.PreparedDataset, dict, str]:
    """Accept either a dataset directory or a raw table plus metadata."""
    source = cfg.get("input")
    if not source:
        raise ConfigError("--input is required")
    source = Path(source)
    if source.is_dir():
        dataset = data_model.load_dataset(source)
        return dataset, {}, source.name
    if not cfg.get("metadata"):
        raise ConfigError("--metadata is required when --input is a raw table")
    table = data_model.load_table(source, cfg["metadata"])
    dataset, report = data_model.prepare(
        table,
        min_prevalence=float(cfg["min_prevalence"]),
        n_folds=int(cfg["k_folds"]),
        seed=int(cfg["seed"]),
    )
    return dataset, report, source.stem


def _write_provenance(out: Path, command: str, cfg: dict, extra: dict) -> None:
    lines = [f"command={command}"]
    for key in sorted(k for k in cfg if k not in ("input", "metadata", "out")):
        lines.append(f"config.{key}={cfg[key]}")
    for key in ("input", "metadata", "out"):
        if key in cfg:
            lines.append(f"config.{key}={cfg[key]}")
    for key in sorted(extra):
        lines.append(f"{key}={extra[key]}")
    (out / "provenance.txt").write_text("\n".join(lines) + "\n")


def cmd_preprocess(args) -> int:
    cfg = _resolve(args)
    if not cfg.get("input") or not cfg.get("metadata"):
        raise ConfigError("preprocess needs --input and --metadata")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    table = data_model.load_table(cfg["input"], cfg["metadata"])
    dataset, report = data_model.prepare(
        table,
        min_prevalence=float(cfg["min_prevalence"]),
        n_folds=int(cfg["k_folds"]),
        seed=int(cfg["seed"]),
    )
    data_model.save_dataset(dataset, out, extra_params={
        "min_prevalence": cfg["min_prevalence"],
        "master_seed": cfg["seed"],
    })
    _write_provenance(out, "preprocess", cfg, {f"report.{k}": v for k, v in report.items()})
    return 0


def cmd_cv(args) -> int:
    cfg = _resolve(args)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    dataset, report, label = _load_prepared(cfg)
    result = run_sac(dataset, cfg["algorithms"], seed=int(cfg["seed"]),
                     dataset_label=label, config=_sac_config(cfg),
                     n_jobs=int(cfg["threads"]))
    write_records(result.records, out / "records.csv")

    comparisons = []
    present = {r.algorithm for r in result.records}
    for pair in (("fused_all", "lasso_same"), ("fused_all", "lasso_all")):
        if set(pair) <= present:
            try:
                comparisons.append((label, paired_compare(result.records, *pair)))
            except DataError:
                pass  # too few shared cells after failures; row omitted
    (out / "comparisons.csv").write_text(
        "\n".join([COMPARISON_HEADER] + [comparison_line(d, c) for d, c in comparisons]) + "\n")

    taxa_lines = ["dataset,taxon,algo_a,algo_b,mean_diff,ci_low,ci_high,p_value,log10_p,n_pairs"]
    baseline_of = {"fused_all": "featureless_all", "lasso_all": "featureless_all",
                   "lasso_same": "featureless_same"}
    for taxon in dataset.table.taxa_names:
        taxon_records = [r for r in result.records if r.taxon == taxon]
        for algorithm, baseline in baseline_of.items():
            if algorithm in present and baseline in present:
                try:
                    cmp = paired_compare(taxon_records, algorithm, baseline,
                                         pairing=("habitat", "fold"))
                except DataError:
                    continue
                taxa_lines.append(f"{label},{taxon},{comparison_line('', cmp).split(',', 1)[1]}")
    (out / "taxa_comparisons.csv").write_text("\n".join(taxa_lines) + "\n")

    if result.failures:
        fail_lines = ["dataset,algorithm,scenario,taxon,habitat,fold,message"]
        for f in result.failures:
            message = f.message.replace(",", ";")
            fail_lines.append(f"{f.dataset},{f.algorithm},{f.scenario},{f.taxon},"
                              f"{f.habitat},{f.fold},{message}")
        (out / "failures.csv").write_text("\n".join(fail_lines) + "\n")
    extra = {f"report.{k}": v for k, v in report.items()}
    extra["n_records"] = len(result.records)
    extra["n_failed_cells"] = len(result.failures)
    _write_provenance(out, "cv", cfg, extra)
    return 0


def _habitat_index(dataset, token: str) -> int:
    names = dataset.table.group_names
    if token in names:
        return names.index(token) + 1
    try:
        idx = int(token)
    except ValueError:
        raise DataError(f"unknown habitat {token!r}; groups are {list(names)}") from None
    if not 1 <= idx <= len(names):
        raise DataError(f"habitat index {idx} out of range 1..{len(names)}")
    return idx


def _export_all(net_obj, stem: Path) -> None:
    for fmt, suffix in (("dot", ".dot"), ("json", ".json"), ("edgelist", ".csv")):
        network.export_network(net_obj, fmt, stem.with_suffix(suffix))


def cmd_network(args) -> int:
    cfg = _resolve(args)
    out = Path(cfg["out"])
    netdir = out / "networks"
    netdir.mkdir(parents=True, exist_ok=True)
    dataset, report, label = _load_prepared(cfg)
    algorithm = args.algorithm
    habitats = list(range(1, dataset.table.n_groups + 1))
    if args.habitat:
        habitats = [_habitat_index(dataset, args.habitat)]
    nets, _ = network.build_networks(dataset, algorithm, seed=int(cfg["seed"]),
                                     tau=float(cfg["tau_diff"]), config=_sac_config(cfg))
    for habitat in habitats:
        _export_all(nets[habitat], netdir / f"net_{algorithm}_h{habitat}")
    extra = {f"report.{k}": v for k, v in report.items()}
    extra["algorithm"] = algorithm
    extra["habitats"] = ",".join(str(h) for h in habitats)
    _write_provenance(out, "network", cfg, extra)
    return 0


def cmd_diffnet(args) -> int:
    cfg = _resolve(args)
    out = Path(cfg["out"])
    netdir = out / "networks"
    netdir.mkdir(parents=True, exist_ok=True)
    dataset, report, label = _load_prepared(cfg)
    algorithm = args.algorithm
    _, diffs = network.build_networks(dataset, algorithm, seed=int(cfg["seed"]),
                                      tau=float(cfg["tau_diff"]), config=_sac_config(cfg))
    if args.pair:
        tokens = args.pair.split(",")
        if len(tokens) != 2:
            raise ConfigError("--pair takes two habitats, e.g. --pair soil,water")
        s, t = sorted(_habitat_index(dataset, tok.strip()) for tok in tokens)
        if s == t:
            raise ConfigError("--pair needs two distinct habitats")
        wanted = [(s, t)]
    else:
        wanted = sorted(diffs)
    for s, t in wanted:
        _export_all(diffs[(s, t)], netdir / f"diff_{algorithm}_h{s}_h{t}")
    extra = {f"report.{k}": v for k, v in report.items()}
    extra["algorithm"] = algorithm
    extra["pairs"] = ";".join(f"{s},{t}" for s, t in wanted)
    _write_provenance(out, "diffnet", cfg, extra)
    return 0


def cmd_simulate(args) -> int:
    cfg = _resolve(args)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    spec = synth.SynthSpec(
        n_groups=args.groups,
        n_taxa=args.taxa,
        n_per_group=args.per_group,
        shared_density=args.shared_density,
        specific_density=args.specific_density,
        effect_low=args.effect_low,
        effect_high=args.effect_high,
        noise_sd=args.noise_sd,
        seed=int(cfg["seed"]),
    )
    result = synth.generate(spec, k_folds=int(cfg["k_folds"]), tau=float(cfg["tau_diff"]))
    table = result.table
    lines = ["sample_id," + ",".join(table.taxa_names)]
    for i, sid in enumerate(table.sample_ids):
        lines.append(sid + "," + ",".join(repr(float(v)) for v in table.counts[i]))
    (out / "abundance.csv").write_text("\n".join(lines) + "\n")
    meta = ["sample_id,group"]
    for sid in table.sample_ids:
        meta.append(f"{sid},{table.group_names[table.group_of[sid] - 1]}")
    (out / "metadata.csv").write_text("\n".join(meta) + "\n")
    truth = out / "truth"
    truth.mkdir(exist_ok=True)
    for net_obj in result.truth_networks:
        network.export_network(net_obj, "json", truth / f"net_h{net_obj.habitat}.json")
    for diff in result.truth_diffs:
        s, t = diff.habitat_pair
        network.export_network(diff, "json", truth / f"diff_h{s}_h{t}.json")
    _write_provenance(out, "simulate", cfg, {
        "spec": json.dumps(spec.__dict__, sort_keys=True),
        "sparsity": data_model.sparsity(table),
    })
    return 0


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--input", help="abundance table (.csv/.tsv) or a prepared dataset directory")
    p.add_argument("--metadata", help="sample_id,group metadata file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="flat JSON config file (flags win)")
    p.add_argument("--k-folds", dest="k_folds", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--min-prevalence", dest="min_prevalence", type=float)
    p.add_argument("--inner-folds", dest="inner_folds", type=int)
    p.add_argument("--algorithms", help="comma-separated labels from: " + ",".join(ALGORITHMS))
    p.add_argument("--tau-diff", dest="tau_diff", type=float)
    p.add_argument("--threads", type=int)
    p.add_argument("--n-lambda", dest="n_lambda", type=int)
    p.add_argument("--n-gamma", dest="n_gamma", type=int)
    p.add_argument("--lambda-min-ratio", dest="lambda_min_ratio", type=float)
    p.add_argument("--tol", type=float)
    p.add_argument("--max-iter", dest="max_iter", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fusenet",
                                     description="Fused-lasso grouped co-occurrence networks")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="transform, balance, filter, assign folds")
    _add_common(p)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("cv", help="run Same/All cross-validation and comparisons")
    _add_common(p)
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("network", help="export per-habitat networks for one algorithm")
    _add_common(p)
    p.add_argument("--algorithm", required=True, choices=["fused_all", "lasso_all", "lasso_same"])
    p.add_argument("--habitat", help="restrict to one habitat (name or index)")
    p.set_defaults(func=cmd_network)

    p = sub.add_parser("diffnet", help="export difference networks between habitats")
    _add_common(p)
    p.add_argument("--algorithm", required=True, choices=["fused_all", "lasso_all", "lasso_same"])
    p.add_argument("--pair", help="two habitats, comma separated (names or indices)")
    p.set_defaults(func=cmd_diffnet)

    p = sub.add_parser("simulate", help="generate a synthetic dataset with truth networks")
    _add_common(p)
    p.add_argument("--groups", type=int, required=True)
    p.add_argument("--taxa", type=int, required=True)
    p.add_argument("--per-group", dest="per_group", type=int, required=True)
    p.add_argument("--shared-density", dest="shared_density", type=float, default=0.10)
    p.add_argument("--specific-density", dest="specific_density", type=float, default=0.05)
    p.add_argument("--effect-low", dest="effect_low", type=float, default=0.4)
    p.add_argument("--effect-high", dest="effect_high", type=float, default=0.8)
    p.add_argument("--noise-sd", dest="noise_sd", type=float, default=1.0)
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return _EXIT_CONFIG
    except DataError as err:
        print(f"data error: {err}", file=sys.stderr)
        return _EXIT_DATA
    except NumericalError as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return _EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
