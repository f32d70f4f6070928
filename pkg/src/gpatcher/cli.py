"""``gpatcher`` command line: analysis, extraction, training, ablations, checks.

Every subcommand writes a CSV (comment line with the invocation, then a
header) and a ``<out>.config.json`` echo of the resolved settings.
Settings resolve as: command-line flags, then ``--config`` JSON, then
built-in defaults.
"""
from __future__ import annotations

import argparse
import json
import logging
import shlex
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .datasets import (DATA_DIR_ENV, SynthSpec, dataset_stats, generate_scalability_suite,
                       generate_synthetic, load_dataset, write_dataset)
from .errors import GPatcherError, ParseError
from .graph import node_heterophily, normalize_adjacency
from .patcher import cache_key, load_patch_bundle, save_patch_bundle
from .reports import write_csv, write_json
from .spectral import DENSE_LIMIT, FilterSpec, eigendecompose, frequency_response
from .trainer import (TrainConfig, _map, baseline_gcn, baseline_mlp, candidate_patches,
                      run_ablation, train, train_on_patches)
from .verify import TRIAL_FIELDS, run_trials

log = logging.getLogger("gpatcher")

TRAIN_FLAGS = {f.name for f in fields(TrainConfig)} - {"candidates", "shuffle_patches"}


def _int_list(text):
    try:
        return [int(x) for x in str(text).split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _str_list(text):
    return [x.strip() for x in str(text).split(",") if x.strip()]


def _add_common(p, out_default):
    p.add_argument("--config", help="JSON file of settings (flags take precedence)")
    p.add_argument("--out", default=None, help=f"output path (default {out_default})")
    p.add_argument("--jobs", type=int, default=None, help="worker processes for seed sweeps")
    p.add_argument("--data-dir", default=None,
                   help=f"root for bundled manifests (default ${DATA_DIR_ENV})")
    p.set_defaults(_out_default=out_default)


def _add_graph(p):
    p.add_argument("--manifest", default=None,
                   help="dataset manifest path or bundled dataset name")


def _add_train(p):
    # defaults are None so config files can fill the gaps
    p.add_argument("--extractor", choices=("adaptive", "heat", "bandpass", "shared", "ppr"))
    p.add_argument("--p", type=int, help="patch size")
    p.add_argument("--K", type=int, help="filter order / count")
    p.add_argument("--c", type=float, help="PPR teleport complement (Fast variant)")
    p.add_argument("--drop-tol", dest="drop_tol", type=float,
                   help="PPR propagation threshold (0 = exact)")
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--epochs", dest="max_epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--activation", choices=("relu", "tanh", "none"))
    p.add_argument("--aggregate", choices=("mean", "sum", "max"))
    p.add_argument("--residual", action="store_const", const=True, default=None)
    p.add_argument("--two-layer", dest="two_layer", action="store_const", const=True,
                   default=None)
    p.add_argument("--self-loops", dest="self_loops", action="store_const", const=True,
                   default=None)
    p.add_argument("--seed", type=int)
    p.add_argument("--seeds", type=int, help="number of consecutive seeds to run")
    p.add_argument("--candidates", help="JSON file with a list of extractor settings")


def build_parser():
    ap = argparse.ArgumentParser(prog="gpatcher", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"gpatcher {__version__}")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="heterophily and spectrum summary of a dataset")
    _add_common(p, "analyze.csv")
    _add_graph(p)
    p.add_argument("--filter", help="JSON extractor settings whose mean response to report")

    p = sub.add_parser("extract", help="extract and cache patches")
    _add_common(p, "patches.npz")
    _add_graph(p)
    _add_train(p)

    p = sub.add_parser("train", help="train GPatcher or a baseline; one row per seed")
    _add_common(p, "train.csv")
    _add_graph(p)
    _add_train(p)
    p.add_argument("--model", choices=("gpatcher", "mlp", "gcn"), default=None)
    p.add_argument("--patches", help="patch bundle written by `extract`")
    p.add_argument("--checkpoint", help="save the first seed's model here (.npz)")

    p = sub.add_parser("ablate", help="run an ablation protocol")
    _add_common(p, "ablate.csv")
    _add_graph(p)
    _add_train(p)
    p.add_argument("kind", choices=("induced", "alt_filters", "patch_order", "sensitivity",
                                    "scalability"))
    p.add_argument("--p-values", dest="p_values", type=_int_list)
    p.add_argument("--K-values", dest="K_values", type=_int_list)
    p.add_argument("--families", type=_str_list)
    p.add_argument("--sizes", type=_int_list)

    p = sub.add_parser("verify-bounds", help="fuzz the spectral bounds")
    _add_common(p, "verify.csv")
    p.add_argument("--trials", type=int, default=None)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("synth", help="write a synthetic dataset (files + manifest)")
    _add_common(p, "synth")
    p.add_argument("--n", type=int)
    p.add_argument("--C", type=int)
    p.add_argument("--d", type=int)
    p.add_argument("--mean-degree", dest="mean_degree", type=float)
    p.add_argument("--h", type=float, help="inter-class edge probability")
    p.add_argument("--snr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--train", type=float)
    p.add_argument("--val", type=float)
    p.add_argument("--test", type=float)
    p.add_argument("--format", choices=("dense", "triplet"), default=None)

    p = sub.add_parser("scalability", help="time the PPR extractor on random graphs")
    _add_common(p, "scalability.csv")
    p.add_argument("--sizes", type=_int_list)
    p.add_argument("--p-values", dest="p_values", type=_int_list)
    p.add_argument("--c", type=float)
    p.add_argument("--drop-tol", dest="drop_tol", type=float)
    p.add_argument("--repeats", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--mean-degree", dest="mean_degree", type=float)
    return ap


COMMAND_DEFAULTS = {
    "verify-bounds": {"trials": 100, "n": 30, "seed": 0},
    "synth": {f.name: f.default for f in fields(SynthSpec)} | {"format": "dense"},
    "scalability": {"sizes": [10, 100, 1000, 10000], "p_values": [8, 16, 32, 64], "c": 0.5,
                    "drop_tol": 1e-5, "repeats": 1, "seed": 0, "mean_degree": 10.0},
    "train": {"seeds": 1, "model": "gpatcher"},
    "ablate": {"seeds": 5},
    "extract": {"seeds": 1},
}


def resolve(args):
    """Merge flags over the --config file over defaults; returns a dict."""
    cfg = {f.name: f.default for f in fields(TrainConfig) if f.name in TRAIN_FLAGS}
    cfg.update(COMMAND_DEFAULTS.get(args.command, {}))
    cfg["jobs"] = 1
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ParseError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ParseError("config file must hold a JSON object")
        cfg.update(doc)
    for k, v in vars(args).items():
        if k.startswith("_") or k in ("config", "command", "verbose"):
            continue
        if v is not None:
            cfg[k] = v
    cfg["out"] = cfg.get("out") or args._out_default
    return cfg


def _train_config(cfg):
    kw = {k: cfg[k] for k in TRAIN_FLAGS if k in cfg}
    # a short --epochs run should not trip over the default patience
    if "patience" in kw and "max_epochs" in kw:
        kw["patience"] = min(kw["patience"], kw["max_epochs"])
    if cfg.get("candidates"):
        cands = cfg["candidates"]
        if isinstance(cands, str):
            try:
                cands = json.loads(Path(cands).read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise ParseError(f"cannot read candidates {cands}: {exc}") from exc
        kw["candidates"] = tuple(FilterSpec.from_dict(c) for c in cands)
    return TrainConfig(**kw)


def _load_graph(cfg):
    if not cfg.get("manifest"):
        raise ParseError("--manifest is required")
    return load_dataset(cfg["manifest"], data_dir=cfg.get("data_dir"))


def _echo(cfg, invocation, extra=None):
    doc = {"invocation": invocation, "version": __version__,
           "settings": {k: v for k, v in sorted(cfg.items())}}
    if extra:
        doc.update(extra)
    write_json(str(cfg["out"]) + ".config.json", doc)


# subcommands

def cmd_analyze(cfg, invocation):
    g = _load_graph(cfg)
    H = node_heterophily(g)
    st = dataset_stats(g)
    row = {"dataset": g.name, "n": g.n, "edges": st["edges"], "classes": g.num_classes,
           "features": g.num_features, "heterophily": H.graph_level,
           "heterophily_defined": int(H.defined.sum()), "isolated": int((~H.defined).sum()),
           "lambda_min": None, "lambda_max": None, "mean_response": None,
           "response_filter": ""}
    if g.n <= DENSE_LIMIT:
        s = eigendecompose(normalize_adjacency(g))
        row["lambda_min"], row["lambda_max"] = float(s.lambdas[0]), float(s.lambdas[-1])
        if cfg.get("filter"):
            spec = FilterSpec.from_dict(json.loads(Path(cfg["filter"]).read_text()))
            row["mean_response"] = frequency_response(spec, s.lambdas).mean
            row["response_filter"] = spec.label or spec.family
    cols = list(row)
    write_csv(cfg["out"], cols, [row], invocation)
    _echo(cfg, invocation)
    return 0


def cmd_extract(cfg, invocation):
    g = _load_graph(cfg)
    tc = _train_config(cfg)
    items = list(candidate_patches(g, tc))
    save_patch_bundle(cfg["out"], items, key=cache_key(g, FilterSpec(tc.extractor), tc.p))
    _echo(cfg, invocation, {"candidates": [lab for lab, _ in items]})
    return 0


TRAIN_COLUMNS = ("seed", "model", "candidate", "epochs", "best_epoch", "best_val_loss",
                 "best_val_acc", "test_acc")


def _seed_job(args):
    g, tc, model, bundle = args
    if model == "mlp":
        return baseline_mlp(g, tc)
    if model == "gcn":
        return baseline_gcn(g, tc)
    return train(g, tc, patches=bundle)


def cmd_train(cfg, invocation):
    g = _load_graph(cfg)
    tc = _train_config(cfg)
    bundle = None
    if cfg.get("patches"):
        bundle = load_patch_bundle(cfg["patches"], g.features,
                                   expect_key=cache_key(g, FilterSpec(tc.extractor), tc.p))
    seeds = [tc.seed + i for i in range(int(cfg["seeds"]))]
    jobs = [(g, replace(tc, seed=s), cfg["model"], bundle) for s in seeds]
    reports = _map(_seed_job, jobs, cfg.get("jobs", 1))
    rows = []
    for s, r in zip(seeds, reports):
        rows.append((s, r.model_name, r.candidate, r.epochs, r.best_epoch, r.best_val_loss,
                     r.best_val_acc, r.test_acc))
    acc = np.array([r.test_acc for r in reports])
    rows.append(("mean", cfg["model"], "", None, None, None, None, float(acc.mean())))
    rows.append(("std", cfg["model"], "", None, None, None, None, float(acc.std())))
    write_csv(cfg["out"], TRAIN_COLUMNS, rows, invocation)
    if cfg.get("checkpoint") and cfg["model"] == "gpatcher":
        label = reports[0].candidate
        opts = bundle if bundle is not None else list(candidate_patches(g, tc))
        ps = dict(opts)[label]
        _, model = train_on_patches(g, ps, replace(tc, seed=seeds[0]), label)
        model.save(cfg["checkpoint"])
    _echo(cfg, invocation, {"train_config": tc.to_dict()})
    return 0


def cmd_ablate(cfg, invocation):
    tc = _train_config(cfg)
    seeds = [tc.seed + i for i in range(int(cfg["seeds"]))]
    grid = {k: cfg[k] for k in ("p_values", "K_values", "families", "sizes") if cfg.get(k)}
    g = _load_graph(cfg) if cfg["kind"] != "scalability" else None
    res = run_ablation(cfg["kind"], g, tc, seeds=seeds, jobs=cfg.get("jobs", 1), **grid)
    write_csv(cfg["out"], res.columns, res.rows, invocation)
    extra = {"train_config": tc.to_dict()}
    if res.timings:
        write_json(str(cfg["out"]) + ".timings.json", res.timings)
    _echo(cfg, invocation, extra)
    return 0


def cmd_verify(cfg, invocation):
    if cfg["trials"] < 1:
        raise GPatcherError("--trials must be >= 1")
    rep = run_trials(cfg["trials"], cfg["n"], cfg["seed"])
    write_csv(cfg["out"], TRIAL_FIELDS, rep.rows, invocation)
    for line in rep.summary_lines():
        print(line)
    _echo(cfg, invocation, {"passed": rep.passed, "failed": rep.failed,
                            "degenerate": rep.degenerate,
                            "theorem_mismatch": rep.theorem_mismatch})
    return 0 if rep.ok else 1


def cmd_synth(cfg, invocation):
    spec = SynthSpec(**{f.name: cfg[f.name] for f in fields(SynthSpec)})
    g = generate_synthetic(spec)
    path = write_dataset(g, cfg["out"], fmt=cfg["format"])
    print(path)
    cfg = dict(cfg, out=str(Path(cfg["out"]) / "synth"))
    _echo(cfg, invocation, {"manifest": str(path)})
    return 0


def cmd_scalability(cfg, invocation):
    graphs = generate_scalability_suite(cfg["sizes"], cfg["p_values"], seed=cfg["seed"],
                                        mean_degree=cfg["mean_degree"])
    tc = TrainConfig(c=cfg["c"], drop_tol=cfg["drop_tol"], seed=cfg["seed"])
    res = run_ablation("scalability", None, tc, jobs=cfg.get("jobs", 1), graphs=graphs,
                       p_values=cfg["p_values"], repeats=cfg["repeats"])
    write_csv(cfg["out"], res.columns, res.rows, invocation)
    write_json(str(cfg["out"]) + ".timings.json", res.timings)
    _echo(cfg, invocation)
    return 0


COMMANDS = {"analyze": cmd_analyze, "extract": cmd_extract, "train": cmd_train,
            "ablate": cmd_ablate, "verify-bounds": cmd_verify, "synth": cmd_synth,
            "scalability": cmd_scalability}


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    invocation = shlex.join(["gpatcher", *argv])
    try:
        cfg = resolve(args)
        return COMMANDS[args.command](cfg, invocation)
    except GPatcherError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (ValueError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
