"""Command-line pipeline driver.

Stages write keyed artifacts into one output directory so later commands
can pick up where earlier ones stopped: synth and preprocess produce the
field and view containers, pretrain/embed/probe/eval handle one ablation
arm at a time, report aggregates finished runs across seeds, and ablate
chains all three arms plus the comparison table.  Every artifact embeds
the configuration hash, and re-running any command with the same config
and seed overwrites its outputs with byte-identical files.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

ABLATION_CHOICES = ("joint", "morph", "micro")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="madkit",
        description="dual-view self-distillation benchmark pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, help_text: str, ablation: bool = False):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", metavar="PATH",
                       help="JSON run configuration (defaults used if omitted)")
        p.add_argument("--seed", type=int, metavar="N",
                       help="override the configured global seed")
        p.add_argument("--threads", type=int, metavar="N",
                       help="cap numeric library threads")
        p.add_argument("--out", metavar="DIR",
                       help="output directory (falls back to the config "
                            "value, then $MADKIT_OUT, then ./runs)")
        if ablation:
            p.add_argument("--ablation", choices=ABLATION_CHOICES,
                           default="joint",
                           help="which views take part in pretraining")
        return p

    add("synth", "generate one synthetic tissue field with ground truth")
    add("preprocess", "extract per-cell views and the train/test split")
    add("pretrain", "run self-distillation on the pretrain split",
        ablation=True)
    add("embed", "write embeddings for every cell from a checkpoint",
        ablation=True)
    probe = add("probe", "train label and expression probes on embeddings",
                ablation=True)
    probe.add_argument("--shuffle-labels", action="store_true",
                       help="permute training labels (chance-level control)")
    add("eval", "score one trained arm and write its metrics report",
        ablation=True)
    add("report", "aggregate finished reports across seeds (median + CI)")
    add("ablate", "run joint and both single-view arms, then compare")
    return parser


def _cap_threads(n: int | None) -> None:
    # must happen before numpy is imported anywhere in this process
    if n is None:
        return
    if n < 1:
        from .errors import ConfigError
        raise ConfigError(f"--threads {n} must be at least 1")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(n)


def _load_run(args):
    from .config import RunConfig, load_config
    config = load_config(args.config) if args.config else RunConfig()
    seed = args.seed if args.seed is not None else config.seed
    out = args.out or config.out or os.environ.get("MADKIT_OUT") or "runs"
    os.makedirs(out, exist_ok=True)
    return config, seed, out


def _require(path: str, hint: str) -> str:
    if not os.path.exists(path):
        from .errors import DataError
        raise DataError(f"missing {path}; run `{hint}` first")
    return path


# -- artifact names ----------------------------------------------------------------

def field_path(out, seed):
    return os.path.join(out, f"field_s{seed}.madc")


def truth_path(out, seed):
    return os.path.join(out, f"truth_s{seed}.json")


def views_path(out, seed):
    return os.path.join(out, f"views_s{seed}.madc")


def splits_path(out, seed):
    return os.path.join(out, f"splits_s{seed}.json")


def checkpoint_path(out, seed, ablation):
    return os.path.join(out, f"checkpoint_{ablation}_s{seed}.madc")


def history_path(out, seed, ablation):
    return os.path.join(out, f"history_{ablation}_s{seed}.json")


def embeddings_path(out, seed, ablation):
    return os.path.join(out, f"embeddings_{ablation}_s{seed}.madc")


def probe_path(out, seed, ablation, shuffled=False):
    tag = "_shuffled" if shuffled else ""
    return os.path.join(out, f"probe_{ablation}_s{seed}{tag}.json")


def report_path(out, seed, ablation):
    return os.path.join(out, f"report_{ablation}_s{seed}.json")


# -- stage bodies ------------------------------------------------------------------

def _load_splits(path) -> dict:
    import numpy as np
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    return {k: np.asarray(v, dtype=np.int64)
            for k, v in payload["splits"].items()}


def cmd_synth(args) -> int:
    from .config import config_hash
    from .pipeline import build_field
    from .synthgen import save_field
    config, seed, out = _load_run(args)
    field = build_field(config, seed)
    save_field(field, field_path(out, seed), truth_path(out, seed),
               extra_meta={"config": config_hash(config)})
    print(f"synth: {field.n_cells} cells, {field.spec.n_types} types "
          f"-> {field_path(out, seed)}")
    return EXIT_OK


def cmd_preprocess(args) -> int:
    from .config import config_hash
    from .crops import save_views
    from .pipeline import build_splits, build_views, write_json
    from .synthgen import load_field
    config, seed, out = _load_run(args)
    field = load_field(_require(field_path(out, seed), "madkit synth"))
    views = build_views(config, field)
    save_views(views, views_path(out, seed),
               extra_meta={"config": config_hash(config), "seed": seed})
    splits = build_splits(config, views, seed)
    write_json({"config": config_hash(config), "seed": seed,
                "splits": {k: v.tolist() for k, v in splits.items()}},
               splits_path(out, seed))
    sizes = {k: int(v.size) for k, v in splits.items()}
    print(f"preprocess: {views.n_cells} cells, splits {sizes} "
          f"-> {views_path(out, seed)}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    from .config import config_hash
    from .crops import load_views
    from .distill import save_checkpoint
    from .pipeline import pretrain, write_json
    config, seed, out = _load_run(args)
    views = load_views(_require(views_path(out, seed), "madkit preprocess"))
    splits = _load_splits(_require(splits_path(out, seed),
                                   "madkit preprocess"))
    state, history = pretrain(
        config, views, splits, args.ablation, seed,
        log=lambda rec: print(rec, file=sys.stderr))
    save_checkpoint(state, checkpoint_path(out, seed, args.ablation),
                    extra_meta={"run_config": config_hash(config),
                                "ablation": args.ablation, "seed": seed})
    write_json({"config": config_hash(config), "seed": seed,
                "ablation": args.ablation, "history": history},
               history_path(out, seed, args.ablation))
    print(f"pretrain[{args.ablation}]: {state.step} steps, "
          f"loss {history[0]['loss_mean']:.4f} -> "
          f"{history[-1]['loss_mean']:.4f}")
    return EXIT_OK


def cmd_embed(args) -> int:
    import numpy as np
    from .config import config_hash
    from .container import write_container
    from .crops import load_views
    from .distill import load_checkpoint
    from .embed import embed_cells
    config, seed, out = _load_run(args)
    views = load_views(_require(views_path(out, seed), "madkit preprocess"))
    state = load_checkpoint(_require(
        checkpoint_path(out, seed, args.ablation), "madkit pretrain"))
    emb = embed_cells(state, views)
    write_container(
        embeddings_path(out, seed, args.ablation),
        {"values": emb.values, "cell_ids": emb.cell_ids,
         "labels": np.asarray(views.labels, dtype=np.int32),
         "expression": views.expression},
        schema="embeddings-v1",
        meta={"config": config_hash(config), "seed": seed,
              "ablation": args.ablation,
              "views": list(state.config.views),
              "embedding_dim": int(state.embedding_dim())})
    print(f"embed[{args.ablation}]: {emb.values.shape[0]} cells x "
          f"{emb.values.shape[1]} dims "
          f"-> {embeddings_path(out, seed, args.ablation)}")
    return EXIT_OK


def cmd_probe(args) -> int:
    import numpy as np
    from .config import config_hash
    from .container import read_container
    from .heads import _pearson_columns, train_classifier, train_regressor
    from .pipeline import _probe_config, write_json
    from .rng import derive_rng
    config, seed, out = _load_run(args)
    c = read_container(_require(
        embeddings_path(out, seed, args.ablation), "madkit embed"))
    splits = _load_splits(_require(splits_path(out, seed),
                                   "madkit preprocess"))
    train_idx, test_idx = splits["pretrain"], splits["test"]
    emb, labels = c["values"], c["labels"]
    expression = c["expression"]

    labels_train = labels[train_idx]
    if args.shuffle_labels:
        labels_train = derive_rng("probe-shuffle", seed).permutation(
            labels_train)
    clf = train_classifier(emb[train_idx], labels_train,
                           _probe_config(config, seed))
    accuracy = float((clf.predict(emb[test_idx]) == labels[test_idx]).mean())

    reg = train_regressor(emb[train_idx], expression[train_idx],
                          _probe_config(config, seed))
    pearson = _pearson_columns(reg.predict(emb[test_idx]),
                               expression[test_idx])

    payload = {"config": config_hash(config), "seed": seed,
               "ablation": args.ablation,
               "shuffled_labels": bool(args.shuffle_labels),
               "accuracy": accuracy,
               "chance_accuracy": float(
                   np.max(np.bincount(labels[test_idx]))
                   / max(1, test_idx.size)),
               "pearson_median": float(np.median(pearson)),
               "n_train": int(train_idx.size), "n_test": int(test_idx.size)}
    write_json(payload, probe_path(out, seed, args.ablation,
                                   args.shuffle_labels))
    print(f"probe[{args.ablation}]: accuracy {accuracy:.4f}, "
          f"median expression pearson {payload['pearson_median']:.4f}"
          + (" (shuffled labels)" if args.shuffle_labels else ""))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .crops import load_views
    from .distill import load_checkpoint
    from .pipeline import evaluate, write_json
    from .synthgen import load_field
    config, seed, out = _load_run(args)
    field = load_field(_require(field_path(out, seed), "madkit synth"))
    views = load_views(_require(views_path(out, seed), "madkit preprocess"))
    splits = _load_splits(_require(splits_path(out, seed),
                                   "madkit preprocess"))
    state = load_checkpoint(_require(
        checkpoint_path(out, seed, args.ablation), "madkit pretrain"))
    report = evaluate(config, field, views, splits, state, args.ablation,
                      seed)
    hist_file = history_path(out, seed, args.ablation)
    if os.path.exists(hist_file):
        with open(hist_file, encoding="utf-8") as fh:
            history = json.load(fh)["history"]
        if history:
            report.meta["loss_first_epoch"] = history[0]["loss_mean"]
            report.meta["loss_last_epoch"] = history[-1]["loss_mean"]
    write_json({"metrics": report.metrics, "meta": report.meta},
               report_path(out, seed, args.ablation))
    headline = {k: round(report.metrics[k], 4)
                for k in ("ari", "probe_accuracy") if k in report.metrics}
    print(f"eval[{args.ablation}]: {headline} "
          f"-> {report_path(out, seed, args.ablation)}")
    return EXIT_OK


def cmd_report(args) -> int:
    import csv
    import re
    from .config import config_hash
    from .pipeline import summarize_reports, write_json
    config, _, out = _load_run(args)
    pattern = re.compile(r"^report_(joint|morph|micro)_s(-?\d+)\.json$")
    reports = []
    for name in sorted(os.listdir(out)):
        if pattern.match(name):
            with open(os.path.join(out, name), encoding="utf-8") as fh:
                reports.append(json.load(fh))
    if not reports:
        from .errors import DataError
        raise DataError(f"no metric reports found in {out}")
    summary = summarize_reports(reports)
    write_json({"config": config_hash(config), "n_reports": len(reports),
                "summary": summary}, os.path.join(out, "summary.json"))
    csv_tmp = os.path.join(out, "summary.csv.tmp")
    with open(csv_tmp, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["ablation", "metric", "median",
                         "ci_low", "ci_high", "n"])
        for ablation in sorted(summary):
            for metric, row in summary[ablation]["metrics"].items():
                writer.writerow([ablation, metric, repr(row["median"]),
                                 repr(row["ci_low"]), repr(row["ci_high"]),
                                 row["n"]])
    os.replace(csv_tmp, os.path.join(out, "summary.csv"))
    print(f"report: {len(reports)} runs -> {os.path.join(out, 'summary.json')}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    import csv
    from .config import config_hash
    from .pipeline import write_json
    config, seed, out = _load_run(args)
    if not os.path.exists(field_path(out, seed)):
        cmd_synth(args)
    if not (os.path.exists(views_path(out, seed))
            and os.path.exists(splits_path(out, seed))):
        cmd_preprocess(args)
    metrics_by_arm = {}
    for arm in ABLATION_CHOICES:
        arm_args = argparse.Namespace(**{**vars(args), "ablation": arm,
                                         "shuffle_labels": False})
        cmd_pretrain(arm_args)
        cmd_embed(arm_args)
        cmd_probe(arm_args)
        cmd_eval(arm_args)
        with open(report_path(out, seed, arm), encoding="utf-8") as fh:
            metrics_by_arm[arm] = json.load(fh)["metrics"]
    names = sorted(set().union(*(m.keys() for m in metrics_by_arm.values())))
    table = {name: {arm: metrics_by_arm[arm].get(name)
                    for arm in ABLATION_CHOICES}
             for name in names}
    write_json({"config": config_hash(config), "seed": seed,
                "table": table},
               os.path.join(out, f"ablation_s{seed}.json"))
    csv_tmp = os.path.join(out, f"ablation_s{seed}.csv.tmp")
    with open(csv_tmp, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", *ABLATION_CHOICES])
        for name in names:
            writer.writerow([name] + [
                "" if table[name][arm] is None else repr(table[name][arm])
                for arm in ABLATION_CHOICES])
    os.replace(csv_tmp, os.path.join(out, f"ablation_s{seed}.csv"))
    print(f"ablate: seed {seed} "
          f"-> {os.path.join(out, f'ablation_s{seed}.json')}")
    return EXIT_OK


_COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "pretrain": cmd_pretrain,
    "embed": cmd_embed,
    "probe": cmd_probe,
    "eval": cmd_eval,
    "report": cmd_report,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _cap_threads(args.threads)
    from .errors import (ConfigError, DataError, GenerationError,
                         NumericalAbort, StateError, UsageError,
                         ValidationError)
    try:
        return _COMMANDS[args.command](args)
    except NumericalAbort as err:
        print(f"error: {err}", file=sys.stderr)
        for key, value in sorted(err.diagnostics.items()):
            print(f"  {key}: {value}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, UsageError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ValidationError, GenerationError, StateError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
