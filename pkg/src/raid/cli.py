"""Command-line workbench: ingest -> train -> attack -> eval -> report.

Exit codes: 0 success, 2 usage or input error, 3 numerical abort.
One global ``--seed`` fans out by fixed offsets: train +0, attack +1,
eval +2. Every output embeds the resolved configuration and seed.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys

import numpy as np

from raid import checkpoint
from raid.attack import ClassifierConfig, evaluate_attack
from raid.data import FORMATS, SCHEMES, DataError, Dataset, ingest
from raid.ranking import DEFAULT_CUTOFFS, evaluate_model
from raid.train import TrainConfig, TrainingDiverged, dp_perturb, train_raid

log = logging.getLogger("raid")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3
SEED_OFFSETS = {"train": 0, "attack": 1, "eval": 2}
CHECKPOINT = "model.ckpt"
RUN_FILE = "run.json"
LOG_FILE = "train_log.csv"


class InputError(Exception):
    pass


def _require_file(path, what):
    if not path or not os.path.isfile(path):
        raise InputError(f"{what} not found: {path}")
    return path


def _require_dir(path, what):
    if not path or not os.path.isdir(path):
        raise InputError(f"{what} not found: {path}")
    return path


def _write_json(path, obj):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _load_dataset(path):
    _require_dir(path, "dataset directory")
    try:
        return Dataset.load(path)
    except FileNotFoundError as exc:
        raise InputError(str(exc)) from None


def _load_run(run_dir):
    _require_dir(run_dir, "run directory")
    model, meta = checkpoint.load(_require_file(os.path.join(run_dir, CHECKPOINT), "checkpoint"))
    return model, meta


# --- commands ----------------------------------------------------------------


def cmd_ingest(args):
    _require_file(args.ratings, "ratings file")
    if args.users:
        _require_file(args.users, "users file")
    ds = ingest(args.ratings, args.users, args.format, args.min_user, args.min_item, args.seed)
    ds.meta["run_config"] = {
        "command": "ingest",
        "format": args.format,
        "min_user": args.min_user,
        "min_item": args.min_item,
        "seed": args.seed,
    }
    ds.save(args.out)
    print(f"{ds.num_users} users, {ds.num_items} items, {ds.num_interactions()} interactions -> {args.out}")
    return EXIT_OK


def _train_config(args):
    eta = args.eta if args.defense == "raid" else 0.0
    return TrainConfig(
        eta=eta, tau=args.tau, xi=args.xi, e1=args.e1, e2=args.e2, mu=args.mu,
        neg_ratio=args.neg_ratio, seed=args.seed + SEED_OFFSETS["train"],
        embedding_dim=args.dim, batch_size=args.batch_size or None,
        support_size=args.support_size,
    )


def _write_log(path, history):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "phase", "loss_p", "loss_d", "refreshed"])
        for e in history:
            w.writerow([e["epoch"], e["phase"], _fmt(e["loss_p"]), _fmt(e["loss_d"]), int(e["refreshed"])])


def _fmt(x):
    return "" if x is None else repr(float(x))


def cmd_train(args):
    ds = _load_dataset(args.data)
    labels = ds.labels(args.attribute) if args.attribute in ds.attributes else None
    if labels is None:
        if args.defense == "raid":
            raise InputError(f"dataset has no {args.attribute!r} labels")
        labels = np.zeros(ds.num_users, dtype=np.int64)
    if args.defense == "dp" and args.sigma is None:
        raise InputError("--defense dp needs --sigma")
    config = _train_config(args)
    run = {
        "command": "train",
        "method": args.name or args.defense,
        "defense": args.defense,
        "attribute": args.attribute,
        "sigma": args.sigma if args.defense == "dp" else None,
        "seed": args.seed,
        "train_config": config.to_dict(),
        "dataset": {"path": os.path.normpath(args.data), "fingerprint": ds.fingerprint()},
    }
    os.makedirs(args.out, exist_ok=True)
    ckpt = os.path.join(args.out, CHECKPOINT)
    status = EXIT_OK
    try:
        model, history = train_raid(ds.train, ds.num_users, ds.num_items, labels, config)
    except TrainingDiverged as exc:
        # exc.model holds the parameters from before the failing epoch
        print(f"error: training diverged: {exc}; keeping last finite checkpoint", file=sys.stderr)
        model, history, status = exc.model, exc.history, EXIT_NUMERIC
        run["aborted"] = str(exc)
    if args.defense == "dp" and status == EXIT_OK:
        model = dp_perturb(model, args.sigma, seed=config.seed)
    checkpoint.save(ckpt, model, meta=run)
    _write_log(os.path.join(args.out, LOG_FILE), history)
    _write_json(os.path.join(args.out, RUN_FILE), run)
    if status == EXIT_OK:
        print(f"trained {run['method']} for {len(history)} epochs -> {args.out}")
    return status


def cmd_attack(args):
    ds = _load_dataset(args.data)
    model, meta = _load_run(args.run)
    labels = ds.labels(args.attribute)
    labeled = labels >= 1
    config = ClassifierConfig(kind=args.classifier, seed=args.seed + SEED_OFFSETS["attack"])
    report = evaluate_attack(model.P[labeled], labels[labeled], config,
                             n_splits=args.folds, n_repeats=args.repeats,
                             seed=args.seed + SEED_OFFSETS["attack"])
    out = report.to_dict()
    out["run_config"] = {"command": "attack", "attribute": args.attribute, "seed": args.seed,
                         "classifier": args.classifier, "train_run": meta}
    path = args.out or os.path.join(args.run, "attack.json")
    _write_json(path, out)
    print(f"attack {args.attribute}: f1={report.f1_micro:.4f} bacc={report.bacc:.4f} -> {path}")
    return EXIT_OK


def cmd_eval(args):
    ds = _load_dataset(args.data)
    model, meta = _load_run(args.run)
    targets = ds.test_items if args.split == "test" else ds.validation_items
    report = evaluate_model(model, ds.train, targets, args.cutoffs)
    out = report.to_dict()
    out["run_config"] = {"command": "eval", "split": args.split, "cutoffs": list(args.cutoffs),
                         "seed": args.seed, "eval_seed": args.seed + SEED_OFFSETS["eval"],
                         "train_run": meta}
    path = args.out or os.path.join(args.run, "eval.json")
    _write_json(path, out)
    k = 10 if 10 in report.hr else max(report.hr)
    print(f"eval: hr@{k}={report.hr[k]:.4f} ndcg@{k}={report.ndcg[k]:.4f} -> {path}")
    return EXIT_OK


def report_rows(run_dirs):
    """One row per run: method name plus attack and ranking metrics, sorted by method."""
    rows = []
    for run_dir in run_dirs:
        run = _read_json(_require_file(os.path.join(run_dir, RUN_FILE), "run file"))
        row = {"method": run["method"]}
        attack = os.path.join(run_dir, "attack.json")
        if os.path.isfile(attack):
            a = _read_json(attack)
            row["F1"], row["BAcc"] = a["f1_micro"], a["bacc"]
        ev = os.path.join(run_dir, "eval.json")
        if os.path.isfile(ev):
            e = _read_json(ev)
            for k in sorted(e["hr"], key=int):
                row[f"HR@{k}"] = e["hr"][k]
            for k in sorted(e["ndcg"], key=int):
                row[f"NDCG@{k}"] = e["ndcg"][k]
        rows.append(row)
    return sorted(rows, key=lambda r: r["method"])


def format_table(rows, fmt="markdown"):
    columns = ["method"]
    for r in rows:
        columns += [c for c in r if c not in columns]
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([r.get(c, "") for c in columns])
        return buf.getvalue()
    cell = lambda v: "" if v is None else (f"{v:.4f}" if isinstance(v, float) else str(v))  # noqa: E731
    lines = ["| " + " | ".join(columns) + " |", "|" + "---|" * len(columns)]
    lines += ["| " + " | ".join(cell(r.get(c)) for c in columns) + " |" for r in rows]
    return "\n".join(lines) + "\n"


def cmd_report(args):
    table = format_table(report_rows(args.runs), args.format)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(table)
    else:
        sys.stdout.write(table)
    return EXIT_OK


# --- argument parsing ----------------------------------------------------------


def _cutoffs(text):
    try:
        ks = sorted({int(k) for k in text.split(",") if k.strip()})
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad cutoff list {text!r}") from None
    if not ks or ks[0] < 1:
        raise argparse.ArgumentTypeError("cutoffs must be positive integers")
    return ks


def build_parser():
    p = argparse.ArgumentParser(prog="raid", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ingest", help="parse ratings/users files into a dataset directory")
    s.add_argument("--ratings", required=True)
    s.add_argument("--users")
    s.add_argument("--format", choices=FORMATS, default="movielens_dat")
    s.add_argument("--min-user", type=int, default=5)
    s.add_argument("--min-item", type=int, default=5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ingest)

    d = TrainConfig()
    s = sub.add_parser("train", help="train a recommender, optionally defended")
    s.add_argument("--data", required=True)
    s.add_argument("--defense", choices=("none", "raid", "dp"), default="raid")
    s.add_argument("--attribute", choices=sorted(SCHEMES), default="gender")
    s.add_argument("--eta", type=float, default=d.eta)
    s.add_argument("--tau", type=float, default=d.tau)
    s.add_argument("--xi", type=int, default=d.xi)
    s.add_argument("--sigma", type=float, help="noise level for --defense dp")
    s.add_argument("--e1", type=int, default=d.e1, help="cross-entropy-only epochs")
    s.add_argument("--e2", type=int, default=d.e2, help="defense epochs")
    s.add_argument("--mu", type=float, default=d.mu, help="SGD step size")
    s.add_argument("--dim", type=int, default=d.embedding_dim)
    s.add_argument("--batch-size", type=int, default=d.batch_size, help="0 for full batch")
    s.add_argument("--neg-ratio", type=int, default=d.neg_ratio)
    s.add_argument("--support-size", type=int, default=d.support_size)
    s.add_argument("--name", help="method name used in reports (default: the defense)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("attack", help="attribute-inference attack on a run's user embeddings")
    s.add_argument("--data", required=True)
    s.add_argument("--run", required=True)
    s.add_argument("--attribute", choices=sorted(SCHEMES), default="gender")
    s.add_argument("--classifier", choices=("logreg", "mlp"), default="logreg")
    s.add_argument("--folds", type=int, default=5)
    s.add_argument("--repeats", type=int, default=5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_attack)

    s = sub.add_parser("eval", help="leave-one-out ranking metrics of a run")
    s.add_argument("--data", required=True)
    s.add_argument("--run", required=True)
    s.add_argument("--split", choices=("test", "validation"), default="test")
    s.add_argument("--cutoffs", type=_cutoffs, default=list(DEFAULT_CUTOFFS))
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("report", help="merge runs into one table sorted by method")
    s.add_argument("--runs", nargs="+", required=True)
    s.add_argument("--format", choices=("markdown", "csv"), default="markdown")
    s.add_argument("--out")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (InputError, DataError, KeyError, checkpoint.CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
