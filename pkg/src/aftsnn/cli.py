"""Command-line entry point: train, eval, verify, complexity, inspect-data."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from . import complexity as cx
from .datasets import load_dataset, load_idx, load_nmnist, bin_events
from .errors import ConfigError, DataError, FormatError, NumericError
from .network import Network
from .neurons import AftParams
from .oracle import run_trial
from .trainer import RunConfig, evaluate, load_checkpoint, train

EXIT_OK, EXIT_VERIFY, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("aftsnn")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


class Output:
    def __init__(self, as_json):
        self.as_json = as_json

    def emit(self, record: dict, text: str | None = None):
        if self.as_json:
            print(json.dumps(record, default=_jsonable), flush=True)
        elif text is not None:
            print(text, flush=True)


def _jsonable(v):
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    raise TypeError(type(v).__name__)


def bundled_configs():
    return sorted(p.name for p in resources.files("aftsnn.configs").iterdir() if p.name.endswith(".json"))


def read_config(ref):
    """Load a run config from a path, or from the bundled configs by file name."""
    path = Path(ref)
    if not path.exists():
        name = ref if ref.endswith(".json") else ref + ".json"
        if name not in bundled_configs():
            raise ConfigError(f"no such file and no bundled config named {ref!r}", field="config")
        text = resources.files("aftsnn.configs").joinpath(name).read_text()
    else:
        text = path.read_text()
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON: {e}", field="config") from None


def apply_override(doc, assignment):
    """``train.lr_max=0.01`` style override; the value is parsed as JSON when possible."""
    if "=" not in assignment:
        raise ConfigError(f"expected KEY=VALUE, got {assignment!r}", field="--set")
    key, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = doc
    parts = key.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"{p} is not an object", field=key)
    node[parts[-1]] = value


def run_id(doc):
    return hashlib.sha1(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:12]


def cmd_train(args, out: Output):
    doc = read_config(args.config)
    doc.setdefault("train", {})
    for key, flag in (("seed", args.seed), ("epochs", args.epochs), ("threads", args.threads),
                      ("train_subset", args.train_subset), ("test_subset", args.test_subset)):
        if flag is not None:
            doc["train"][key] = flag
    for assignment in args.set or []:
        apply_override(doc, assignment)
    config = RunConfig.from_dict(doc)
    T = config.network.time_steps
    train_set = load_dataset(config.dataset, args.data_dir, "train", T)
    test_set = load_dataset(config.dataset, args.data_dir, "test", T)
    rid = run_id(doc)
    out_dir = Path(args.out) if args.out else Path("runs") / rid
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {"run_id": rid, "config_path": str(args.config), "config": config.to_dict(),
                "version": __version__, "started": time.strftime("%Y-%m-%dT%H:%M:%S"),
                "layout": {"config": "config.json", "metrics": "metrics.csv",
                           "checkpoints": "checkpoints/", "complexity": "complexity.json"}}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
    out.emit({"event": "start", "run_id": rid, "out": str(out_dir), "train": len(train_set), "test": len(test_set)},
             f"run {rid}: {len(train_set)} train / {len(test_set)} test samples -> {out_dir}")

    def progress(row):
        out.emit({"event": "epoch", **row},
                 f"epoch {row['epoch']:3d}  lr {row['lr']:.2e}  loss {row['train_loss']:.4f}  "
                 f"train {row['train_acc']:.4f}  test {row['test_acc']:.4f}  {row['wall_seconds']:.1f}s")

    result = train(config, train_set, test_set, out_dir, progress=progress)
    out.emit({"event": "done", "best_test_acc": result.best_acc}, f"best test accuracy {result.best_acc:.4f}")
    return EXIT_OK


def cmd_eval(args, out: Output):
    ckpt = load_checkpoint(args.checkpoint)
    dataset = args.dataset or ckpt.get("dataset")
    if dataset is None:
        raise ConfigError("checkpoint does not name its dataset; pass --dataset", field="dataset")
    aft = ckpt["train"].get("aft", {}) if isinstance(ckpt["train"], dict) else {}
    net = Network(ckpt["network"], ckpt["weights"], AftParams(**aft))
    data = load_dataset(dataset, args.data_dir, args.split, net.spec.time_steps)
    activity = cx.ActivityStats()
    acc = evaluate(net, data, args.batch_size, activity)
    out.emit({"event": "eval", "checkpoint": str(args.checkpoint), "epoch": ckpt["epoch"],
              "split": args.split, "accuracy": acc, "activity": activity.as_dict()},
             f"{args.split} accuracy {acc:.4f} ({len(data)} samples, checkpoint epoch {ckpt['epoch']})")
    return EXIT_OK


def cmd_verify(args, out: Output):
    if args.trials < 1:
        raise ConfigError("must be >= 1", field="--trials")
    rng = np.random.default_rng(args.seed)
    worst = None
    failed = 0
    t0 = time.perf_counter()
    for trial in range(args.trials):
        report = run_trial(rng, args.algorithm, args.tolerance, fault=args.inject_fault)
        if worst is None or report.max_rel_diff > worst[1].max_rel_diff:
            worst = (trial, report)
        if not report.passed:
            failed += 1
        if args.verbose:
            out.emit({"event": "trial", "trial": trial, **report.to_dict()},
                     f"trial {trial}: max rel diff {report.max_rel_diff:.3e} {'ok' if report.passed else 'FAIL'}")
    trial, report = worst
    summary = {"event": "verify", "algorithm": args.algorithm, "trials": args.trials, "failed": failed,
               "tolerance": args.tolerance, "worst_trial": trial, "worst": report.to_dict(),
               "seconds": time.perf_counter() - t0}
    text = (f"{args.algorithm}: {args.trials - failed}/{args.trials} trials within {args.tolerance:g}, "
            f"worst relative difference {report.max_rel_diff:.3e} (trial {trial})")
    if failed and report.mismatches:
        layer, post, pre, got, ref = report.mismatches[0]
        text += f"\nworst offender: trial {trial}, layer {layer}, w[{post},{pre}] engine {got:.9g} oracle {ref:.9g}"
    out.emit(summary, text)
    return EXIT_VERIFY if failed else EXIT_OK


def _metrics_zeta(path, layer):
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        raise DataError(f"{path} has no metric rows")
    cols = (f"zeta_L{layer - 1}", f"zeta_L{layer}")
    for c in cols:
        if c not in rows[0]:
            raise ConfigError(f"column {c} not in {path}", field="--layer")
    # mean over the whole training period
    rows = [r for r in rows if int(r["epoch"]) > 0] or rows
    return tuple(float(np.mean([float(r[c]) for r in rows])) for c in cols)


def cmd_complexity(args, out: Output):
    if args.paper_check:
        ok = True
        for r in cx.paper_check(args.tolerance_pp):
            ok &= r["passed"]
            out.emit({"event": "paper_check", **r},
                     f"{r['algorithm']}: M={r['M']} N={r['N']} T={r['T']} zeta_in={r['zeta_in']} "
                     f"zeta_out={r['zeta_out']} -> reduction {r['reduction_pct']:.4f}% "
                     f"(reported {r['expected']:.2f}%, |diff| {abs(r['reduction_pct'] - r['expected']):.4f}pp) "
                     f"{'PASS' if r['passed'] else 'FAIL'}")
        return EXIT_OK if ok else EXIT_VERIFY
    if args.metrics:
        if args.layer is None or args.m is None or args.n is None or args.t is None:
            raise ConfigError("--metrics needs --layer, --m, --n and --t", field="--metrics")
        zi, zo = _metrics_zeta(args.metrics, args.layer)
    else:
        if None in (args.m, args.n, args.t, args.zeta_in):
            raise ConfigError("give --paper-check, --metrics, or --m --n --t --zeta-in [--zeta-out]", field="complexity")
        zi, zo = args.zeta_in, args.zeta_out if args.zeta_out is not None else 0.0
    rep = cx.layer_report(args.m, args.n, args.t, zi, zo)
    text = "\n".join([f"M={args.m} N={args.n} T={args.t} zeta_in={zi:.4f} zeta_out={zo:.4f}"] +
                     [f"  {alg:7s} cost {rep['costs'][alg]:.1f}" +
                      (f"  reduction {100 * rep['reduction'][alg]:.2f}%" if alg in rep["reduction"] else "")
                      for alg in ("stbp", "mpd_ed", "std_ed")])
    out.emit({"event": "complexity", **rep}, text)
    return EXIT_OK


def cmd_inspect(args, out: Output):
    if args.file:
        path = Path(args.file)
        if path.suffix == ".bin":
            ev = load_nmnist(path)
            raster = bin_events(ev, args.time_steps)
            rec = {"event": "inspect", "file": str(path), "format": "aer", "events": int(len(ev)),
                   "on_events": int(ev["p"].sum()), "max_ts": int(ev["ts"].max()) if len(ev) else 0,
                   "time_steps": args.time_steps, "raster_activity": cx.record_activity(raster[None])}
            text = (f"{path}: {rec['events']} events ({rec['on_events']} ON), span {rec['max_ts']} us, "
                    f"raster activity {rec['raster_activity']:.4f} at T={args.time_steps}")
        else:
            images, labels = load_idx(path)
            rec = {"event": "inspect", "file": str(path), "format": "idx", "shape": list(images.shape),
                   "labels": None if labels is None else np.bincount(labels).tolist(),
                   "mean_intensity": float(images.mean())}
            text = f"{path}: shape {tuple(images.shape)}, mean intensity {rec['mean_intensity']:.4f}"
        out.emit(rec, text)
        return EXIT_OK
    if not args.dataset:
        raise ConfigError("give --dataset or --file", field="inspect-data")
    data = load_dataset(args.dataset, args.data_dir, args.split, args.time_steps)
    x, _ = data.batch(np.arange(min(len(data), 256)))
    rec = {"event": "inspect", "dataset": args.dataset, "split": args.split, "samples": len(data),
           "sample_shape": list(x.shape[1:]), "label_counts": np.bincount(data.labels).tolist(),
           "input_activity": cx.record_activity(x)}
    out.emit(rec, f"{args.dataset}/{args.split}: {len(data)} samples, sample shape {tuple(x.shape[1:])}, "
                  f"labels {rec['label_counts']}, input activity {rec['input_activity']:.4f}")
    return EXIT_OK


def build_parser():
    p = _Parser(prog="aftsnn", description="Event-driven training of spiking networks with adaptive thresholds.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("--json", action="store_true", help="JSON lines on stdout")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a network from a JSON config")
    t.add_argument("--config", required=True, help=f"path or bundled name ({', '.join(bundled_configs())})")
    t.add_argument("--data-dir", help="dataset root (default: $SNN_DATA_DIR)")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--threads", type=int)
    t.add_argument("--train-subset", type=int)
    t.add_argument("--test-subset", type=int)
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key, e.g. train.lr_max=0.01")
    t.add_argument("--out", help="run directory (default: runs/<run id>)")

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data-dir")
    e.add_argument("--dataset", choices=("fmnist", "nmnist"))
    e.add_argument("--split", default="test", choices=("train", "test"))
    e.add_argument("--batch-size", type=int, default=256)

    v = sub.add_parser("verify", help="check an event-driven engine against its dense oracle")
    v.add_argument("--algorithm", required=True, choices=("std_ed", "mpd_ed", "stbp"))
    v.add_argument("--trials", type=int, default=100)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--tolerance", type=float, default=1e-6)
    v.add_argument("--inject-fault", action="store_true", help="perturb one engine gradient (negative control)")

    c = sub.add_parser("complexity", help="training-complexity arithmetic")
    c.add_argument("--paper-check", action="store_true")
    c.add_argument("--tolerance-pp", type=float, default=0.01)
    c.add_argument("--metrics", help="metrics.csv of a run")
    c.add_argument("--layer", type=int, help="weighted layer k; uses columns zeta_L{k-1}, zeta_L{k}")
    c.add_argument("--m", type=int)
    c.add_argument("--n", type=int)
    c.add_argument("--t", type=int)
    c.add_argument("--zeta-in", type=float)
    c.add_argument("--zeta-out", type=float)

    d = sub.add_parser("inspect-data", help="summarise a dataset split or a single data file")
    d.add_argument("--dataset", choices=("fmnist", "nmnist"))
    d.add_argument("--data-dir")
    d.add_argument("--split", default="train", choices=("train", "test"))
    d.add_argument("--file")
    d.add_argument("--time-steps", type=int, default=30)
    return p


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "verify": cmd_verify,
            "complexity": cmd_complexity, "inspect-data": cmd_inspect}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.command == "verify" and args.algorithm == "stbp":
        print("aftsnn verify: error: stbp has no independent oracle (it is the dense oracle)", file=sys.stderr)
        return EXIT_USAGE
    out = Output(args.json)
    try:
        return COMMANDS[args.command](args, out)
    except (ConfigError, DataError, FormatError) as e:
        print(f"aftsnn {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as e:
        print(f"aftsnn {args.command}: numeric error: {e}", file=sys.stderr)
        return EXIT_VERIFY
    except FileNotFoundError as e:
        print(f"aftsnn {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
