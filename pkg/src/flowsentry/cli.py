"""``flowsentry`` command line: synth, preprocess, train, evaluate, predict.

Exit codes: 0 ok, 2 usage, 3 data error, 4 model/data config mismatch.
Logs go to stderr; artifacts only to files.
"""

import argparse
import csv
import logging
import os
import sys

import numpy as np

from . import evaluate, flows, nn, synth, train
from .errors import FlowSentryError
from .pcap import read_capture

log = logging.getLogger("flowsentry")

EXIT_USAGE, EXIT_DATA, EXIT_CONFIG = 2, 3, 4


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _nonneg_int(text):
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {value}")
    return value


def _positive_float(text):
    value = float(text)
    if not value > 0:
        raise argparse.ArgumentTypeError(f"must be > 0, got {value}")
    return value


def _float_list(text):
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc
    if not values or any(v < 0 for v in values):
        raise argparse.ArgumentTypeError(f"need a comma list of non-negative numbers: {text!r}")
    return values


def _int_list(text):
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc
    if not values or any(v < 1 for v in values):
        raise argparse.ArgumentTypeError(f"need a comma list of positive integers: {text!r}")
    return values


def _seed(args, fallback=0):
    if args.seed is not None:
        return args.seed
    env = os.environ.get("FLOWSENTRY_SEED")
    return int(env) if env else fallback


def build_parser():
    parser = argparse.ArgumentParser(prog="flowsentry", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a labeled synthetic capture")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--attack", choices=synth.ATTACK_TYPES, default="syn")
    p.add_argument("--benign-flows", type=_nonneg_int, default=300)
    p.add_argument("--attack-flows", type=_nonneg_int, default=300)
    p.add_argument("--duration", type=_positive_float, default=60.0)
    p.add_argument("--attack-pps", type=_positive_float, default=20.0)
    p.add_argument("--benign-pps", type=_positive_float, default=2.0)

    p = sub.add_parser("preprocess", help="capture + labels -> dataset directory")
    p.add_argument("--pcap", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out", required=True, help="dataset directory")
    p.add_argument("-t", type=_positive_float, default=flows.DEFAULT_T, help="window seconds")
    p.add_argument("-n", type=_positive_int, default=flows.DEFAULT_N, help="rows per sample")
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("train", help="grid-searched training on a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="directory for model.json, history.csv, "
                                                "gridsearch.json")
    p.add_argument("--lr-grid", type=_float_list, default=list(train.DEFAULT_LR_GRID))
    p.add_argument("--batch-grid", type=_int_list, default=list(train.DEFAULT_BATCH_GRID))
    p.add_argument("--max-epochs", type=_positive_int, default=1000)
    p.add_argument("--patience", type=_positive_int, default=10)
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("evaluate", help="metrics of a model on one dataset split")
    p.add_argument("--dataset", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True, help="directory for report.json / report.csv")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--format", choices=("text", "json", "csv"), default="text",
                   help="format echoed to stdout")

    p = sub.add_parser("predict", help="classify every flow window of a raw capture")
    p.add_argument("--pcap", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True, help="per-flow CSV path")
    return parser


def cmd_synth(args):
    spec = synth.SynthSpec(
        seed=_seed(args, fallback=7),
        duration=args.duration,
        benign_flows=args.benign_flows,
        attack_flows=args.attack_flows,
        attack_type=args.attack,
        benign_pps=args.benign_pps,
        attack_pps=args.attack_pps,
    )
    packets, labels = synth.generate(spec)
    os.makedirs(args.out, exist_ok=True)
    synth.write_pcap(packets, os.path.join(args.out, "capture.pcap"))
    synth.write_labels(labels, os.path.join(args.out, "labels.csv"))
    synth.write_spec(spec, os.path.join(args.out, "spec.json"))
    log.info("wrote %d packets in %d flows to %s", len(packets), len(labels), args.out)


def cmd_preprocess(args):
    seed = _seed(args)
    rules = flows.load_label_map(args.labels)
    reader = read_capture(args.pcap)
    packets = list(reader)
    log.info("%s: %d packets used, %d skipped", args.pcap, reader.packets_emitted,
             reader.packets_skipped)
    d = flows.build_dataset(packets, rules, flows.AssemblerConfig(args.t, args.n), seed)
    flows.write_dataset(d, args.out)


def cmd_train(args):
    seed = _seed(args)
    d = flows.read_dataset(args.dataset)
    base = train.TrainConfig(max_epochs=args.max_epochs, patience=args.patience, seed=seed)
    cfg, params, hist, summaries = train.grid_search(d, args.lr_grid, args.batch_grid, base)
    os.makedirs(args.out, exist_ok=True)
    nn.save_model(params, os.path.join(args.out, "model.json"))
    hist.write_csv(os.path.join(args.out, "history.csv"))
    train.write_grid_summary(cfg, summaries, os.path.join(args.out, "gridsearch.json"))
    log.info("chose lr=%g batch=%d (best epoch %d)", cfg.lr, cfg.batch_size, hist.best_epoch)


def cmd_evaluate(args):
    d = flows.read_dataset(args.dataset)
    params = nn.load_model(args.model)
    p, y, elapsed = train.evaluate_split(params, d, args.split)
    m = evaluate.compute_metrics(evaluate.confusion_matrix(nn.classify(p), y), elapsed)
    os.makedirs(args.out, exist_ok=True)
    for fmt in ("json", "csv"):
        with open(os.path.join(args.out, f"report.{fmt}"), "w") as f:
            f.write(evaluate.report(m, fmt))
    sys.stdout.write(evaluate.report(m, args.format))


def cmd_predict(args):
    params = nn.load_model(args.model)
    cfg = params.trained_with
    if cfg is None:
        raise nn.ConfigMismatch(f"{args.model} carries no preprocessing config")
    stats = flows.NormStats(np.array(cfg["norm_min"]), np.array(cfg["norm_max"]))
    raw = flows.assemble_samples(read_capture(args.pcap), flows.AssemblerConfig(cfg["t"], cfg["n"]))
    samples = flows.prepare_samples(raw, stats, int(cfg["n"]))
    if samples:
        p = nn.predict_proba(params, np.stack([s.rows for s in samples]))
    else:
        p = np.zeros(0)
    with open(args.out, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("window_start", "ip_lo", "port_lo", "ip_hi", "port_hi", "proto", "p", "label"))
        for s, prob in zip(samples, p):
            w.writerow((repr(s.window_start), *s.key, repr(float(prob)), nn.classify(float(prob))))
    log.info("classified %d flow windows, %d flagged as DDoS", len(samples),
             int(np.count_nonzero(p > 0.5)))


COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(stream=sys.stderr, level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except FlowSentryError as exc:
        log.error("%s", exc)
        return exc.exit_code
    except FileNotFoundError as exc:
        log.error("%s", exc)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
