"""Command-line entry point: ``parznet <subcommand> ...``.

Exit codes: 0 success, 1 usage/config error, 2 data/parse error,
3 numerical-check failure. ``PARZNET_THREADS`` limits BLAS threads.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import os
import platform
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__, gradcheck, parzen
from .config import ConfigError, dump_config, load_config
from .data import FrameDataset, PfdError, pcm_frames, read_pfd, synth_generate, write_pfd
from .model import CheckpointError, build, load_checkpoint, shift_stability
from .quadrature import InvalidOrderError, hermite_rule
from .trainer import Trainer, fmt
from .variational import (
    ScaleMixturePrior,
    kl_lsu_gh,
    kl_lsu_mc,
    kl_sm_gh,
    kl_sm_mc,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
log = logging.getLogger("parznet")


class UsageError(Exception):
    pass


class ArgParser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _floats(text):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"expected a comma-separated list of numbers, got {text!r}") from None


def _ints(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"expected a comma-separated list of integers, got {text!r}") from None


def _open_out(path):
    if path is None or path == "-":
        return sys.stdout, False
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    return open(path, "w", newline=""), True


def _write_rows(path, header, rows):
    """Write a CSV to ``path`` (stdout for None or '-')."""
    fh, close = _open_out(path)
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(v) if isinstance(v, (float, np.floating)) else v for v in r])
    finally:
        if close:
            fh.close()


def write_manifest(out_dir, argv, seed=None, config_hash=None, outputs=()):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    meta = {"command": ["parznet", *argv], "seed": seed, "config_hash": config_hash,
            "versions": {"parznet": __version__, "numpy": np.__version__, "python": platform.python_version()},
            "outputs": [str(o) for o in outputs]}
    (out_dir / "manifest.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def write_sidecar(out, argv, seed=None):
    """Manifest for a single-file output, stored next to it as ``<out>.manifest.json``."""
    if out is None or out == "-":
        return
    out = Path(out)
    meta = {"command": ["parznet", *argv], "seed": seed, "config_hash": None,
            "versions": {"parznet": __version__, "numpy": np.__version__, "python": platform.python_version()},
            "outputs": [str(out)]}
    out.with_name(out.name + ".manifest.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


# -- subcommands ---------------------------------------------------------------

def cmd_quadrature(args, argv):
    rule = hermite_rule(args.order)
    _write_rows(args.out, ["index", "node", "weight"],
                [(i, float(u), float(w)) for i, (u, w) in enumerate(zip(rule.nodes, rule.weights))])
    write_sidecar(args.out, argv, None)
    return EXIT_OK


def cmd_kl_table(args, argv):
    orders = _ints(args.orders)
    alphas = _floats(args.alphas)
    mus = _floats(args.mus) if args.mus else [1.0]
    if any(a <= 0 for a in alphas):
        raise UsageError("alphas must be positive")
    prior = ScaleMixturePrior(args.lam, args.xi, args.eta1, args.eta2) if args.prior == "sm" else None
    rows = []
    for mu in mus:
        for a in alphas:
            la = math.log(a)
            if prior is None:
                mc, se = kl_lsu_mc(la, args.mc_samples, args.seed)
            else:
                mc, se = kl_sm_mc(mu, la, prior, args.mc_samples, args.seed)
            for s in orders:
                rule = hermite_rule(s)
                gh = float(kl_lsu_gh(la, rule) if prior is None else kl_sm_gh(mu, la, prior, rule))
                rows.append((a, mu, s, gh, mc, se, abs(gh - mc)))
    _write_rows(args.out, ["alpha", "mu", "order", "gh_value", "mc_value", "mc_stderr", "abs_diff"], rows)
    write_sidecar(args.out, argv, args.seed)
    return EXIT_OK


def cmd_filters(args, argv):
    bank = parzen.mel_init(args.count, fs=args.sample_rate, n_taps=args.n_taps)
    if args.taps is not None:
        if not 0 <= args.taps < len(bank):
            raise UsageError(f"filter index must be in [0, {len(bank)})")
        taps = parzen.discretize(bank[args.taps], bank.sample_rate, bank.tap_count)
        t = parzen.tap_times(bank.sample_rate, bank.tap_count)
        _write_rows(args.out, ["index", "time_s", "tap"], [(i, float(ti), float(v)) for i, (ti, v) in enumerate(zip(t, taps))])
        write_sidecar(args.out, argv, None)
        return EXIT_OK
    rows = []
    for i, taps in enumerate(bank.taps()):
        _, peak = parzen.freq_response(taps, args.n_fft, bank.sample_rate)
        rows.append((i, float(bank.eta[i]), float(bank.gamma[i]), 2000.0 / math.sqrt(bank.gamma[i]), peak))
    _write_rows(args.out, ["index", "eta_hz", "gamma", "support_ms", "peak_hz"], rows)
    write_sidecar(args.out, argv, None)
    return EXIT_OK


def cmd_pcm_import(args, argv):
    labels, frames = [], []
    for item in args.input:
        path, sep, lab = item.rpartition(":")
        if not sep:
            raise UsageError(f"--input expects PATH:LABEL, got {item!r}")
        try:
            label = int(lab)
        except ValueError:
            raise UsageError(f"bad label in {item!r}") from None
        if not 0 <= label < args.classes:
            raise UsageError(f"label {label} outside [0, {args.classes})")
        f = pcm_frames(path, args.frame_len, args.hop)
        frames.append(f)
        labels.append(np.full(len(f), label))
    ds = FrameDataset(args.frame_len, args.classes, np.concatenate(labels), np.concatenate(frames))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_pfd(ds, args.out)
    write_sidecar(args.out, argv)
    print(f"records {len(ds)}")
    return EXIT_OK


def cmd_synth_data(args, argv):
    cfg = _load_run_config(args.spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    splits = synth_generate(cfg.data)
    paths = []
    for name, ds in zip(("train", "val", "test"), splits):
        p = out / f"{name}.pfd"
        write_pfd(ds, p)
        paths.append(p)
    write_manifest(out, argv, cfg.data.seed, cfg.digest(), paths)
    return EXIT_OK


def _load_run_config(path):
    if path is None:
        return load_config(resources.files("parznet") / "configs" / "desk.ini")
    return load_config(path)


def cmd_train(args, argv):
    cfg = _load_run_config(args.config)
    if args.deterministic:
        cfg.model.variational = False
    if args.static_filters:
        cfg.trainer.static_filters = True
    if args.max_epochs is not None:
        cfg.trainer.max_epochs = args.max_epochs
    data = Path(args.data)
    train, val = read_pfd(data / "train.pfd"), read_pfd(data / "val.pfd")
    model = build(cfg.model, cfg.trainer.seed, cfg.prior.prior_kind, cfg.prior.mixture)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(dump_config(cfg))
    report = Trainer(model, cfg.trainer).fit(train, val, out)
    val_acc = 1.0 - report.best_val_err
    (out / "summary.json").write_text(json.dumps(
        {"best_val_err": report.best_val_err, "val_accuracy": val_acc, "epochs": len(report.epochs),
         "stop_reason": report.stop_reason}, indent=2) + "\n")
    write_manifest(out, argv, cfg.trainer.seed, cfg.digest(),
                   [report.checkpoint, out / "report.csv", out / "steps.csv", out / "summary.json",
                    out / "config.ini"])
    print(f"val_accuracy {fmt(val_acc)}")
    return EXIT_OK


def cmd_eval(args, argv):
    model, _ = load_checkpoint(args.checkpoint)
    ds = read_pfd(args.data)
    if ds.frame_len != model.cfg.input_len or ds.class_count != model.cfg.class_count:
        raise PfdError("dataset does not match the checkpoint's frame length / class count", 0)
    pred = model.predict(ds.frames).argmax(axis=1)
    k = ds.class_count
    conf = np.zeros((k, k), dtype=np.int64)
    np.add.at(conf, (ds.labels, pred), 1)
    acc = float(np.mean(pred == ds.labels)) if len(ds) else float("nan")
    rows = [("accuracy", "", fmt(acc))]
    rows += [(f"confusion[{i}]", j, int(conf[i, j])) for i in range(k) for j in range(k)]
    _write_rows(args.out, ["metric", "predicted", "value"], rows)
    write_sidecar(args.out, argv, None)
    return EXIT_OK


def cmd_gradcheck(args, argv):
    checks = gradcheck.run(args.scope, args.seed)
    _write_rows(args.out, ["scope", "check", "max_rel_err", "tol", "ok"],
                [(c.scope, c.name, c.max_rel_err, c.tol, int(c.ok)) for c in checks])
    write_sidecar(args.out, argv, args.seed)
    return EXIT_OK if all(c.ok for c in checks) else EXIT_NUMERIC


def cmd_stability(args, argv):
    model, _ = load_checkpoint(args.checkpoint)
    ds = read_pfd(args.data)
    rows = shift_stability(model, ds.frames, args.max_shift)
    _write_rows(args.out, ["shift", "mean_rel_change", "max_rel_change", "argmax_stable"],
                [(r["shift"], r["mean_rel_change"], r["max_rel_change"], r["argmax_stable"]) for r in rows])
    write_sidecar(args.out, argv, None)
    return EXIT_OK


def make_parser():
    p = ArgParser(prog="parznet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=ArgParser)

    q = sub.add_parser("quadrature", help="print Gauss-Hermite nodes and weights")
    q.add_argument("--order", type=int, required=True)
    q.add_argument("--out")
    q.set_defaults(func=cmd_quadrature)

    k = sub.add_parser("kl-table", help="compare quadrature KL values with a Monte-Carlo oracle")
    k.add_argument("--prior", choices=("lsu", "sm"), required=True)
    k.add_argument("--orders", default="4,8,16,32,64")
    k.add_argument("--alphas", required=True)
    k.add_argument("--mus")
    k.add_argument("--lambda", dest="lam", type=float, default=0.25)
    k.add_argument("--eta1", type=float, default=0.0005)
    k.add_argument("--eta2", type=float, default=1.0)
    k.add_argument("--xi", type=float, default=0.0)
    k.add_argument("--mc-samples", type=int, default=1_000_000)
    k.add_argument("--seed", type=int, default=0)
    k.add_argument("--out")
    k.set_defaults(func=cmd_kl_table)

    f = sub.add_parser("filters", help="inspect the mel-initialized Parzen filter bank")
    f.add_argument("--init", choices=("mel",), default="mel")
    f.add_argument("--count", type=int, default=40)
    f.add_argument("--taps", type=int, help="export the taps of one filter instead of the bank table")
    f.add_argument("--sample-rate", type=float, default=parzen.DEFAULT_FS)
    f.add_argument("--n-taps", type=int, default=parzen.DEFAULT_TAPS)
    f.add_argument("--n-fft", type=int, default=8192)
    f.add_argument("--out", "--export", dest="out")
    f.set_defaults(func=cmd_filters)

    s = sub.add_parser("synth-data", help="generate the synthetic frame-classification task")
    s.add_argument("--spec", help="config file whose [data] section describes the task (default: bundled desk.ini)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth_data)

    pc = sub.add_parser("pcm-import", help="convert headerless 16-bit PCM files into a .pfd dataset")
    pc.add_argument("--input", action="append", required=True, metavar="PATH:LABEL")
    pc.add_argument("--classes", type=int, required=True)
    pc.add_argument("--frame-len", type=int, default=3200)
    pc.add_argument("--hop", type=int, help="frame hop in samples (default: frame length)")
    pc.add_argument("--out", required=True)
    pc.set_defaults(func=cmd_pcm_import)

    t = sub.add_parser("train", help="fit a model")
    t.add_argument("--config", help="run config (default: bundled desk.ini)")
    t.add_argument("--data", required=True, help="directory holding train.pfd and val.pfd")
    t.add_argument("--out", required=True)
    t.add_argument("--deterministic", action="store_true")
    t.add_argument("--static-filters", action="store_true")
    t.add_argument("--max-epochs", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="mean-mode accuracy and confusion matrix")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    g.add_argument("--scope", choices=("layers", "model", "kl", "filters", "all"), default="all")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out")
    g.set_defaults(func=cmd_gradcheck)

    st = sub.add_parser("stability", help="argmax stability under circular shifts")
    st.add_argument("--checkpoint", required=True)
    st.add_argument("--data", required=True)
    st.add_argument("--max-shift", type=int, default=3)
    st.add_argument("--out")
    st.set_defaults(func=cmd_stability)
    return p


def _limit_threads():
    n = os.environ.get("PARZNET_THREADS")
    if not n:
        return None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(int(n))


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = make_parser().parse_args(argv)
    except UsageError as exc:
        print(f"parznet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    _limit_threads()
    try:
        return args.func(args, argv)
    except (UsageError, ConfigError, InvalidOrderError, parzen.FilterConfigError) as exc:
        print(f"parznet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (PfdError, CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"parznet: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ArithmeticError, RuntimeError) as exc:
        print(f"parznet: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
