"""Command-line entry point.

Subcommands: gen-data, train, eval, analyze, stability, export-int,
infer-int, report. Every run that writes into an output directory also
writes ``manifest.json`` (config hash, seed, library versions).
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import platform
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from . import tensor as T
from .checkpoint import (CheckpointError, atomic_write_text, load_checkpoint, load_records,
                         save_checkpoint, save_records)
from .config import ConfigError, ExperimentConfig, load_config
from .experiments import build_from_config, held_out, make_data, test_accuracy
from .graph import write_edge_list
from .intinfer import IntModel, export_int
from .quant import OffGridError
from .stability import (comparison_csv, check_step_bound, divergence, paired_trace,
                        perturbation_growth, read_report_csv)
from .training import train


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _emit(text: str, out) -> None:
    if out:
        atomic_write_text(out, text)
    else:
        sys.stdout.write(text)


def write_manifest(outdir, cfg: ExperimentConfig | None, command: str) -> None:
    info = {"command": command, "package": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__}
    if cfg is not None:
        info.update(config_sha256=cfg.digest(), seed=cfg.seed, data_seed=cfg.data_seed)
    atomic_write_text(Path(outdir) / "manifest.json", json.dumps(info, indent=2, sort_keys=True) + "\n")


def _config(args) -> ExperimentConfig:
    return load_config(args.config, args.set or ())


def _trained(args, cfg):
    data = make_data(cfg)
    net = build_from_config(cfg, data)
    load_checkpoint(args.checkpoint, net)
    return net, data


# -- subcommands -------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    data = make_data(cfg)
    if cfg.task == "graph":
        g = data.graph
        out.mkdir(parents=True, exist_ok=True)
        write_edge_list(out / "edges.txt", g.edges)
        save_records(out / "nodes.sqnt", {
            "features": g.features.astype(np.float64), "labels": g.labels.astype(np.int32),
            "train_mask": data.train_mask.astype(np.int32), "val_mask": data.val_mask.astype(np.int32),
            "test_mask": data.test_mask.astype(np.int32)})
    else:
        train_d, test_d = data
        save_records(out / "train.sqnt", {"x": train_d.x, "y": train_d.y.astype(np.int32)})
        save_records(out / "test.sqnt", {"x": test_d.x, "y": test_d.y.astype(np.int32)})
    write_manifest(out, cfg, "gen-data")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = make_data(cfg)
    net = build_from_config(cfg, data)
    train_data = data if cfg.task == "graph" else data[0]
    result = train(net, train_data, cfg.train_config())
    atomic_write_text(out / "metrics.csv", result.to_csv())
    save_checkpoint(out / "checkpoint.sqnt", net)
    atomic_write_text(out / "config.txt", cfg.to_text())
    write_manifest(out, cfg, "train")
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    net, data = _trained(args, cfg)
    _emit(_csv(["metric", "value"], [["test_acc", repr(test_accuracy(net, cfg, data))]]), args.out)
    return 0


def cmd_analyze(args) -> int:
    cfg = _config(args)
    net, data = _trained(args, cfg)
    tq, tf = paired_trace(net, held_out(cfg, data), args.bits_a)
    _emit(divergence(tq, tf).to_csv(), args.out)
    return 0


def cmd_stability(args) -> int:
    cfg = _config(args)
    net, data = _trained(args, cfg)
    hw = (cfg.image_size, cfg.image_size)
    rows = check_step_bound(net, args.lipschitz, input_hw=hw, seed=cfg.seed)
    text = _csv(["block", "kind", "h", "norm", "bound", "ok"],
                [[r["block"], r["kind"], r["h"], repr(r["norm"]), repr(r["bound"]),
                  str(r["ok"]).lower()] for r in rows])
    x0 = held_out(cfg, data)
    if cfg.task == "image":
        x0 = x0[: args.samples]
    with T.no_grad():
        trunk_in = net.entry_q(net.opening(T.Tensor(x0))).data
    rng = np.random.default_rng(cfg.seed)
    eta = rng.standard_normal(trunk_in.shape) * args.eta
    growth = perturbation_growth(net, trunk_in, eta)
    text_growth = _csv(["block", "eta_norm"], [[i, repr(v)] for i, v in enumerate(growth)])
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        atomic_write_text(out / "step_bound.csv", text)
        atomic_write_text(out / "growth.csv", text_growth)
        write_manifest(out, cfg, "stability")
    else:
        sys.stdout.write(text)
    return 0


def cmd_export_int(args) -> int:
    export_int(args.checkpoint, args.out, args.bits)
    return 0


def cmd_infer_int(args) -> int:
    model = IntModel.load(args.model)
    rec = load_records(args.inputs)
    key = "features" if model.task == "graph" else "x"
    if key not in rec:
        raise CheckpointError(f"inputs file lacks a {key!r} record")
    logits = model(rec[key].astype(np.float64))
    rows = [[i, int(np.argmax(r))] + [repr(float(v)) for v in r] for i, r in enumerate(logits)]
    header = ["index", "pred"] + [f"logit{j}" for j in range(logits.shape[1])]
    _emit(_csv(header, rows), args.out)
    return 0


def cmd_report(args) -> int:
    a = read_report_csv(Path(args.nonsym).read_text())
    b = read_report_csv(Path(args.sym).read_text())
    try:
        text = comparison_csv(a, b, names=(args.nonsym, args.sym))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    _emit(text, args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stablequant", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")

    sp = sub.add_parser("gen-data", help="write the synthetic dataset")
    with_config(sp)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_gen_data)

    sp = sub.add_parser("train", help="train and write checkpoint + metrics")
    with_config(sp)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_train)

    for name, fn, hlp in (("eval", cmd_eval, "held-out accuracy"),
                          ("analyze", cmd_analyze, "paired quantized/full-precision divergence")):
        sp = sub.add_parser(name, help=hlp)
        with_config(sp)
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--out")
        if name == "analyze":
            sp.add_argument("--bits-a", type=int, default=4)
        sp.set_defaults(fn=fn)

    sp = sub.add_parser("stability", help="step-size bound table and perturbation growth")
    with_config(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out", help="output directory (default: table to stdout)")
    sp.add_argument("--lipschitz", type=float, default=1.0)
    sp.add_argument("--eta", type=float, default=1e-3)
    sp.add_argument("--samples", type=int, default=16)
    sp.set_defaults(fn=cmd_stability)

    sp = sub.add_parser("export-int", help="convert a checkpoint to an integer model")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--bits", type=int, help="weight bit width to verify against")
    sp.set_defaults(fn=cmd_export_int)

    sp = sub.add_parser("infer-int", help="integer-path inference")
    sp.add_argument("--model", required=True)
    sp.add_argument("--inputs", required=True, help="SQNT file with an 'x' (or 'features') record")
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_infer_int)

    sp = sub.add_parser("report", help="merge two layer,mse reports into layer,nonsym,sym")
    sp.add_argument("--nonsym", required=True)
    sp.add_argument("--sym", required=True)
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, CheckpointError, OffGridError, ValueError, OSError) as exc:
        print(f"stablequant {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
