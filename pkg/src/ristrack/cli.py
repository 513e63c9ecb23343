"""Command-line entry point: ``ristrack <command> [flags]``.

Commands: scenarios, gen-data, pretrain, train-da, eval, bound.  Every
command writes its outputs and a ``manifest.json`` (argv, resolved
settings, seeds) into ``--run-dir``.  Failures print one JSON line on
stderr and exit with 2 (usage), 3 (configuration), 4 (I/O) or 5 (numeric).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

from . import __version__
from .channel import ChannelDomainError
from .config import ConfigError, ScenarioConfig
from .container import ContainerError, read_dataset, write_dataset
from .evaluation import BoundInputs, emit_report, evaluate_tracking, lemma1_bound
from .network import NetConfig, TrackingNetwork, load_network, save_network
from .optim import CheckpointError
from .protocol import CalibrationError, generate_dataset
from .scenarios import describe, desk_scale, get_scenario
from .training import METHODS, TrainConfig, TrainingError, cross_domain_train, pretrain, prepare_domains

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4, 5


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- --set / --config handling ------------------------------------------------------

def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_overrides(pairs) -> dict:
    """``["net.L=32", "train.lr=1e-3"]`` -> ``{"net": {"L": 32}, "train": {"lr": 0.001}}``."""
    out: dict = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        parts = key.strip().split(".")
        if len(parts) < 2 or parts[0] not in ("scenario", "net", "train"):
            raise ConfigError(f"--set key must start with scenario., net. or train.: {key!r}")
        node = out.setdefault(parts[0], {})
        for p in parts[1:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = _parse_value(value)
    return out


def _merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for k, v in extra.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise OSError(f"cannot read config file {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict) or set(data) - {"scenario", "net", "train"}:
        raise ConfigError("config file must be an object with scenario/net/train sections")
    return data


def _apply_dataclass(obj, changes: dict, what: str):
    fields = {f.name for f in dataclasses.fields(obj)}
    unknown = set(changes) - fields
    if unknown:
        raise ConfigError(f"unknown {what} keys: {', '.join(sorted(unknown))}")
    return dataclasses.replace(obj, **changes) if changes else obj


def _apply_scenario(sc: ScenarioConfig, changes: dict) -> ScenarioConfig:
    changes = dict(changes)
    bands = changes.pop("bands", None)
    if changes:
        d = sc.to_dict()
        unknown = set(changes) - set(d)
        if unknown:
            raise ConfigError(f"unknown scenario keys: {', '.join(sorted(unknown))}")
        d.update(changes)
        sc = ScenarioConfig.from_dict(d)
    for idx, band_changes in (bands or {}).items():
        i = int(idx)
        if not 0 <= i < sc.n_bands:
            raise ConfigError(f"no band {idx}")
        sc = sc.replace_band(i, **{k: (tuple(v) if isinstance(v, list) else v) for k, v in band_changes.items()})
    return sc


# -- commands ----------------------------------------------------------------------

def _check_input(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"input file not found: {p}")
    return p


def _cmd_scenarios(args, cfg, run_dir):
    if args.show:
        sc = get_scenario(args.show)
        print(sc.to_json())
        return {"shown": sc.name}
    rows = describe()
    for name, text in rows:
        print(f"{name}\t{text}")
    return {"presets": [r[0] for r in rows]}


def _cmd_gen_data(args, cfg, run_dir):
    sc = get_scenario(args.scenario)
    if args.scale == "desk":
        sc = desk_scale(sc)
    sc = _apply_scenario(sc, cfg.get("scenario", {}))
    domain = args.domain or ("source" if sc.name == "SRC" else "target")
    ds = generate_dataset(sc, args.periods, args.labeled_fraction, seed=args.seed, domain=domain, jobs=args.jobs)
    out = run_dir / "dataset.x2tk"
    write_dataset(ds, out)
    return {"dataset": str(out), "scenario": sc.to_dict(), "n_examples": len(ds)}


def _net_and_train(cfg, seed, method="x2track"):
    net_cfg = _apply_dataclass(NetConfig(), {k: (tuple(v) if isinstance(v, list) else v)
                                             for k, v in cfg.get("net", {}).items()}, "net")
    train_cfg = _apply_dataclass(TrainConfig(seed=seed, method=method), cfg.get("train", {}), "train")
    return net_cfg, train_cfg


def _cmd_pretrain(args, cfg, run_dir):
    ds = read_dataset(_check_input(args.data))
    net_cfg, train_cfg = _net_and_train(cfg, args.seed)
    net = TrackingNetwork.for_scenario(ds.scenario, net_cfg, seed=args.seed)
    report = pretrain(net, ds, train_cfg)
    ckpt = run_dir / "model.x2ck"
    save_network(net, ckpt, {"phase": "pretrain", "train_config": train_cfg.to_dict()})
    report.checkpoint = str(ckpt)
    report.to_csv(run_dir / "report.csv")
    report.to_json(run_dir / "report.json")
    return {"checkpoint": str(ckpt), "net_config": net_cfg.to_dict(), "train_config": train_cfg.to_dict()}


def _cmd_train_da(args, cfg, run_dir):
    src = read_dataset(_check_input(args.source))
    tgt = read_dataset(_check_input(args.target))
    net, _ = load_network(_check_input(args.init))
    _, train_cfg = _net_and_train(cfg, args.seed, args.method)
    s, t = prepare_domains(net, src, tgt, args.method)
    report = cross_domain_train(net, s, t, train_cfg)
    ckpt = run_dir / "model.x2ck"
    save_network(net, ckpt, {"phase": f"da-{args.method}", "train_config": train_cfg.to_dict()})
    report.checkpoint = str(ckpt)
    report.to_csv(run_dir / "report.csv")
    report.to_json(run_dir / "report.json")
    return {"checkpoint": str(ckpt), "train_config": train_cfg.to_dict()}


def _cmd_eval(args, cfg, run_dir):
    ds = read_dataset(_check_input(args.data))
    net, _ = load_network(_check_input(args.model))
    split = None if args.split == "all" else args.split
    res = evaluate_tracking(net, ds, split=split, bins=(args.bins, args.bins), source_head=args.source_head)
    paths = emit_report({args.name: res}, run_dir)
    print(json.dumps(res.to_dict(), sort_keys=True))
    return {"metrics": res.to_dict(), "files": [str(p) for p in paths]}


def _cmd_bound(args, cfg, run_dir):
    inputs = BoundInputs(kind=args.kind, eps_hat=args.eps_hat, pdim=args.pdim, delta=args.delta, S=args.S,
                         n=args.n, d_hat=args.d_hat, n_src_unlabeled=args.n_src, n_tgt_unlabeled=args.n_tgt,
                         lambda_star=args.lambda_star, iota=args.iota)
    value = lemma1_bound(inputs)
    print(f"{value:.6f}")
    result = {"bound": value, "inputs": dataclasses.asdict(inputs)}
    (run_dir / "bound.json").write_text(json.dumps(result, indent=2, sort_keys=True))
    return result


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ristrack", description="RIS-aided multi-band UE tracking: simulation, training, evaluation.")
    p.add_argument("--version", action="version", version=__version__)
    common = _Parser(add_help=False)
    common.add_argument("--run-dir", default=None, help="output directory (default: runs/<command>)")
    common.add_argument("--config", default=None, help="JSON file with scenario/net/train sections")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. net.L=32 or train.lr=5e-4 (repeatable)")
    common.add_argument("--threads", type=int, default=None, help="cap on BLAS threads")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("scenarios", parents=[common], help="list scenario presets")
    s.add_argument("--show", default=None, help="print one preset as JSON")

    s = sub.add_parser("gen-data", parents=[common], help="simulate a dataset")
    s.add_argument("--scenario", default="SRC")
    s.add_argument("--scale", choices=("full", "desk"), default="full")
    s.add_argument("--periods", type=int, default=1000)
    s.add_argument("--labeled-fraction", type=float, default=1.0)
    s.add_argument("--domain", choices=("source", "target"), default=None)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--jobs", type=int, default=1)

    s = sub.add_parser("pretrain", parents=[common], help="two-step pre-training on a source dataset")
    s.add_argument("--data", required=True)
    s.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("train-da", parents=[common], help="cross-domain training from a pre-trained model")
    s.add_argument("--source", required=True)
    s.add_argument("--target", required=True)
    s.add_argument("--init", required=True)
    s.add_argument("--method", choices=METHODS, default="x2track")
    s.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("eval", parents=[common], help="axial tracking errors of a model on a dataset")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", choices=("test", "train", "all"), default="test")
    s.add_argument("--bins", type=int, default=10)
    s.add_argument("--source-head", action="store_true", help="use the source-domain regressor")
    s.add_argument("--name", default="model")

    s = sub.add_parser("bound", parents=[common], help="evaluate an upper bound on the target error")
    s.add_argument("--kind", choices=("bound1", "bound2"), required=True)
    s.add_argument("--eps-hat", type=float, default=0.0)
    s.add_argument("--pdim", type=int, required=True)
    s.add_argument("--delta", type=float, required=True)
    s.add_argument("--S", type=float, required=True)
    s.add_argument("--n", type=int, default=None, help="|D^tgt| (bound2)")
    s.add_argument("--d-hat", type=float, default=0.0)
    s.add_argument("--n-src", type=int, default=None, help="unlabeled source set size (bound1)")
    s.add_argument("--n-tgt", type=int, default=None, help="unlabeled target set size (bound1)")
    s.add_argument("--lambda-star", type=float, default=0.0)
    s.add_argument("--iota", type=float, default=0.5)
    return p


COMMANDS = {"scenarios": _cmd_scenarios, "gen-data": _cmd_gen_data, "pretrain": _cmd_pretrain,
            "train-da": _cmd_train_da, "eval": _cmd_eval, "bound": _cmd_bound}


def _fail(code: int, kind: str, exc) -> int:
    print(json.dumps({"error": kind, "code": code, "message": str(exc)}), file=sys.stderr)
    return code


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail(EXIT_USAGE, "usage", exc)
    try:
        cfg = _merge(_load_config_file(args.config), parse_overrides(args.set))
        _net_and_train(cfg, getattr(args, "seed", 0))  # reject unknown net/train keys for every command
        if getattr(args, "jobs", 1) < 1 or (args.threads is not None and args.threads < 1):
            raise ConfigError("--jobs and --threads must be >= 1")
        run_dir = Path(args.run_dir or Path("runs") / args.command)
        run_dir.mkdir(parents=True, exist_ok=True)
        limiter = None
        if args.threads is not None:
            from threadpoolctl import threadpool_limits
            limiter = threadpool_limits(limits=args.threads)
        started = time.time()
        try:
            result = COMMANDS[args.command](args, cfg, run_dir)
        finally:
            if limiter is not None:
                limiter.restore_original_limits()
        manifest = {
            "command": args.command,
            "argv": argv,
            "args": {k: v for k, v in vars(args).items()},
            "config": cfg,
            "seed": getattr(args, "seed", None),
            "version": __version__,
            "seconds": round(time.time() - started, 3),
            "result": result,
        }
        (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str))
        return EXIT_OK
    except (ConfigError, KeyError, TypeError) as exc:
        return _fail(EXIT_CONFIG, "config", exc)
    except (ContainerError, CheckpointError, OSError) as exc:
        return _fail(EXIT_IO, "io", exc)
    except (TrainingError, CalibrationError, ChannelDomainError, FloatingPointError, ArithmeticError) as exc:
        return _fail(EXIT_NUMERIC, "numeric", exc)


def replay(manifest_path) -> int:
    """Re-run the command recorded in a run manifest."""
    manifest = json.loads(Path(manifest_path).read_text())
    return run(manifest["argv"])


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
