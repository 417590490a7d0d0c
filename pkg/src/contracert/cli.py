"""``contracert`` command line: train, verify, simulate, export-field.

Exit codes: 0 success/verified, 2 unverified, 3 divergence, 64 config or
usage error, 65 malformed model.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import jsonschema
import numpy as np
import torch

from .interval import IntervalVector, symmetric_box
from .modelio import (
    ModelFormatError,
    dumps,
    load_model,
    load_schema,
    save_certificate,
    save_model,
    write_csv,
)
from .nn import Activation, ZeroAnchoredBoundedController, controller_eval, forward
from .plant import DivergenceError, make_plant, simulate
from .trainer import Parametrization, TrainConfig, TrainState, init_problem, train
from .verifier import adaptive_verify, verify_domain

EXIT_OK = 0
EXIT_UNVERIFIED = 2
EXIT_DIVERGED = 3
EXIT_CONFIG = 64
EXIT_MODEL = 65

log = logging.getLogger("contracert")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


class ConfigError(ValueError):
    pass


def load_config(path) -> dict:
    try:
        cfg = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    validator = jsonschema.Draft202012Validator(load_schema("config"))
    errors = sorted(validator.iter_errors(cfg), key=lambda e: list(e.absolute_path))
    if errors:
        lines = [f"  {'/'.join(map(str, e.absolute_path)) or '<root>'}: {e.message}" for e in errors]
        raise ConfigError("config failed schema validation:\n" + "\n".join(lines))
    return cfg


def config_objects(cfg: dict):
    """Build the initial problem and :class:`TrainConfig` from a validated config."""
    tr = dict(cfg.get("training", {}))
    if "CONTRACERT_SEED" in os.environ:
        tr["seed"] = int(os.environ["CONTRACERT_SEED"])
    try:
        tconf = TrainConfig(**tr)
        plant = make_plant(cfg["plant"]["name"], cfg["plant"].get("params"))
        cc, mc = cfg.get("controller", {}), cfg.get("metric", {})
        scale = cc.get("output_scale")
        if scale is None:
            if not hasattr(plant, "input_bound"):
                raise ValueError("controller.output_scale is required for this plant")
            scale = plant.input_bound
        if len(tconf.start_half_widths) != plant.n:
            raise ValueError(f"start_half_widths has {len(tconf.start_half_widths)} entries, plant has {plant.n} states")
        prob = init_problem(
            plant,
            cc.get("hidden", [16, 16]),
            mc.get("hidden", [32, 32]),
            mc.get("epsilon", 0.1),
            scale,
            tconf.seed,
            Activation.from_dict(cc.get("activation", "softplus")),
            Activation.from_dict(mc.get("activation", "softplus")),
        )
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e
    return prob, tconf


def _parse_domain(args, n: int) -> IntervalVector:
    if args.half_widths:
        if len(args.half_widths) != n:
            raise ConfigError(f"--half-widths needs {n} values")
        return symmetric_box(args.half_widths)
    if not args.domain:
        raise ConfigError("give the domain with --domain LO..HI per axis or --half-widths")
    if len(args.domain) != n:
        raise ConfigError(f"--domain given {len(args.domain)} times, model state has dimension {n}")
    lo, hi = [], []
    for item in args.domain:
        try:
            a, b = item.split("..")
            lo.append(float(a))
            hi.append(float(b))
        except ValueError as e:
            raise ConfigError(f"bad --domain value {item!r}; expected LO..HI") from e
    try:
        return IntervalVector(lo, hi)
    except ValueError as e:
        raise ConfigError(str(e)) from e


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    prob, tconf = config_objects(cfg)
    if args.max_epochs is not None:
        tconf.max_epochs = args.max_epochs
    out = Path(args.out or cfg.get("output", {}).get("dir", "run"))
    ckpt = out / "checkpoints"
    ckpt.mkdir(parents=True, exist_ok=True)

    state = None
    if args.resume:
        try:
            state = TrainState.from_dict(json.loads(Path(args.resume).read_text()))
        except (OSError, KeyError, ValueError) as e:
            raise ConfigError(f"cannot resume from {args.resume}: {e}") from e
        log.info("resuming at epoch %d", state.epoch)

    def on_certified(ms, current):
        tag = f"epoch{ms.epoch:06d}"
        save_model(current, ckpt / f"model_{tag}.json")
        save_certificate(ms.certificate, ckpt / f"certificate_{tag}.json", current)
        (ckpt / f"lambda_{tag}.json").write_text(dumps([float(v) for v in ms.lambda_max]))

    result = train(prob, tconf, state=state, on_certified=on_certified, until=args.stop_at)
    log_path = out / "train_log.csv"
    mode = "a" if args.resume and log_path.exists() else "w"
    n = prob.n
    header = ["epoch", "loss", "r", *[f"half_width_{k + 1}" for k in range(n)], "wall_time"]
    rows = [[r["epoch"], r["loss"], r["r"], *r["half_widths"], r["wall_time"]] for r in result.log]
    write_csv(log_path, header, rows, append=(mode == "a"))
    (out / "state.json").write_text(dumps(result.state.to_dict()))
    save_model(result.problem, out / "model_final.json")
    if result.milestones:
        last = result.milestones[-1]
        best = Parametrization(prob).build(last.theta)
        save_model(best, out / "model.json")
        save_certificate(last.certificate, out / "certificate.json", best)
        print(f"certified half-widths {list(last.half_widths)} at r={last.r} (epoch {last.epoch})")
        return EXIT_OK
    if result.state.certified:
        print(f"no new domain certified this run; largest so far {list(result.state.certified[-1])}")
        return EXIT_OK
    print("start box was not certified")
    return EXIT_UNVERIFIED


def _load(path):
    try:
        return load_model(path)
    except OSError as e:
        raise ModelFormatError(f"cannot read model {path}: {e}") from e


def cmd_verify(args) -> int:
    prob = _load(args.model)
    prob.rate = args.rate if args.rate is not None else prob.rate
    prob.margin = args.margin
    domain = _parse_domain(args, prob.n)
    if args.adaptive:
        cert = adaptive_verify(prob, domain, args.max_depth)
    else:
        cert = verify_domain(prob, domain, args.r)
    if args.out:
        save_certificate(cert, args.out, prob)
    bad = len(cert.unverified())
    print(
        f"{'VERIFIED' if cert.all_verified else 'NOT VERIFIED'}: {len(cert.cells) - bad}/{len(cert.cells)} cells, "
        f"max lambda_max {cert.max_lambda:.6g}"
    )
    return EXIT_OK if cert.all_verified else EXIT_UNVERIFIED


def _policy(prob):
    ctrl = prob.controller
    if ctrl is None:
        return lambda x: np.zeros((*np.shape(x)[:-1], prob.plant.m))
    if isinstance(ctrl, ZeroAnchoredBoundedController):
        return lambda x: controller_eval(ctrl, x)
    return lambda x: forward(ctrl, x)


def cmd_simulate(args) -> int:
    prob = _load(args.model)
    x0 = np.asarray(args.x0, dtype=np.float64)
    if x0.shape != (prob.n,):
        raise ConfigError(f"--x0 needs {prob.n} values")
    try:
        traj = simulate(prob.plant, prob.controller, x0, args.T, args.dt)
    except DivergenceError as e:
        print(f"trajectory diverged at t={e.time:g}", file=sys.stderr)
        return EXIT_DIVERGED
    n, m = prob.n, prob.plant.m
    header = ["t", *[f"x{k + 1}" for k in range(n)], *[f"u{k + 1}" for k in range(m)]]
    rows = np.column_stack([traj.t, traj.x, traj.u])
    write_csv(args.out, header, rows.tolist())
    return EXIT_OK


def field_rows(prob, domain: IntervalVector, K: int) -> np.ndarray:
    """Closed-loop vector field on a K x K grid: columns x1, x2, dx1, dx2, u1..um."""
    lo, hi = domain.numpy()
    if prob.n != 2:
        raise ConfigError("export-field supports planar systems only")
    g1 = np.linspace(lo[0], hi[0], K)
    g2 = np.linspace(lo[1], hi[1], K)
    X = np.array([(a, b) for a in g1 for b in g2])
    U = np.asarray(_policy(prob)(X), dtype=np.float64).reshape(len(X), -1)
    dX = prob.plant.f(X) + U @ prob.plant.B.T
    return np.column_stack([X, dX, U])


def cmd_export_field(args) -> int:
    prob = _load(args.model)
    if args.grid < 1:
        raise ConfigError("--grid must be positive")
    domain = _parse_domain(args, prob.n)
    rows = field_rows(prob, domain, args.grid)
    m = prob.plant.m
    header = ["x1", "x2", "dx1", "dx2", *([f"u{k + 1}" for k in range(m)] if m > 1 else ["u"])]
    write_csv(args.out, header, rows.tolist())
    return EXIT_OK


def _add_domain(p):
    p.add_argument("--domain", action="append", metavar="LO..HI", help="interval per axis, repeat for each axis")
    p.add_argument("--half-widths", type=float, nargs="+", metavar="H", help="symmetric domain [-H, H] per axis")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="contracert", description=__doc__.splitlines()[0])
    parser.add_argument("--threads", type=int, default=None, help="torch intra-op threads")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train controller and metric to a certificate")
    p.add_argument("config")
    p.add_argument("--resume", metavar="STATE", help="state.json from a previous run")
    p.add_argument("--out", help="output directory (overrides config output.dir)")
    p.add_argument("--max-epochs", type=int, default=None)
    p.add_argument("--stop-at", type=float, nargs="+", metavar="H", help="stop once these half-widths are certified")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("verify", help="verify contraction of a model over a domain")
    p.add_argument("model")
    _add_domain(p)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--r", type=int, default=1, help="uniform grid cells per axis")
    g.add_argument("--adaptive", action="store_true", help="bisect unverified cells")
    p.add_argument("--max-depth", type=int, default=4)
    p.add_argument("--rate", type=float, default=None)
    p.add_argument("--margin", type=float, default=0.0)
    p.add_argument("--out", help="certificate JSON path")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("simulate", help="simulate the closed loop with RK4")
    p.add_argument("model")
    p.add_argument("--x0", type=float, nargs="+", required=True)
    p.add_argument("--T", type=float, default=10.0)
    p.add_argument("--dt", type=float, default=1e-2)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("export-field", help="closed-loop vector field on a grid")
    p.add_argument("model")
    _add_domain(p)
    p.add_argument("--grid", type=int, default=21)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_field)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.threads:
        torch.set_num_threads(args.threads)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except ModelFormatError as e:
        print(f"model error: {e}", file=sys.stderr)
        return EXIT_MODEL


if __name__ == "__main__":
    sys.exit(main())
