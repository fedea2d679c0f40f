"""Command line entry point: ``ratelab <subcommand> [options]``.

Every subcommand writes ``manifest.json`` into ``--out`` listing the resolved
config, seeds, and a sha256 for each file it produced. File formats:

  checkpoint     JSON: obs_dim, act_dim, obs_scale, layers[{rows, cols, weights,
                 bias, activation}], log_std, metadata
  reward curve   CSV: episode,cumulative_reward,steps
  flight log     CSV: t,sp_r,sp_p,sp_y,gy_r,gy_p,gy_y,y0..y3,u0..u3,thr
  weights        little-endian: header b"RLW1", version, obs_dim, act_dim (uint32),
                 then per layer rows, cols (uint32) and row-major float32 W, b
  reports        JSON

Errors are printed as one line ``ratelab: error: <message>`` on stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from importlib import metadata

from . import codegen
from .config import Config, ConfigError, config_from_dict, load_config
from .control import PidGains, zn_tune_all
from .env import sample_task
from .evaluation import (
    FlightLog,
    SetpointLog,
    aerobatic_script,
    bench_inference,
    compare,
    pid_callable,
    replay,
)
from .policy import CheckpointError, act_deterministic, forward_mean, params_from_checkpoint
from .trainer import learning_progress, select_best, train, write_curve_csv

log = logging.getLogger("ratelab")


class CliError(Exception):
    pass


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


class RunManifest:
    """Collects produced files and writes manifest.json next to them."""

    def __init__(self, command: str, argv: list[str], config: Config, out: str, seeds=()):
        self.command = command
        self.argv = list(argv)
        self.config = config
        self.out = out
        self.seeds = list(seeds)
        self.files: dict[str, str] = {}
        self.extra: dict = {}
        self.started = time.strftime("%Y-%m-%dT%H:%M:%S%z")

    def add(self, path):
        rel = os.path.relpath(path, self.out)
        self.files[rel] = sha256_file(path)

    def write(self) -> str:
        path = os.path.join(self.out, "manifest.json")
        d = {
            "tool": "ratelab",
            "version": _version(),
            "command": self.command,
            "argv": self.argv,
            "seeds": self.seeds,
            "config": self.config.to_dict(),
            "files": dict(sorted(self.files.items())),
            "started": self.started,
            "finished": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
            **self.extra,
        }
        with open(path, "w") as fh:
            json.dump(d, fh, indent=2)
            fh.write("\n")
        return path


# ------------------------------------------------------------------ helpers


def _resolve_config(args) -> Config:
    if args.config is None:
        return Config()
    cfg_path = args.config
    with open(cfg_path) as fh:
        text = fh.read()
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(cfg_path, exc.lineno, exc.msg) from None
    # a manifest can be fed back in: its embedded config is used
    if isinstance(d, dict) and "config" in d and "files" in d:
        return config_from_dict(d["config"], cfg_path, text)
    return load_config(cfg_path)


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")


def _load_checkpoint(path):
    try:
        ck = codegen.load_checkpoint(path)
        params, _ = params_from_checkpoint(ck)
    except (OSError, json.JSONDecodeError, CheckpointError) as exc:
        raise CliError(f"cannot load checkpoint {path}: {exc}") from None
    return ck, params


def _load_gains(path) -> PidGains:
    with open(path) as fh:
        d = json.load(fh)
    if "gains" in d:
        d = d["gains"]
    return PidGains.from_dict(d)


def _pid_gains(cfg: Config, args) -> PidGains:
    if getattr(args, "gains", None):
        return _load_gains(args.gains)
    gains = cfg.pid.resolved_gains()
    if gains is not None:
        return gains
    log.info("no PID gains configured; running Ziegler-Nichols tuning")
    gains, _ = zn_tune_all(cfg.airframe, steps_per_octave=cfg.pid.zn_steps_per_octave,
                           amplitude=cfg.pid.zn_amplitude, throttle=cfg.pid.zn_throttle)
    return gains


def _setpoints(cfg: Config, args) -> SetpointLog:
    dt = cfg.airframe.dt
    if getattr(args, "log", None):
        return SetpointLog.from_flight_log(FlightLog.read_csv(args.log))
    script = getattr(args, "script", None) or cfg.eval.script
    if script == "aerobatic":
        return aerobatic_script(dt, cfg.eval.script_throttle)
    if script == "validation":
        env = dataclasses.replace(cfg.env, episode_time=cfg.eval.validation_time)
        return SetpointLog.from_task(sample_task(cfg.eval.validation_seed, env), dt, 0.0)
    raise CliError(f"unknown script {script!r} (expected aerobatic or validation)")


# -------------------------------------------------------------- subcommands


def cmd_config(args, cfg: Config, argv) -> int:
    sys.stdout.write((Config() if args.dump_defaults else cfg).dumps())
    if args.out is not None:
        RunManifest("config", argv, cfg, args.out, [args.seed]).write()
    return 0


def cmd_train(args, cfg: Config, argv) -> int:
    ppo = cfg.ppo
    if args.steps is not None:
        ppo = dataclasses.replace(ppo, total_steps=args.steps)
    if args.n_seeds is not None:
        ppo = dataclasses.replace(ppo, n_seeds=args.n_seeds)
    cfg = dataclasses.replace(cfg, ppo=ppo)
    seeds = [args.seed + i for i in range(ppo.n_seeds)]
    man = RunManifest("train", argv, cfg, args.out, seeds)
    runs = []
    for s in seeds:
        log.info("training seed %d for %d steps", s, ppo.total_steps)
        res = train(s, cfg.env, ppo, cfg.airframe)
        runs.append(res)
        curve_path = os.path.join(args.out, f"rewards_seed{s}.csv")
        write_curve_csv(curve_path, res.curve)
        man.add(curve_path)
        ck_path = os.path.join(args.out, f"checkpoint_seed{s}.json")
        _write_json(ck_path, res.checkpoint(cfg.env))
        man.add(ck_path)
    best = select_best(runs, ppo.final_window)
    best_path = os.path.join(args.out, "checkpoint.json")
    _write_json(best_path, best.checkpoint(cfg.env, {"selected_from": seeds}))
    man.add(best_path)
    summary = {
        "selected_seed": best.seed,
        "runs": [{"seed": r.seed, "episodes": len(r.curve),
                  "final_window_mean": r.final_window_mean(ppo.final_window),
                  **learning_progress(r.curve)} for r in runs],
    }
    man.extra["summary"] = summary
    man.write()
    for r in summary["runs"]:
        print(f"seed {r['seed']}: episodes={r['episodes']} "
              f"final_window_mean={r['final_window_mean']:.4g} improvement={r['improvement']:.3f}")
    print(f"selected seed {best.seed} -> {best_path}")
    return 0


def cmd_tune_pid(args, cfg: Config, argv) -> int:
    man = RunManifest("tune-pid", argv, cfg, args.out, [args.seed])
    gains, results = zn_tune_all(cfg.airframe, steps_per_octave=cfg.pid.zn_steps_per_octave,
                                 amplitude=cfg.pid.zn_amplitude, throttle=cfg.pid.zn_throttle)
    print(f"{'axis':<6}{'K_u':>12}{'T_u [s]':>12}{'Kp':>12}{'Ki':>12}{'Kd':>12}")
    for r in results:
        kp, ki, kd = r.gains
        print(f"{r.axis:<6}{r.k_u:12.5g}{r.t_u:12.5g}{kp:12.5g}{ki:12.5g}{kd:12.5g}")
    path = os.path.join(args.out, "pid_gains.json")
    _write_json(path, {
        "gains": gains.to_dict(),
        "ultimate": [{"axis": r.axis, "k_u": r.k_u, "t_u": r.t_u,
                      "ratio_at_k_u": r.ratio_at_k_u} for r in results],
    })
    man.add(path)
    man.write()
    return 0


def cmd_export(args, cfg: Config, argv) -> int:
    ck, _ = _load_checkpoint(args.checkpoint)
    man = RunManifest("export", argv, cfg, args.out, [args.seed])
    frozen = codegen.freeze(ck)
    graph = codegen.optimize(frozen)
    report = {"checkpoint_sha256": sha256_file(args.checkpoint),
              "frozen_hash": frozen.hash, "optimized_hash": graph.hash,
              "frozen_nodes": len(frozen.nodes), "optimized_nodes": len(graph.nodes)}
    src_path = args.emit_source or os.path.join(args.out, "nn_eval.c")
    source = codegen.emit_source(graph, args.symbol)
    with open(src_path, "w") as fh:
        fh.write(source)
    if _inside(src_path, args.out):
        man.add(src_path)
    report["source"] = _display_path(src_path, args.out)
    report["weight_constants"] = codegen.count_weight_constants(source)
    if args.emit_weights:
        with open(args.emit_weights, "wb") as fh:
            fh.write(codegen.emit_weights(graph))
        report["weights"] = _display_path(args.emit_weights, args.out)
        if _inside(args.emit_weights, args.out):
            man.add(args.emit_weights)
    ok = True
    if args.verify:
        n = args.verify
        rep = codegen.verify_equivalence(graph, ck, n=n, seed=args.seed)
        report["verify_model"] = rep.to_dict()
        ok = rep.passed
        if codegen.find_compiler() is not None:
            art = codegen.compile_source(source, args.symbol, graph.input_dim, graph.output_dim)
            crep = codegen.verify_equivalence(graph, ck, n=n, seed=args.seed, evaluator=art)
            report["verify_compiled"] = crep.to_dict()
            ok = ok and crep.passed
        else:
            report["verify_compiled"] = {"skipped": "no C compiler found"}
    rpath = os.path.join(args.out, "export_report.json")
    _write_json(rpath, report)
    man.add(rpath)
    man.extra["export"] = {"source": report["source"], "weights": report.get("weights")}
    man.write()
    if args.verify:
        status = "pass" if ok else "FAIL"
        print(f"verify {status}: model max_abs_error={report['verify_model']['max_abs_error']:.3g}"
              + (f" compiled max_abs_error={report['verify_compiled']['max_abs_error']:.3g}"
                 if "max_abs_error" in report["verify_compiled"] else ""))
    print(f"wrote {src_path}")
    if not ok:
        raise CliError("exported artifact does not match the checkpoint within tolerance")
    return 0


def _inside(path, root) -> bool:
    return os.path.abspath(path).startswith(os.path.abspath(root) + os.sep)


def _display_path(path, root) -> str:
    """Relative to the output directory when inside it, so reports do not depend on where runs live."""
    return os.path.relpath(path, root) if _inside(path, root) else path


def _controller(cfg, args):
    if args.checkpoint:
        return _load_checkpoint(args.checkpoint)[1]
    return _pid_gains(cfg, args)


def cmd_replay(args, cfg: Config, argv) -> int:
    man = RunManifest("replay", argv, cfg, args.out, [args.seed])
    sp = _setpoints(cfg, args)
    ctrl = _controller(cfg, args)
    flight, report = replay(sp, ctrl, cfg.airframe, noise_sigma=cfg.eval.noise_sigma,
                            seed=args.seed)
    lpath = os.path.join(args.out, "flight_log.csv")
    flight.write_csv(lpath)
    man.add(lpath)
    rpath = os.path.join(args.out, "metrics.json")
    _write_json(rpath, {"status": flight.status, **report.to_dict()})
    man.add(rpath)
    man.write()
    _print_report("replay", report)
    return 0


def _print_report(label, report):
    print(f"[{label}] n={report.n}")
    for axis, m in list(report.per_axis.items()) + [("avg", report.average)]:
        print(f"  {axis:<6}" + " ".join(f"{k}={v:.4g}" for k, v in m.items()))


def cmd_compare(args, cfg: Config, argv) -> int:
    if not args.checkpoint:
        raise CliError("compare needs --checkpoint")
    man = RunManifest("compare", argv, cfg, args.out, [args.seed])
    sp = _setpoints(cfg, args)
    _, params = _load_checkpoint(args.checkpoint)
    gains = _pid_gains(cfg, args)
    cmp = compare(params, gains, sp, cfg.airframe)
    tpath = os.path.join(args.out, "compare_trace.csv")
    cmp.write_trace_csv(tpath)
    man.add(tpath)
    rpath = os.path.join(args.out, "compare.json")
    _write_json(rpath, {"pid_gains": gains.to_dict(),
                        **{k: v.to_dict() for k, v in zip(cmp.labels, cmp.reports)}})
    man.add(rpath)
    man.write()
    for label, rep in zip(cmp.labels, cmp.reports):
        _print_report(label, rep)
    return 0


def cmd_bench(args, cfg: Config, argv) -> int:
    man = RunManifest("bench", argv, cfg, args.out, [args.seed])
    n = args.n if args.n is not None else cfg.eval.bench_samples
    ck, params = _load_checkpoint(args.checkpoint)
    frozen = codegen.freeze(ck)
    graph = codegen.optimize(frozen)
    dim = params.obs_dim
    targets = {
        "nn_reference": lambda x: act_deterministic(params, x),
        "nn_forward": lambda x: forward_mean(params, x),
        "graph_frozen": frozen.evaluate,
        "graph_optimized": graph.evaluate,
    }
    if codegen.find_compiler() is not None:
        art = codegen.compile_source(codegen.emit_source(graph, "nn_eval"), "nn_eval",
                                     graph.input_dim, graph.output_dim)
        targets["nn_compiled"] = art
    targets["pid"] = pid_callable(_pid_gains(cfg, args), cfg.airframe.dt)
    reports = {k: bench_inference(fn, n, dim, seed=args.seed, label=k) for k, fn in targets.items()}
    out = {"targets": {k: r.to_dict() for k, r in reports.items()}}
    out["ratios"] = {
        "nn_reference_over_pid_wcet": reports["nn_reference"].wcet / reports["pid"].wcet,
        "frozen_minus_optimized_mean_us":
            reports["graph_frozen"].mean - reports["graph_optimized"].mean,
    }
    if "nn_compiled" in reports:
        out["ratios"]["nn_compiled_over_pid_wcet"] = (
            reports["nn_compiled"].wcet / reports["pid"].wcet)
    rpath = os.path.join(args.out, "bench.json")
    _write_json(rpath, out)
    man.add(rpath)
    man.write()
    print(f"{'target':<16}{'bcet_us':>10}{'mean_us':>10}{'wcet_us':>10}{'window':>8}")
    for k, r in reports.items():
        flag = "  low-confidence" if r.low_confidence else ""
        print(f"{k:<16}{r.bcet:10.3f}{r.mean:10.3f}{r.wcet:10.3f}"
              f"{r.variability_window:8.3f}{flag}")
    for k, v in out["ratios"].items():
        print(f"{k}: {v:.3f}")
    return 0


# ------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="base random seed (default 0)")
    common.add_argument("--config", metavar="PATH",
                        help="JSON config file (or a manifest.json to rerun its config)")
    common.add_argument("--out", metavar="DIR", help="output directory (default: current)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="ratelab", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    s = sub.add_parser("config", parents=[common], help="print the resolved or default config")
    s.add_argument("--dump-defaults", action="store_true")
    s.set_defaults(func=cmd_config)

    s = sub.add_parser("train", parents=[common], help="train policies and select the best")
    s.add_argument("--steps", type=int, help="override ppo.total_steps")
    s.add_argument("--n-seeds", type=int, help="override ppo.n_seeds")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("tune-pid", parents=[common], help="Ziegler-Nichols tuning per axis")
    s.set_defaults(func=cmd_tune_pid)

    s = sub.add_parser("export", parents=[common], help="freeze, optimize and emit C")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--emit-source", metavar="PATH")
    s.add_argument("--emit-weights", metavar="PATH")
    s.add_argument("--verify", type=int, metavar="N", default=0,
                   help="check N random probes against the checkpoint")
    s.add_argument("--symbol", default="nn_eval")
    s.set_defaults(func=cmd_export)

    for name, fn, hlp in (("replay", cmd_replay, "replay setpoints through a controller"),
                          ("compare", cmd_compare, "NN checkpoint vs PID on one script")):
        s = sub.add_parser(name, parents=[common], help=hlp)
        s.add_argument("--checkpoint")
        s.add_argument("--gains", metavar="PATH", help="PID gains JSON (default: pid section)")
        src = s.add_mutually_exclusive_group()
        src.add_argument("--log", metavar="CSV", help="flight log to take setpoints from")
        src.add_argument("--script", choices=("aerobatic", "validation"))
        s.set_defaults(func=fn)

    s = sub.add_parser("bench", parents=[common], help="WCET/BCET timing of NN and PID")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--gains", metavar="PATH")
    s.add_argument("--n", type=int, help="samples (default eval.bench_samples)")
    s.set_defaults(func=cmd_bench)
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve_config(args)
    except ConfigError as exc:
        print(f"ratelab: error: config: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"ratelab: error: config: {exc}", file=sys.stderr)
        return 1
    if args.out is None and args.command != "config":
        args.out = "."
    if args.out is not None:
        os.makedirs(args.out, exist_ok=True)
    try:
        return args.func(args, cfg, argv)
    except (CliError, OSError, ValueError, TypeError, RuntimeError, FloatingPointError) as exc:
        msg = " ".join(str(exc).split())
        print(f"ratelab: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
