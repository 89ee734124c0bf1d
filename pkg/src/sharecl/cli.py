"""Command-line front end.

Exit codes: 0 success, 1 usage, 2 validation or format error, 3 numeric
failure. Failures print one line ``error[<kind>]: <message>`` to stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from . import analytics, formats
from .adapt import TrainConfig, spawn_temporary, train_temporary
from .config import RunConfig, load_run_config, parse_run_config
from .errors import ShareError, ValidationError
from .merge import compress_adapters, merge
from .model import HyperParams, LayerShape, as_lora
from .sim import LAYER_ID, StreamConfig, gen_stream, run_continual, run_fig1_experiment, theorem1_probe

logger = logging.getLogger("sharecl")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _write_text(path, text):
    formats.atomic_write(path, text.encode("utf-8"))


def _dump(doc):
    return analytics.to_json(doc)


def _load_stream_source(path, env=None):
    """A stream file is either a full RunConfig or a bare StreamConfig object."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        return parse_run_config(text, env=env)
    except ValidationError as first:
        try:
            return parse_run_config(json.dumps({"stream": json.loads(text)}), env=env)
        except (ValidationError, json.JSONDecodeError):
            raise first from None


def _parse_task_ref(ref):
    path, sep, idx = ref.rpartition("#")
    if not sep or not path:
        raise UsageError(f"--task must look like stream.json#i, got {ref!r}")
    try:
        return path, int(idx)
    except ValueError:
        raise UsageError(f"task index in {ref!r} is not an integer") from None


def _log_config(cfg: RunConfig):
    logger.info("resolved config: %s", json.dumps(cfg.to_dict(), sort_keys=True))
    logger.info("seed: %d", cfg.seed)


def _parse_k_policy(policy):
    kind, _, value = policy.partition(":")
    try:
        if kind == "var":
            return None, float(value)
        if kind == "k":
            return int(value), None
    except ValueError:
        pass
    raise UsageError(f"--k-policy must be 'k:<int>' or 'var:<float>', got {policy!r}")


# -- subcommands ------------------------------------------------------------------


def cmd_init(args):
    adapters = [formats.import_adapter(p) for p in args.adapters]
    if args.k is None and args.var_threshold is None:
        raise UsageError("init needs --k or --var-threshold")
    state, report = compress_adapters(adapters, k=args.k, variance_threshold=args.var_threshold, p=args.p)
    p = args.p or adapters[0].rank
    hyper = HyperParams(
        k=state.k,
        p=p,
        phi=min(args.phi, state.k),
        variance_threshold=args.var_threshold,
        lora_rank=adapters[0].rank,
    )
    state = state.evolve(hyper=hyper)
    formats.save_state(state, args.output)
    if args.report:
        _write_text(args.report, _dump(report.to_dict()))
    logger.info("initialized k=%d from %d adapters", state.k, len(adapters))


def cmd_adapt(args):
    state = formats.load_state(args.state)
    path, idx = _parse_task_ref(args.task)
    cfg = _load_stream_source(path)
    _log_config(cfg)
    stream = gen_stream(cfg.stream)
    if not 0 <= idx < len(stream):
        raise ValidationError(f"task index {idx} out of range for a stream of {len(stream)} tasks", field="task")
    task = stream[idx]
    name = args.task_name or task.task_name
    if name in state.task_names and args.strict_cl:
        raise ValidationError(
            f"task {name!r} is already in the state; revisiting past task data is not allowed under --strict-cl",
            field="task",
        )
    phi = args.phi if args.phi is not None else state.hyper.phi
    tmp = spawn_temporary(state, phi, seed=[cfg.seed, idx], task_name=name)
    tmp = train_temporary(tmp, task, cfg.train)
    formats.save_temporary(tmp, args.output)
    logger.info("adapted %s with phi=%d, final loss %.6g", name, phi, tmp.history[-1])


def cmd_merge(args):
    state = formats.load_state(args.state)
    incoming = formats.load_any(args.input)
    if isinstance(incoming, type(state)):
        raise ValidationError("--input must hold temporary factors or an adapter, not a state", field="input")
    name = args.task_name or incoming.task_name
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        new_state, report = merge(
            state,
            incoming,
            name,
            k=args.k,
            variance_threshold=args.var_threshold,
            k_cap=state.hyper.k if args.var_threshold is not None else None,
            freeze_means=args.freeze_means,
            threads=args.threads,
        )
    for w in report.warnings:
        logger.warning(w)
    formats.save_state(new_state, args.output)
    if args.report:
        _write_text(args.report, _dump(report.to_dict()))
    logger.info("merged %s in %.3fs", name, report.wall_clock_s)


def cmd_compress(args):
    k, var = _parse_k_policy(args.k_policy)
    files = sorted(Path(args.adapters).glob("*.shrx"))
    if not files:
        raise ValidationError(f"no .shrx adapters in {args.adapters}", field="adapters")
    adapters = [formats.import_adapter(f) for f in files]
    state, report = compress_adapters(adapters, k=k, variance_threshold=var, p=args.p)
    formats.save_state(state, args.output)
    shapes = state.factors.layout
    r = adapters[0].rank
    sv = analytics.savings(shapes, r, state.k, args.p or r, len(adapters))
    doc = report.to_dict()
    doc["savings"] = sv.to_dict()
    if args.report:
        _write_text(args.report, _dump(doc))
    logger.info("compressed %d adapters to k=%d, memory ratio %.4g", len(adapters), state.k, report.memory["memory_ratio"])


def cmd_reconstruct(args):
    state = formats.load_state(args.state)
    coeffs = state.task(args.task)
    adapter = as_lora(state.factors, coeffs, with_mean=args.with_mean)
    formats.export_adapter(adapter, args.output)


def _resolved(args):
    cfg = load_run_config(args.config) if args.config else RunConfig()
    _log_config(cfg)
    return cfg


def cmd_simulate(args):
    cfg = _resolved(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stream = gen_stream(cfg.stream)
    run = run_continual(stream, cfg.hyper, cfg.train, relax_cl=not args.strict_cl, seed=cfg.seed, threads=args.threads)
    fb = analytics.forgetting_and_bwt(run.grid, mode="peak")
    planted = {LAYER_ID: stream.basis_beta}
    cka = analytics.cka_trajectory(run.states, planted)
    shapes = [LayerShape(LAYER_ID, cfg.stream.n, cfg.stream.d)]
    sv = analytics.savings(shapes, cfg.hyper.lora_rank, run.states[-1].k, cfg.hyper.p, len(stream), phi=cfg.hyper.phi)
    _write_text(out / "config.json", cfg.to_json())
    _write_text(out / "grid.json", _dump(run.grid.to_dict()))
    _write_text(out / "forgetting.json", _dump(fb))
    _write_text(out / "retention.json", _dump({"retention": analytics.retention(run.grid)}))
    _write_text(out / "cka.json", _dump(cka))
    _write_text(out / "savings.json", _dump(sv.to_dict()))
    _write_text(out / "merges.json", _dump([r.to_dict() for r in run.reports]))
    rows = analytics.series_rows("cka_planted", [c["mean"] for c in cka])
    rows += analytics.series_rows("final_score", run.grid.scores[-1])
    rows += analytics.series_rows("k", [s.k for s in run.states])
    _write_text(out / "series.csv", analytics.to_csv(rows))
    formats.save_state(run.states[-1], out / "state.shrx")
    if args.orderings:
        fig = run_fig1_experiment(cfg.stream, cfg.hyper, cfg.train, seed=cfg.seed)
        doc = {
            "orderings": fig.orderings,
            "trajectories": fig.trajectories,
            "cross_cka": fig.cross_cka,
            "projector_gaps": fig.projector_gaps,
        }
        _write_text(out / "orderings.json", _dump(doc))
        _write_text(out / "orderings.csv", analytics.to_csv(fig.rows()))
    logger.info("simulated %d tasks into %s", len(stream), out)


def cmd_probe(args):
    cfg = _resolved(args)
    stream = gen_stream(cfg.stream)
    if len(stream) < 2:
        raise ValidationError("probe-theorem1 needs a stream of at least 2 tasks", field="stream.num_tasks")
    # the basis comes from a continual run over every task but the probed one
    reference = run_continual(stream.tasks[:-1], cfg.hyper, cfg.train, seed=cfg.seed, threads=args.threads)
    basis = reference.states[-1].factors.layers[LAYER_ID].alpha
    curve = theorem1_probe(stream[len(stream) - 1], basis, sample_sizes=args.sizes, seed=cfg.seed)
    _write_text(args.out, analytics.to_csv(curve.rows()))


def cmd_analyze(args):
    doc = json.loads(Path(args.grid).read_text(encoding="utf-8"))
    try:
        grid = analytics.EvalGrid.from_dict(doc)
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"not an evaluation grid: {exc}", field="grid") from None
    out = analytics.forgetting_and_bwt(grid, mode=args.mode)
    text = _dump(out)
    if args.out:
        _write_text(args.out, text)
    else:
        sys.stdout.write(text)


# -- parser -------------------------------------------------------------------------


def _add_globals(parser, defaults):
    kw = (lambda v: {"default": v}) if defaults else (lambda v: {"default": argparse.SUPPRESS})
    parser.add_argument("--threads", type=int, help="layer-parallel workers", **kw(os.cpu_count() or 1))
    cl = parser.add_mutually_exclusive_group()
    cl.add_argument("--strict-cl", dest="strict_cl", action="store_true",
                    help="never revisit past task data (default)", **kw(True))
    cl.add_argument("--relax-cl", dest="strict_cl", action="store_false",
                    help="allow coefficient finetuning on past task data", **kw(True))
    parser.add_argument("--log-level", choices=["DEBUG", "INFO", "WARNING", "ERROR"], **kw("WARNING"))


def build_parser():
    parser = _Parser(prog="sharecl", description=__doc__.splitlines()[0])
    _add_globals(parser, defaults=True)
    # the same flags are accepted after the subcommand name
    common = _Parser(add_help=False)
    _add_globals(common, defaults=False)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub_parser = sub.add_parser

    def add(name, **kw):
        return sub_parser(name, parents=[common], **kw)

    sub.add_parser = add

    p = sub.add_parser("init", help="build a state from adapters")
    p.add_argument("--adapters", nargs="+", required=True)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--k", type=int)
    g.add_argument("--var-threshold", type=float)
    p.add_argument("--p", type=int)
    p.add_argument("--phi", type=int, default=4)
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--report")
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("adapt", help="train temporary factors on one stream task")
    p.add_argument("--state", required=True)
    p.add_argument("--task", required=True, help="stream.json#i")
    p.add_argument("--phi", type=int)
    p.add_argument("--task-name")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("merge", help="merge temporary factors or an adapter into a state")
    p.add_argument("--state", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--task-name")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--k", type=int)
    g.add_argument("--var-threshold", type=float)
    p.add_argument("--freeze-means", action="store_true")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--report")
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("compress", help="compress a directory of adapters at once")
    p.add_argument("--adapters", required=True)
    p.add_argument("--k-policy", default="var:0.6")
    p.add_argument("--p", type=int)
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--report")
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("reconstruct", help="export one task as an adapter")
    p.add_argument("--state", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--with-mean", action="store_true")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("simulate", help="continual run over a synthetic stream")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--orderings", action="store_true", help="also run three task orderings")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("probe-theorem1", help="sample-size curves for a frozen basis")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--sizes", type=int, nargs="+", default=[64, 256, 1024, 4096])
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("analyze", help="forgetting and backward transfer of a grid")
    p.add_argument("--grid", required=True)
    p.add_argument("--mode", choices=["peak", "prev"], default="peak")
    p.add_argument("--out")
    p.set_defaults(func=cmd_analyze)
    return parser


def _fail(kind, message, code):
    line = " ".join(str(message).split())
    sys.stderr.write(f"error[{kind}]: {line}\n")
    return code


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail("usage", exc, 1)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.threads < 1:
        return _fail("usage", "--threads must be >= 1", 1)
    try:
        args.func(args)
    except UsageError as exc:
        return _fail("usage", exc, 1)
    except ShareError as exc:
        return _fail(exc.kind, exc, exc.exit_code)
    except np.linalg.LinAlgError as exc:
        return _fail("numeric", exc, 3)
    except (KeyError, ValueError, TypeError) as exc:
        return _fail("validation", exc.args[0] if exc.args else exc, 2)
    except OSError as exc:
        return _fail("io", exc, 2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
