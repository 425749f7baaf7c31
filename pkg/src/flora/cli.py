"""Command-line entry point.

CSV goes to ``--out`` (stdout by default) and starts with a ``#`` line
recording seed, config hash and version; everything meant for people goes to
stderr. Exit codes: 0 success, 1 a verification failed, 2 usage or I/O error.
"""

from __future__ import annotations

import argparse
import configparser
import contextlib
import dataclasses
import hashlib
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, costmodel, kernels, registry, scheduler, trainer
from .adapters import (
    AdaptedLinear,
    bmm_lora_forward,
    dense_forward,
    flora_forward_batched,
    ia3_forward,
    init_adapter,
)
from .errors import FloraError, FormatError

OK, FAILED, USAGE = 0, 1, 2

FORWARD = {"lora": bmm_lora_forward, "flora": flora_forward_batched, "ia3": ia3_forward}
SYNTHETIC_GRID = [(b, l, d, r) for b in (4, 16) for l in (1, 8) for d in (256, 512) for r in (1, 2, 4, 8, 16)]


class UsageError(Exception):
    pass


def int_list(text: str):
    """``"1-4,8"`` -> ``[1, 2, 3, 4, 8]``."""
    out = []
    for part in str(text).split(","):
        part = part.strip()
        if not part:
            continue
        lo, sep, hi = part.partition("-")
        if sep:
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(part))
    if not out:
        raise argparse.ArgumentTypeError(f"empty list {text!r}")
    return out


def rate_value(text: str) -> float:
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError("rate must be positive")
    return v


def key_values(text: str) -> dict:
    try:
        return {k.strip(): float(v) for k, v in (item.split("=") for item in text.split(","))}
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected key=value pairs, got {text!r}") from None


def length_range(text: str):
    lo, _, hi = text.partition("-")
    return int(lo), int(hi or lo)


def env_seed():
    raw = os.environ.get("FLORA_SEED")
    return int(raw) if raw not in (None, "") else None


# -- output --------------------------------------------------------------------


def config_hash(args) -> str:
    skip = {"func", "config", "out"}
    blob = json.dumps({k: v for k, v in sorted(vars(args).items()) if k not in skip}, default=str, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


@contextlib.contextmanager
def csv_out(args):
    path = getattr(args, "out", None)
    if path in (None, "-"):
        fh, close = sys.stdout, False
    else:
        try:
            fh, close = open(path, "w", newline=""), True
        except OSError as exc:
            raise UsageError(f"cannot write {path}: {exc.strerror}") from exc
    try:
        command = " ".join(filter(None, (args.command, getattr(args, "action", None))))
        fh.write(f"# flora {__version__} seed={args.seed} config_hash={config_hash(args)} command={command}\n")
        yield fh
    finally:
        if close:
            fh.close()


def say(msg: str) -> None:
    print(msg, file=sys.stderr)


# -- calibrate -----------------------------------------------------------------


def cmd_calibrate(args) -> int:
    if args.synthetic:
        if not {"c1", "c2"} <= args.synthetic.keys():
            raise UsageError("--synthetic needs c1=...,c2=...")
        grid = SYNTHETIC_GRID
        if args.d and args.r:
            grid = [(b, l, d, r) for b in args.b for l in args.l for d in args.d for r in args.r]
        rows = costmodel.synthetic_timings(
            args.synthetic["c1"], args.synthetic["c2"], grid, noise=args.noise, seed=args.seed or 0
        )
    else:
        if not args.d or not args.r:
            raise UsageError("calibrate needs a grid: --d and --r (or --synthetic)")
        rows = kernels.sweep(args.d, args.r, bs=args.b, ls=args.l, repeat=args.repeat, seed=args.seed or 0)
    if args.timings:
        try:
            with open(args.timings, "w", newline="") as fh:
                costmodel.write_timings(rows, fh)
        except OSError as exc:
            raise UsageError(f"cannot write {args.timings}: {exc.strerror}") from exc
    fits = {}
    for d in sorted({t.d for t in rows}):
        fits[d] = costmodel.calibrate([t for t in rows if t.d == d])
    if len(fits) > 1:
        fits["all"] = costmodel.calibrate(rows)
    with csv_out(args) as fh:
        costmodel.write_fit(fits, fh)
    for d, fit in fits.items():
        cross = fit.crossover(d) if isinstance(d, int) else "-"
        say(f"d={d}: c1={fit.c1:.4g} c2={fit.c2:.4g} ratio={fit.ratio:.4g} crossover={cross} "
            f"rms={fit.rms_rel_residual:.3g} {' '.join(fit.flags)}")
    return OK


# -- bench / simulate ----------------------------------------------------------


def coefficients(args, d):
    if args.c1 is not None or args.c2 is not None:
        if args.c1 is None or args.c2 is None:
            raise UsageError("give both --c1 and --c2")
        return args.c1, args.c2
    if args.fit:
        try:
            with open(args.fit) as fh:
                return costmodel.read_fit(fh, d)
        except OSError as exc:
            raise UsageError(f"cannot read {args.fit}: {exc.strerror}") from exc
    say(f"no --fit or --c1/--c2: calibrating on this host at d={d} (decode shapes)")
    rows = kernels.sweep([d], range(1, 17), bs=(4, 8, 16, 32), ls=(1,), repeat=5, seed=args.seed or 0)
    fit = costmodel.calibrate(rows)
    say(f"host fit: c1={fit.c1:.4g} c2={fit.c2:.4g} {' '.join(fit.flags)}")
    return fit.c1, fit.c2


def serve_template(args, c1, c2, max_tokens):
    return scheduler.desk_config(
        args.d, c1, c2, n_layers=args.layers, max_batched_tokens=max_tokens, seed=args.seed or 0,
        step_overhead=args.step_overhead, cost_source=getattr(args, "cost", "model"),
    )


def cmd_bench(args) -> int:
    if not args.ranks:
        raise UsageError("empty rank list")
    mode = args.mode
    rates = args.rate or ([math.inf] if mode == "throughput" else [8.0])
    max_tokens = args.max_batched_tokens or (
        scheduler.THROUGHPUT_TOKENS if mode == "throughput" else scheduler.LATENCY_TOKENS
    )
    c1, c2 = coefficients(args, args.d)
    template = serve_template(args, c1, c2, max_tokens)
    lens = length_range(args.lengths)

    def workload(rate):
        return scheduler.generate_workload(args.n, lens, rate, seed=args.seed or 0, arrival=args.arrival)

    rows = scheduler.sweep(template, args.ranks, rates, workload)
    with csv_out(args) as fh:
        scheduler.write_metrics(rows, fh)
    metric = "throughput_tok_s" if mode == "throughput" else "latency_s_per_tok_mean"
    predicted = costmodel.crossover_rank(c1, c2, args.d)
    for rate in rates:
        infl = scheduler.inflection_rank(rows, rate, metric)
        say(f"rate={rate}: inflection rank={infl if infl is not None else 'none in sweep'} "
            f"(predicted crossover {predicted}, first bmm win expected at {predicted + 1})")
    flagged = [r for r in rows if r["error"]]
    if flagged:
        say(f"{len(flagged)} rows flagged: requests exceed max_batched_tokens={max_tokens}")
    return OK


def cmd_simulate(args) -> int:
    c1, c2 = coefficients(args, args.d)
    max_tokens = args.max_batched_tokens or scheduler.THROUGHPUT_TOKENS
    cfg = serve_template(args, c1, c2, max_tokens)
    cfg = dataclasses.replace(cfg, strategy=args.strategy, rank=args.rank, request_rate=args.rate)
    if args.workload:
        try:
            with open(args.workload) as fh:
                work = scheduler.read_workload(fh)
        except OSError as exc:
            raise UsageError(f"cannot read {args.workload}: {exc.strerror}") from exc
    else:
        work = scheduler.generate_workload(args.n, length_range(args.lengths), args.rate, seed=args.seed,
                                           arrival=args.arrival)
    run = scheduler.run_static if args.static else scheduler.run_continuous
    m = run(cfg, work)
    with csv_out(args) as fh:
        scheduler.write_metrics([scheduler.metrics_row(cfg, m)], fh)
    say(f"{args.strategy} r={args.rank}: {m.throughput:.4g} tok/s, {m.latency_mean:.4g} s/token mean, "
        f"{len(m.completion)} done, {len(m.rejected)} rejected")
    return OK


# -- train ---------------------------------------------------------------------


def cmd_train(args) -> int:
    teacher_kind = args.teacher or ("additive" if args.kind == "lora" else "multiplicative")
    teacher = trainer.plant_teacher(teacher_kind, args.dim, args.dim, seed=args.seed)
    cfg = trainer.TrainConfig(args.kind, lr=args.lr, steps=args.steps, seed=args.seed, rank=args.rank,
                              momentum=args.momentum)
    result = trainer.train_recovery(teacher, cfg)
    with csv_out(args) as fh:
        trainer.write_losses(result.losses, fh)
    if args.save:
        registry.store(result.adapter, args.save)
    say(f"{args.kind} on {teacher_kind} teacher: held-out MSE {result.heldout_mse:.3g} after {result.steps} steps "
        f"(lr={cfg.lr})")
    return OK


# -- adapter -------------------------------------------------------------------


def seeded_layer(d, k, seed, dtype):
    g = np.random.default_rng(seed)
    return AdaptedLinear((g.standard_normal((d, k)) / np.sqrt(d)).astype(dtype))


def cmd_adapter_create(args) -> int:
    if args.kind != "ia3" and not args.d:
        raise UsageError(f"{args.kind} adapters need --d")
    d = args.d or 1
    rec = init_adapter(args.kind, d, args.k, args.r, seed=args.seed or 0, strategy=args.init,
                       dtype=np.dtype(args.dtype), reduction=args.reduction,
                       adapter_id=Path(args.path).stem)
    n = registry.store(rec, args.path)
    say(f"wrote {args.path} ({n} bytes)")
    return OK


def cmd_adapter_inspect(args) -> int:
    header = registry.read_header(args.path)
    header["bytes"] = os.path.getsize(args.path)
    with csv_out(args) as fh:
        fh.write(",".join(header) + "\n")
        fh.write(",".join(str(v) for v in header.values()) + "\n")
    return OK


def cmd_adapter_verify(args) -> int:
    checks = []
    try:
        rec = registry.load(args.path)
        checks.append(("format", "PASS", ""))
    except FormatError as exc:
        checks.append(("format", "FAIL", str(exc)))
        rec = None
    if rec is not None:
        header = registry.read_header(args.path)
        size_ok = os.path.getsize(args.path) == registry.storage_bytes(
            header["kind"], header["d"], header["k"], header["r"], np.dtype(header["dtype"]))
        checks.append(("size", "PASS" if size_ok else "FAIL", ""))
        if not args.skip_noop:
            arrays = (rec.scale,) if rec.kind == "ia3" else (rec.B, rec.A)
            dtype = arrays[0].dtype
            k = header["k"]
            d = header["d"] or k
            layer = seeded_layer(d, k, args.seed or 0, dtype)
            X = np.random.default_rng(1).standard_normal((2, 3, d)).astype(dtype)
            adapted = FORWARD[rec.kind](X, layer, [rec, rec])
            base = dense_forward(X, layer)
            same = np.array_equal(adapted, base)
            detail = "" if same else f"max |diff| {float(np.max(np.abs(adapted - base))):.3g}"
            checks.append(("noop_at_init", "PASS" if same else "FAIL", detail))
    with csv_out(args) as fh:
        fh.write("check,status,detail\n")
        for name, status, detail in checks:
            fh.write(f"{name},{status},\"{detail}\"\n")
    for name, status, detail in checks:
        label = "no-op at init" if name == "noop_at_init" else name
        say(f"{label}: {status}" + (f" ({detail})" if detail else ""))
    return OK if all(s == "PASS" for _, s, _ in checks) else FAILED


# -- parser --------------------------------------------------------------------


def add_common(p, seed_required=False):
    p.add_argument("--seed", type=int, default=env_seed(),
                   help="random seed (default: $FLORA_SEED)" + ("; required" if seed_required else ""))
    p.add_argument("--out", default="-", help="CSV output path (default stdout)")


def add_serving(p):
    p.add_argument("--d", type=int, default=1024, help="model width")
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--fit", help="fit report from `calibrate`")
    p.add_argument("--c1", type=float)
    p.add_argument("--c2", type=float)
    p.add_argument("--n", type=int, default=200, help="requests per workload")
    p.add_argument("--lengths", default="50-2000", help="total request length range, e.g. 50-2000")
    p.add_argument("--arrival", choices=("poisson", "fixed"), default="poisson")
    p.add_argument("--max-batched-tokens", type=int)
    p.add_argument("--step-overhead", type=float, default=0.0, help="fixed seconds added to every step")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flora", description="Multi-adapter serving toolkit")
    parser.add_argument("--config", help="INI file; a section per subcommand supplies option defaults")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("calibrate", help="time both kernel paths and fit (c1, c2)")
    add_common(p)
    p.add_argument("--d", type=int_list)
    p.add_argument("--r", type=int_list)
    p.add_argument("--b", type=int_list, default=[4, 8, 16])
    p.add_argument("--l", type=int_list, default=[1])
    p.add_argument("--repeat", type=int, default=15)
    p.add_argument("--synthetic", type=key_values, help="fit closed-form timings instead, e.g. c1=5,c2=1")
    p.add_argument("--noise", type=float, default=0.0, help="relative noise on synthetic timings")
    p.add_argument("--timings", help="also write the raw timing rows here")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("bench", help="throughput or latency sweep over ranks for flora and bmm-LoRA")
    p.add_argument("mode", choices=("throughput", "latency"))
    add_common(p)
    add_serving(p)
    p.add_argument("--ranks", type=int_list, default=list(range(1, 17)))
    p.add_argument("--rate", type=rate_value, action="append", help="requests/s; repeatable")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("simulate", help="one serving run")
    add_common(p, seed_required=True)
    add_serving(p)
    p.add_argument("--strategy", choices=("flora", "bmm_lora", "ia3", "none"), default="flora")
    p.add_argument("--rank", type=int, default=1)
    p.add_argument("--rate", type=rate_value, default=math.inf)
    p.add_argument("--workload", help="workload CSV (id,adapter_id,prompt_len,output_len,arrival_time)")
    p.add_argument("--static", action="store_true", help="static batching instead of continuous")
    p.add_argument("--cost", choices=("model", "live"), default="model")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="recover a planted teacher with one adapter")
    add_common(p, seed_required=True)
    p.add_argument("--kind", choices=("flora", "lora", "ia3"), default="flora")
    p.add_argument("--teacher", choices=("multiplicative", "additive"))
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--rank", type=int, default=1)
    p.add_argument("--steps", type=int, default=5000)
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float, default=0.0)
    p.add_argument("--save", help="store the trained adapter here")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("adapter", help="create, inspect or verify adapter files")
    asub = p.add_subparsers(dest="action", required=True)
    c = asub.add_parser("create")
    add_common(c)
    c.add_argument("path")
    c.add_argument("--kind", choices=("lora", "flora", "ia3"), required=True)
    c.add_argument("--d", type=int)
    c.add_argument("--k", type=int, required=True)
    c.add_argument("--r", type=int, default=1)
    c.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    c.add_argument("--reduction", choices=("sum", "mean"), default="sum")
    c.add_argument("--init", choices=("noop", "random"), default="noop")
    c.set_defaults(func=cmd_adapter_create)
    i = asub.add_parser("inspect")
    add_common(i)
    i.add_argument("path")
    i.set_defaults(func=cmd_adapter_inspect)
    v = asub.add_parser("verify")
    add_common(v)
    v.add_argument("path")
    v.add_argument("--skip-noop", action="store_true", help="only check format and size")
    v.set_defaults(func=cmd_adapter_verify)
    return parser


def _subparser(parser, argv):
    """The subparser selected by ``argv`` (descending into nested actions)."""
    node, path = parser, []
    for tok in argv:
        actions = [a for a in node._actions if isinstance(a, argparse._SubParsersAction)]
        if actions and tok in actions[0].choices:
            node = actions[0].choices[tok]
            path.append(tok)
    return node, path


def apply_config(parser, argv, path):
    """Feed the matching INI section(s) in as defaults of the chosen subcommand."""
    cp = configparser.ConfigParser()
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from exc
    except configparser.Error as exc:
        raise UsageError(f"bad config {path}: {exc}") from exc
    node, names = _subparser(parser, argv)
    section = " ".join(names)
    if not cp.has_section(section) and names:
        section = names[0]
    values = dict(cp.defaults())
    if cp.has_section(section):
        values.update(cp.items(section))
    dests = {a.dest: a for a in node._actions}
    unknown = [k for k in values if k.replace("-", "_") not in dests]
    if unknown:
        raise UsageError(f"unknown config keys for {section or 'flora'}: {', '.join(sorted(unknown))}")
    defaults = {}
    for key, raw in values.items():
        action = dests[key.replace("-", "_")]
        if isinstance(action, argparse._StoreTrueAction):
            defaults[action.dest] = cp.BOOLEAN_STATES.get(raw.lower(), False)
        elif isinstance(action, argparse._AppendAction):
            defaults[action.dest] = [action.type(x) if action.type else x for x in raw.split(",")]
        else:
            defaults[action.dest] = raw
    node.set_defaults(**defaults)


def config_path(argv):
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        config = config_path(argv)
        if config:
            apply_config(parser, argv, config)
        args = parser.parse_args(argv)
    except UsageError as exc:
        say(f"flora: error: {exc}")
        return USAGE
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else USAGE
    if args.command in ("simulate", "train") and args.seed is None:
        say(f"flora {args.command}: error: --seed (or FLORA_SEED) is required")
        return USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        say(f"flora: error: {exc}")
        return USAGE
    except (FloraError, OSError) as exc:
        say(f"flora: {type(exc).__name__}: {exc}")
        return USAGE


if __name__ == "__main__":
    sys.exit(main())
