"""``hivit`` command line: profile, verify, bench, pretrain, finetune, linprobe, synth.

Exit codes: 0 ok, 1 a check failed, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from .config import ConfigError, load_config
from .data import Corpus, FormatError, metrics_append, synth_corpus
from .profile import GOLDEN, check_golden, count_params_flops
from .train import load_recipe, run_finetune, run_linprobe, run_pretrain

OUT_ENV = "HIVIT_OUT"
EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("hivit")


def _out_dir(args) -> Path:
    p = Path(args.out or os.environ.get(OUT_ENV) or "runs")
    p.mkdir(parents=True, exist_ok=True)
    return p


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, default=list) + "\n")


def cmd_profile(args) -> int:
    cfg = load_config(args.config)
    rep = count_params_flops(cfg, args.ratio)
    print(f"config {cfg.name}")
    print(rep.to_json() if args.json else rep.to_table())
    _write_json(_out_dir(args) / f"profile-{cfg.name}.json", rep.to_dict())
    problems = check_golden(cfg.name, rep)
    if cfg.name in GOLDEN:
        p, f = GOLDEN[cfg.name]
        print(f"reference {p}M params / {f}G FLOPs: " + ("; ".join(problems) if problems else "within tolerance"))
    return EXIT_FAIL if problems else EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_suite

    cfg = load_config(args.config)
    if args.debug_cross_unit_mix:
        cfg = cfg.replace(debug_cross_unit_mix=True)
    results = run_suite(cfg, seed=args.seed, tol=args.tol, oracle_trials=args.trials,
                        locality_trials=args.locality_trials)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    _write_json(_out_dir(args) / "verify.json",
                [{"name": r.name, "passed": r.passed, "value": r.value, "detail": r.detail} for r in results])
    if failed:
        print(f"verify failed: {', '.join(failed)}")
        return EXIT_FAIL
    print("verify: all checks passed")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import run_bench

    cfg = load_config(args.config)
    rep = run_bench(cfg, args.ratio, args.batch, args.repeats, args.seed)
    print(rep.summary())
    out = _out_dir(args)
    _write_json(out / f"bench-{cfg.name}.json", rep.to_dict())
    with open(out / "metrics.jsonl", "a") as f:
        for row in rep.metrics_rows():
            metrics_append(f, row)
    if args.max_ratio is not None and not rep.wall_ratio <= args.max_ratio:
        print(f"bench: sparse/dense {rep.wall_ratio:.3f} exceeds {args.max_ratio}")
        return EXIT_FAIL
    return EXIT_OK


def _recipe(args):
    r = load_recipe(args.recipe)
    over = {k: getattr(args, k) for k in ("seed", "epochs", "max_steps", "batch_size")
            if getattr(args, k, None) is not None}
    return dataclasses.replace(r, **over).validate() if over else r


def _train_cmd(run):
    def cmd(args) -> int:
        cfg = load_config(args.config)
        recipe = _recipe(args)
        corpus = Corpus(args.corpus)
        out = _out_dir(args)
        kw = {"out_dir": out, "resume": args.resume}
        if run is not run_pretrain:
            kw.update(init_from=args.init_from, num_classes=args.num_classes)
        state = run(corpus, cfg, recipe, **kw)
        last = state.history[-1] if state.history else {}
        print(json.dumps({"step": state.step, **{k: last[k] for k in ("loss", "acc") if k in last}}))
        print(f"metrics: {out / 'metrics.jsonl'}  checkpoint: {out / 'checkpoint.hvck'}")
        return EXIT_OK
    return cmd


def cmd_synth(args) -> int:
    c = synth_corpus(args.path, args.n, args.size, args.kind, args.seed, args.num_classes)
    print(f"wrote {args.path}: {len(c)} images {c.height}x{c.width}x{c.channels}"
          + (", labeled" if c.has_labels else ""))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hivit", description=__doc__.splitlines()[0])
    ap.add_argument("--threads", type=int, default=1, help="BLAS threads (1 for bit-reproducible runs)")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config_default=None, seed_default=0):
        p.add_argument("--config", default=config_default, required=config_default is None,
                       help="preset name or key-value config file")
        p.add_argument("--out", default=None, help=f"output directory (default ${OUT_ENV} or ./runs)")
        p.add_argument("--seed", type=int, default=seed_default)

    p = sub.add_parser("profile", help="parameter and FLOP report")
    common(p)
    p.add_argument("--ratio", type=float, default=0.75)
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_profile)

    p = sub.add_parser("verify", help="invariant suite")
    common(p, "toy")
    p.add_argument("--tol", type=float, default=None, help="single oracle tolerance (default 1e-6 / 1e-5)")
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--locality-trials", type=int, default=50)
    p.add_argument("--debug-cross-unit-mix", action="store_true", help="negative control: break unit locality")
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("bench", help="sparse vs dense step timing")
    common(p, "bench-medium")
    p.add_argument("--ratio", type=float, default=0.75)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--max-ratio", type=float, default=None, help="fail if sparse/dense exceeds this")
    p.set_defaults(fn=cmd_bench)

    for name, run in (("pretrain", run_pretrain), ("finetune", run_finetune), ("linprobe", run_linprobe)):
        p = sub.add_parser(name, help=f"{name} on an HVC1 corpus")
        common(p, seed_default=None)
        p.add_argument("--recipe", default=name, help="recipe file or built-in name")
        p.add_argument("--corpus", required=True)
        p.add_argument("--resume", default=None, help="checkpoint to continue from")
        p.add_argument("--epochs", type=int, default=None)
        p.add_argument("--max-steps", type=int, default=None)
        p.add_argument("--batch-size", type=int, default=None)
        if name != "pretrain":
            p.add_argument("--init-from", default=None, help="checkpoint holding encoder weights")
            p.add_argument("--num-classes", type=int, default=None)
        p.set_defaults(fn=_train_cmd(run))

    p = sub.add_parser("synth", help="write a synthetic HVC1 corpus")
    p.add_argument("path")
    p.add_argument("--kind", default="gaussian-blobs", choices=("gaussian-blobs", "textures", "labeled-shapes"))
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--num-classes", type=int, default=4)
    p.set_defaults(fn=cmd_synth)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        with threadpool_limits(limits=args.threads):
            return args.fn(args)
    except (ConfigError, FormatError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        # training diverged; the last good checkpoint is left in place
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
