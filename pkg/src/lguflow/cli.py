"""Operator-facing command line: gradcheck | bench | train | demo | eval.

All reports go to stdout as line-delimited JSON. Exit codes: 0 success,
2 verification failure, 3 config error, 4 numeric abort.

Only stdlib is imported at module level: the thread count must land in the
environment before numpy/numba load, so the heavy imports happen inside
main() after the --threads resolution.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

EXIT_OK = 0
EXIT_VERIFICATION = 2
EXIT_CONFIG = 3
EXIT_NUMERIC = 4


def _emit(record: dict) -> None:
    sys.stdout.write(json.dumps(record, sort_keys=True) + "\n")
    sys.stdout.flush()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lguflow",
        description="Gaussian-uncertainty correspondence stack: verification, "
                    "benchmarks, toy training.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", metavar="PATH", help="flat key=value config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=None)
        p.add_argument("--deterministic", action="store_true", default=None)
        p.add_argument("--out", metavar="DIR", default=None, help="output directory")

    p = sub.add_parser("gradcheck", help="finite-difference checks of every op and the pipeline")
    common(p)
    p = sub.add_parser("bench", help="materialized vs on-the-fly scaling benchmark")
    common(p)
    p = sub.add_parser("train", help="toy unrolled training on synthetic scenes")
    common(p)
    p.add_argument("--no-lgu", action="store_true", help="disable Gaussian uncertainty masking")
    p.add_argument("--no-deform", action="store_true", help="disable deformable offsets")
    p.add_argument("--no-kan", action="store_true", help="disable KAN gate biases")
    p = sub.add_parser("demo", help="dump pipeline intermediates for one scene")
    common(p)
    p.add_argument("--scene-seed", type=int, default=0)
    p = sub.add_parser("eval", help="EPE on a held-out synthetic split")
    common(p)
    p.add_argument("--checkpoint", metavar="DIR", default=None)
    p.add_argument("--no-lgu", action="store_true")
    p.add_argument("--no-deform", action="store_true")
    p.add_argument("--no-kan", action="store_true")
    return parser


def _resolve_threads(args, file_values: dict) -> int:
    if args.threads is not None:
        return int(args.threads)
    if "threads" in file_values:
        return int(file_values["threads"])
    deterministic = args.deterministic
    if deterministic is None:
        deterministic = file_values.get("deterministic", True)
    if deterministic:
        return os.cpu_count() or 1
    return 0


def _pin_threads(n: int) -> None:
    if n <= 0:
        return
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMBA_NUM_THREADS"):
        os.environ.setdefault(var, str(n))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)

    from .config import ConfigError, load_config, parse_config_file

    try:
        file_values = parse_config_file(args.config) if args.config else {}
        threads = _resolve_threads(args, file_values)
        _pin_threads(threads)
        overrides = {"seed": args.seed, "out_dir": args.out, "threads": threads}
        if args.deterministic is not None:
            overrides["deterministic"] = args.deterministic
        cfg = load_config(args.config, overrides=overrides, env=os.environ)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    handler = {
        "gradcheck": cmd_gradcheck,
        "bench": cmd_bench,
        "train": cmd_train,
        "demo": cmd_demo,
        "eval": cmd_eval,
    }[args.command]
    return handler(cfg, args)


def cmd_gradcheck(cfg, args) -> int:
    from .gradcheck import run_all

    ok = True
    for record in run_all(seeds=10):
        _emit(record)
        ok = ok and record["pass"]
    _emit({"check": "gradcheck", "pass": ok})
    return EXIT_OK if ok else EXIT_VERIFICATION


def cmd_bench(cfg, args) -> int:
    import numpy as np

    from .correlation import bench_path, path_difference

    sizes = cfg.bench_size_list()
    smallest = min(sizes)
    diff = path_difference(smallest, smallest, cfg.c, cfg.r, seed=cfg.seed)
    eq_ok = diff <= 1e-10
    _emit({"check": "equivalence", "H": smallest, "W": smallest, "C": cfg.c,
           "r": cfg.r, "max_abs_diff": diff, "tol": 1e-10, "pass": eq_ok})
    if not eq_ok:
        return EXIT_VERIFICATION

    records = {"materialized": [], "onthefly": []}
    for size in sizes:
        for path in ("materialized", "onthefly"):
            rec = bench_path(path, size, size, cfg.c, cfg.r,
                             repeat=cfg.bench_repeat, seed=cfg.seed,
                             dtype=cfg.numpy_dtype())
            rec["threads"] = cfg.threads
            records[path].append(rec)
            _emit(rec)
    slopes = {}
    for path, recs in records.items():
        if len(recs) >= 2:
            hw = np.log([r["H"] * r["W"] for r in recs])
            ms = np.log([r["median_ms"] for r in recs])
            slopes[path] = float(np.polyfit(hw, ms, 1)[0])
    _emit({"check": "scaling", "slopes": slopes, "threads": cfg.threads})
    return EXIT_OK


def cmd_train(cfg, args) -> int:
    from .geometry import make_corpus
    from .training import NumericAbort, train

    corpus = make_corpus(cfg.scene_config(), cfg.seed, cfg.corpus_scenes)
    ckpt_dir = os.path.join(cfg.out_dir, "checkpoints")
    try:
        train(cfg, corpus, on_report=_emit, checkpoint_dir=ckpt_dir,
              no_lgu=args.no_lgu, no_deform=args.no_deform, no_kan=args.no_kan)
    except NumericAbort as exc:
        print(f"numeric abort: {exc} (dump: {exc.dump_dir})", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_demo(cfg, args) -> int:
    import numpy as np

    from .gaussian import build_mask
    from .geometry import generate_scene
    from .model import MatchingModel
    from .tensor import save_tensor

    scene = generate_scene(cfg.scene_config(), args.scene_seed)
    model = MatchingModel.from_config(cfg)
    out = model.forward(scene, iterations=cfg.iterations)
    os.makedirs(cfg.out_dir, exist_ok=True)
    H, W = cfg.h, cfg.w

    def dump(name, arr):
        path = os.path.join(cfg.out_dir, name + ".lgut")
        save_tensor(np.ascontiguousarray(arr), path)
        _emit({"tensor": name, "path": path, "shape": list(np.shape(arr))})

    dump("gt_flow", scene.flow)
    dump("ambiguous_mask", scene.ambiguous.astype(np.float32))
    if out["field"] is not None:
        dump("expectation", out["field"].mu.value.reshape(H, W, 2))
        dump("covariance", out["field"].cov.value.reshape(H, W, 2))
        mask = build_mask(out["field"], gain=cfg.mask_scale)
        dump("mask_windows", mask.values.value)
    if out["gate"] is not None:
        dump("gate", out["gate"].value.reshape(H, W))
    if out["offsets"] is not None:
        for lvl, off in enumerate(out["offsets"]):
            dump(f"offsets_level{lvl}", off.value)
    for t, flow in enumerate(out["flows"], start=1):
        dump(f"flow_iter{t}", flow.value.reshape(H, W, 2))
    return EXIT_OK


def cmd_eval(cfg, args) -> int:
    from .geometry import make_corpus
    from .model import MatchingModel
    from .training import evaluate

    scenes = make_corpus(cfg.scene_config(), cfg.seed + 1_000_000, cfg.eval_scenes)
    model = MatchingModel.from_config(cfg)
    step = 0
    if args.checkpoint:
        step = model.store.load_checkpoint(args.checkpoint)
    result = evaluate(model, scenes, iterations=cfg.iterations,
                      no_lgu=args.no_lgu, no_deform=args.no_deform, no_kan=args.no_kan)
    _emit({"check": "eval", "mean_epe": result["mean_epe"],
           "per_scene": result["per_scene"], "scenes": cfg.eval_scenes,
           "checkpoint_step": step,
           "ablations": {"no_lgu": args.no_lgu, "no_deform": args.no_deform,
                         "no_kan": args.no_kan}})
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
