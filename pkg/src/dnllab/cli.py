"""Command-line entry point.

Subcommands::

    check        run every verification suite (identities, optimality,
                 spectral bound, gradient coupling, row sums)
    gradcheck    finite-difference gradient check per block variant
    train        train the toy segmentation benchmark, write trace + weights
    analyze      consistency table + attention-map export for trained weights
    bench        complexity tables (closed-form, measured, optional latency)
    export-maps  total/pairwise/unary attention maps for one query pixel

Config files are flat ``key = value`` text; command-line flags override
file values, and every run echoes its fully resolved configuration as
``# config:`` lines so it can be reproduced exactly. Deterministic
outputs (CSV, PGM, weights) are byte-identical across reruns of the same
config in 64-bit mode; wall-clock latency columns (``bench --latency``)
are the documented exception. The environment variable
``DNLLAB_PRECISION`` (f64/f32) selects the scalar width.
"""

import argparse
import sys
from pathlib import Path

import numpy as np

from . import analysis, bench, blocks, figures, metrics, pgm, suites, toyseg, weights_io
from . import autograd as ag
from .blocks import Variant
from .precision import precision_mode

USAGE_ERROR = 2
SUITE_FAILURE = 1


def _echo(settings: dict) -> None:
    for key in sorted(settings):
        print(f"# config: {key} = {settings[key]}")


def _parse_size(token: str):
    try:
        c, h, w = (int(t) for t in token.lower().split("x"))
        if c <= 0 or h <= 0 or w <= 0 or c % 2:
            raise ValueError
        return c, h, w
    except ValueError:
        raise SystemExit(f"error: --size must be CxHxW with even positive C, got {token!r}")


def _parse_query(token: str):
    try:
        r, c = (int(t) for t in token.split(","))
        return r, c
    except ValueError:
        raise SystemExit(f"error: --query must be ROW,COL, got {token!r}")


def read_config_file(path) -> dict:
    """Flat ``key = value`` lines; '#' starts a comment."""
    values = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}: malformed line {raw!r}")
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    return values


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_check(args) -> int:
    _echo({"seed": args.seed, "instances": args.instances,
           "precision": precision_mode()})
    reports = []
    failed = False
    for name, runner in suites.SUITES.items():
        for report in runner(args.seed, args.instances):
            reports.append(report)
            status = "PASS" if report.passed else "FAIL"
            print(f"{report.name:28s} max_error={report.max_abs_error:.3e} "
                  f"tol={report.tolerance:g} instances={report.instances_tested} "
                  f"{status}")
            failed = failed or not report.passed
    if args.json:
        Path(args.json).write_text(analysis.reports_to_json(reports))
    return SUITE_FAILURE if failed else 0


def _gradcheck_one(variant: Variant, size, seed: int, h: float, tol: float):
    channels, height, width = size
    rng = np.random.default_rng(np.random.SeedSequence([seed, 42]))
    x = rng.normal(size=(channels, height, width))
    init = blocks.init_block_params(channels, variant, rng)
    # generic parameter point: zero-initialized projections carry no signal
    params = {name: rng.normal(size=arr.shape) * 0.5
              for name, arr in init.named_arrays().items()}
    coeffs = rng.normal(size=(channels, height, width))

    def loss_fn(nodes):
        y, _ = blocks.block_graph(ag.constant(x), nodes, variant)
        return ag.sum_all(ag.mul(y, ag.constant(coeffs)))

    return ag.finite_diff_check(loss_fn, params, h=h, tol=tol)


def cmd_gradcheck(args) -> int:
    size = _parse_size(args.size)
    _echo({"variant": args.variant, "size": args.size, "seed": args.seed,
           "h": args.h, "tol": args.tol, "precision": precision_mode()})
    variants = list(blocks.VARIANTS) if args.variant == "all" else [
        blocks.parse_variant(args.variant)
    ]
    all_ok = True
    for variant in variants:
        report = _gradcheck_one(variant, size, args.seed, args.h, args.tol)
        status = "PASS" if report.passed else "FAIL"
        print(f"{variant.value:10s} {args.size}: {status} rel_err<{args.tol:g} "
              f"(max={report.max_rel_error:.3e}, worst={report.worst_leaf})")
        all_ok = all_ok and report.passed
    return 0 if all_ok else SUITE_FAILURE


def _train_config_from_args(args) -> toyseg.TrainConfig:
    values = {}
    if args.config:
        values.update(read_config_file(args.config))
    if args.variant is not None:
        values["variant"] = args.variant
    if args.seed is not None:
        values["seed"] = args.seed
    if args.iterations is not None:
        values["iterations"] = args.iterations
    if args.base_lr is not None:
        values["base_lr"] = args.base_lr
    return toyseg.TrainConfig.from_flat_dict(values)


def cmd_train(args) -> int:
    cfg = _train_config_from_args(args)
    _echo({**cfg.to_flat_dict(), "precision": precision_mode()})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = toyseg.train(cfg)
    toyseg.write_trace_csv(out / "trace.csv", result.trace)
    weights_io.save_weights(out / "weights.dnlw",
                            result.model.weights.named_arrays(),
                            meta=cfg.to_flat_dict())
    figures.training_curves(out / "curves.png", result.trace)
    final = result.final
    print(f"final: iter={final.iteration} loss={final.loss:.6f} "
          f"train_miou={final.train_miou:.4f} val_miou={final.val_miou:.4f}")
    print(f"wrote {out / 'trace.csv'}, {out / 'weights.dnlw'}, {out / 'curves.png'}")
    return 0


def _load_model(path) -> toyseg.TrainedModel:
    arrays, meta = weights_io.load_weights(path)
    cfg = toyseg.TrainConfig.from_flat_dict(meta)
    variant = None if cfg.variant is None else blocks.parse_variant(cfg.variant)
    weights = toyseg.ModelWeights.from_named_arrays(arrays, variant)
    return toyseg.TrainedModel(weights=weights, config=cfg)


def _export_decomposition(out_dir: Path, stem: str, model: toyseg.TrainedModel,
                          scene, query_rc) -> None:
    h, w = model.config.height, model.config.width
    r, c = query_rc
    if not (0 <= r < h and 0 <= c < w):
        raise SystemExit(f"error: query {r},{c} outside {h}x{w}")
    decomp = model.attention_for(scene)
    i = r * w + c
    maps = {
        "total": decomp.total[i].reshape(h, w),
        "pairwise": None if not decomp.has_pairwise
        else decomp.pairwise_norm[i].reshape(h, w),
        "unary": None if not decomp.has_unary
        else np.asarray(decomp.unary_norm).reshape(h, w),
    }
    for term, values in maps.items():
        if values is None:
            continue
        img = out_dir / f"{stem}_{term}_r{r}_c{c}.pgm"
        lo, hi = pgm.write_pgm(img, values)
        pgm.write_sidecar(img.with_suffix(".txt"), lo, hi,
                          extra={"term": term, "query_row": r, "query_col": c,
                                 "variant": model.weights.variant.value})
    figures.attention_heatmaps(
        out_dir / f"{stem}_maps_r{r}_c{c}.png",
        {k: v for k, v in maps.items() if v is not None},
        query_rc=(r, c),
        title=f"{model.weights.variant.value} attention, query ({r},{c})",
    )


def cmd_analyze(args) -> int:
    models = [_load_model(p) for p in args.weights]
    blocked = [m for m in models if m.weights.variant is not None]
    if not blocked:
        print("error: analyze needs at least one weights file with an "
              "attention block", file=sys.stderr)
        return USAGE_ERROR
    base = blocked[0].config
    for m in models[1:]:
        c = m.config
        if (c.height, c.width, c.num_categories, c.feature_channels) != (
                base.height, base.width, base.num_categories, base.feature_channels):
            print("error: weights files disagree on input geometry", file=sys.stderr)
            return USAGE_ERROR
    _echo({"weights": " ".join(str(p) for p in args.weights),
           "samples": args.samples, "seed": args.seed,
           "query": args.query, "precision": precision_mode()})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    samples = [toyseg.generate_scene(toyseg._VAL_SCENE_OFFSET + j, base)
               for j in range(args.samples)]
    entries = [(m.weights.variant, m) for m in blocked]
    report = metrics.consistency_table(entries, samples, random_seed=args.seed)
    report.write_csv(out / "consistency.csv")
    figures.consistency_bars(out / "consistency.png", report)
    query = _parse_query(args.query)
    for path, model in zip(args.weights, models):
        if model.weights.variant is None:
            continue
        _export_decomposition(out, Path(path).stem, model, samples[0], query)
    print(f"wrote {out / 'consistency.csv'} and attention maps for "
          f"{len(blocked)} model(s) over {len(samples)} samples")
    return 0


def cmd_bench(args) -> int:
    _echo({"sweep": args.sweep, "latency": args.latency, "seed": args.seed,
           "precision": precision_mode()})
    sizes = [(32, 8, 8), (64, 8, 8)]
    if args.sweep:
        sizes += [(64, 16, 16), (128, 16, 16), (128, 32, 32), (256, 16, 16)]
    variants = list(blocks.VARIANTS)
    if args.latency:
        rows = bench.latency_bench(variants, sizes, reps=args.reps,
                                   warmup=args.warmup, seed=args.seed)
    else:
        rows = bench.complexity_rows(variants, sizes, seed=args.seed)
    print(bench.rows_to_table(rows), end="")
    print(bench.overhead_note())
    over = bench.overhead_report(512, [256, 1024, 4096, 9409, 65536])
    for row in over:
        print(f"  C=512 HW={row.positions}: space={row.space_pct()} "
              f"time={row.time_pct()}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "bench.csv").write_text(bench.rows_to_csv(rows))
        figures.overhead_curve(out / "overhead.png", over)
        print(f"wrote {out / 'bench.csv'}, {out / 'overhead.png'}")
    return 0


def cmd_export_maps(args) -> int:
    model = _load_model(args.weights)
    if model.weights.variant is None:
        print("error: weights file holds a baseline model without an "
              "attention block", file=sys.stderr)
        return USAGE_ERROR
    _echo({"weights": args.weights, "scene_seed": args.scene_seed,
           "query": args.query, "precision": precision_mode()})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scene = toyseg.generate_scene(args.scene_seed, model.config)
    _export_decomposition(out, f"scene{args.scene_seed}", model, scene,
                          _parse_query(args.query))
    print(f"wrote attention maps to {out}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dnllab",
        description="verification lab and toy benchmark for disentangled "
                    "non-local attention blocks",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("check", help="run all verification suites")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--instances", type=int, default=500)
    p.add_argument("--json", default=None, help="also write reports as JSON")
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--variant", default="all",
                   choices=["all"] + [v.value for v in blocks.VARIANTS])
    p.add_argument("--size", default="4x3x3", help="CxHxW block input")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--h", type=float, default=1e-5, help="central-difference step")
    p.add_argument("--tol", type=float, default=1e-6, help="relative tolerance")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train", help="train the toy segmentation benchmark")
    p.add_argument("--variant", default=None,
                   help="block variant token, or 'none' for the baseline")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--base-lr", dest="base_lr", type=float, default=None)
    p.add_argument("--config", default=None, help="flat key = value file")
    p.add_argument("--out", default="runs/latest")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("analyze", help="consistency table and map export")
    p.add_argument("--weights", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--samples", type=int, default=16)
    p.add_argument("--seed", type=int, default=0, help="random-attention row seed")
    p.add_argument("--query", default="16,16", help="query pixel ROW,COL for maps")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("bench", help="complexity tables")
    p.add_argument("--sweep", action="store_true", help="larger size grid")
    p.add_argument("--latency", action="store_true",
                   help="add wall-clock columns (not byte-reproducible)")
    p.add_argument("--reps", type=int, default=20)
    p.add_argument("--warmup", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("export-maps", help="attention maps for one query pixel")
    p.add_argument("--weights", required=True)
    p.add_argument("--scene-seed", dest="scene_seed", type=int, required=True)
    p.add_argument("--query", required=True, help="query pixel ROW,COL")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_maps)
    return parser


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "variant", None) == "none":
        args.variant = ""
    try:
        return args.func(args)
    except (ValueError, OSError, toyseg.GenerationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except toyseg.DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return SUITE_FAILURE


def main() -> None:
    raise SystemExit(run())


if __name__ == "__main__":
    main()
