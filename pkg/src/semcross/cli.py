"""Command-line entry point.

One subcommand per invocation; outputs are files (checkpoints, CSVs,
SVGs) plus a short summary on stdout. Exit codes are stable so scripts
can branch on failure class: 0 success, 1 a verification report that
found failures, 2 config error, 3 data/format error, 4 numerical
divergence, 5 a verification harness error.

The SEMCROSS_SEED environment variable overrides the config seed for
every command that loads a run config, so one config file can drive a
seed series without editing.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

from .config import load_config
from .errors import (
    CapacityError,
    ConfigError,
    DivergenceError,
    FormatError,
    MissingTokenError,
    VerificationError,
)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4
EXIT_VERIFICATION = 5


def _load_run_config(path, threads=None):
    cfg = load_config(path)
    env_seed = os.environ.get("SEMCROSS_SEED")
    if env_seed is not None:
        try:
            seed = int(env_seed)
        except ValueError:
            raise ConfigError(f"SEMCROSS_SEED must be an integer, got {env_seed!r}") from None
        cfg = replace(cfg, seed=seed)
    if threads is not None:
        cfg = replace(cfg, threads=threads)
    return cfg.validate()


def _parse_values(raw):
    try:
        return [float(p) for p in raw.split(",") if p.strip() != ""]
    except ValueError:
        raise ConfigError(f"--values expects comma-separated numbers, got {raw!r}") from None


def cmd_train(args):
    from .training import train_run

    cfg = _load_run_config(args.config, args.threads)
    result = train_run(cfg, args.out)
    rep = result.test_report
    print(f"test accuracy {rep.mean_acc:.4f} +/- {rep.ci95:.4f} over {rep.n_episodes} episodes")
    print(f"wrote model.sct1, metrics.csv, config.txt to {args.out}")
    return EXIT_OK


def cmd_eval(args):
    from .checkpoint import read_tensors
    from .tensor import precision
    from .training import build_dataset, build_model, evaluate

    cfg = _load_run_config(args.config, args.threads)
    episodes = args.episodes if args.episodes is not None else cfg.eval_episodes
    try:
        entries = read_tensors(args.model)
    except OSError as e:
        raise FormatError(f"cannot read checkpoint {args.model}: {e}") from e
    with precision(cfg.precision):
        ds, table = build_dataset(cfg)
        model = build_model(cfg, table)
        model.load_state(entries)
        rep = evaluate(model, ds, args.split, episodes, cfg, threads=cfg.threads)
    print(
        f"{args.split} accuracy {rep.mean_acc:.4f} +/- {rep.ci95:.4f} "
        f"over {rep.n_episodes} episodes"
    )
    return EXIT_OK


def cmd_sweep(args):
    from .training import sweep

    cfg = _load_run_config(args.config, args.threads)
    sweep(cfg, args.param, _parse_values(args.values), args.out)
    print(f"wrote sweep.csv and sweep.svg to {args.out}")
    return EXIT_OK


def cmd_ablate(args):
    from .training import ablate

    cfg = _load_run_config(args.config, args.threads)
    csv_text = ablate(cfg, args.out)
    print(csv_text, end="")
    print(f"wrote ablation.csv and ablation.svg to {args.out}")
    return EXIT_OK


def cmd_gen_synthetic(args):
    from .manifest import write_manifest
    from .synth import SynthConfig, generate_synthetic, vectors_text

    cfg = _load_run_config(args.config)
    synth = SynthConfig(
        n_classes=cfg.synth_classes,
        items_per_class=cfg.synth_items,
        image_size=cfg.synth_image_size,
        twin_fraction=cfg.synth_twin_fraction,
        bimodal_fraction=cfg.synth_bimodal_fraction,
        semantic_dim=cfg.synth_semantic_dim,
        train_classes=cfg.synth_train,
        val_classes=cfg.synth_val,
        test_classes=cfg.synth_test,
        noise=cfg.synth_noise,
    )
    ds = generate_synthetic(synth, seed=cfg.seed)
    write_manifest(ds, args.out, codec=args.codec)
    vec_path = os.path.join(args.out, "vectors.txt")
    with open(vec_path, "w", encoding="utf-8") as f:
        f.write(vectors_text(ds))
    n_items = sum(c.n_items for c in ds.classes)
    print(f"wrote {len(ds.classes)} classes / {n_items} images to {args.out} ({args.codec})")
    print(f"wrote word vectors to {vec_path}")
    return EXIT_OK


def cmd_gradcheck(args):
    from .gradcheck import check_end_to_end, check_op_gradients

    if args.scope == "ops":
        results = check_op_gradients(seed=args.seed)
        failed = []
        for r in results:
            status = "ok" if r.passed else "FAIL"
            print(f"{r.op}: max_rel_err={r.max_rel_err:.3e} cases={r.cases} {status}")
            if not r.passed:
                failed.append(r.op)
        if failed:
            print(f"FAILED: {', '.join(failed)}", file=sys.stderr)
            return EXIT_CHECK_FAILED
        return EXIT_OK
    result = check_end_to_end(seed=args.seed)
    status = "ok" if result.passed else "FAIL"
    print(
        f"end2end: parameters={result.parameters} "
        f"max_rel_err={result.max_rel_err:.3e} {status}"
    )
    if not result.passed:
        worst = max(result.per_param, key=result.per_param.get)
        print(f"FAILED: worst parameter {worst}", file=sys.stderr)
        return EXIT_CHECK_FAILED
    return EXIT_OK


def cmd_plot(args):
    from .svgplot import plot_csv

    try:
        with open(args.csv, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise FormatError(f"cannot read CSV {args.csv}: {e}") from e
    svg = plot_csv(text, args.kind)
    with open(args.out, "w", encoding="utf-8") as f:
        f.write(svg)
    print(f"wrote {args.out}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="semcross",
        description="few-shot metric learning with semantic cross-attention",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model from a config file")
    p.add_argument("--config", required=True, help="key=value run config")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--threads", type=int, default=None, help="evaluation threads")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on fresh episodes")
    p.add_argument("--config", required=True)
    p.add_argument("--model", required=True, help="checkpoint file (model.sct1)")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--episodes", type=int, default=None, help="default: eval_episodes")
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("sweep", help="one training run per parameter value")
    p.add_argument("--config", required=True)
    p.add_argument("--param", required=True, choices=("lambda", "tau", "scale"))
    p.add_argument("--values", required=True, help="comma-separated numbers")
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("ablate", help="train the five comparison variants")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("gen-synthetic", help="render the synthetic benchmark to disk")
    p.add_argument("--config", required=True, help="synth_* keys and seed are used")
    p.add_argument("--out", required=True)
    p.add_argument("--codec", default="ppm", choices=("ppm", "sct1"))
    p.set_defaults(fn=cmd_gen_synthetic)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--scope", default="ops", choices=("ops", "end2end"))
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("plot", help="render a result CSV to SVG")
    p.add_argument("--csv", required=True)
    p.add_argument("--kind", required=True, choices=("sweep", "ablation", "curve"))
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_plot)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, CapacityError, MissingTokenError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as e:
        print(f"error: {e} (step {e.step})", file=sys.stderr)
        return EXIT_DIVERGED
    except VerificationError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VERIFICATION


if __name__ == "__main__":
    sys.exit(main())
