#!/usr/bin/env python3
"""
Command-line entry point: dataset generation, entropy analysis, training,
evaluation and single-cloud completion.

Usage:
    python fsc/cli.py gen --primitives 12 --out data/toy --seed 0
    python fsc/cli.py entropy --data data/toy --out entropy.csv --svg entropy.svg
    python fsc/cli.py train --data data/toy --preset tiny --steps 2000 --ckpt-out model.fsck
    python fsc/cli.py eval --ckpt model.fsck --data data/toy --out report.csv
    python fsc/cli.py complete --ckpt model.fsck --input partial.ply --output completed.ply

Exit codes: 0 success, 2 input error, 3 configuration error, 4 numeric failure.
"""

import argparse
import csv
import logging
import sys
import time
from pathlib import Path

import numpy as np
import telemetry
import torch
from charts import line_chart_svg, write_chart
from checkpoint import load_model
from config import (
    ABLATION_FLAGS,
    PARTIAL_LEVELS,
    ConfigError,
    EntropyConfig,
    GenerationConfig,
    LossConfig,
    OptimizerConfig,
    TrainConfig,
    get_config,
    log_resolved,
    preset,
)
from datagen import build_dataset, load_manifest, load_meshes, load_sample
from descriptor import RetentionCurve, average_curves, completion_curve, retention_curve
from errors import DegenerateHistogram, FscError
from geom import PointCloud
from meshes import primitive_corpus
from plyio import read_ply, write_ply
from pydantic import ValidationError
from training import (
    ModelPredictor,
    Trainer,
    evaluate,
    ground_truth_predictor,
    load_split,
    load_state,
    save_state,
    write_degradation_csv,
    write_report,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_CONFIG = 3
EXIT_NUMERIC = 4


def int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from e


def name_list(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def cmd_gen(args) -> int:
    config = GenerationConfig(
        seed=args.seed,
        gt_points=args.gt_points,
        partial_points=args.partial,
        levels=args.levels,
        coarse_points=args.coarse,
        nested=not args.no_nested,
        views=args.views,
        split=tuple(args.split),
        unseen_categories=args.unseen,
    )
    source = {"meshes": args.meshes and str(args.meshes), "primitives": args.primitives}
    log_resolved("gen", {**source, **config.model_dump(mode="json")})
    if args.meshes:
        meshes = load_meshes(args.meshes)
    else:
        meshes = primitive_corpus(args.primitives, args.seed)
    with telemetry.span("gen", meshes=len(meshes)):
        manifest = build_dataset(meshes, config, args.out, workers=get_config().threads)
    telemetry.count_samples(sum(len(e) for e in manifest.splits.values()), "gen")
    return EXIT_OK


def cmd_entropy(args) -> int:
    config = EntropyConfig(
        sizes=args.sizes,
        trials=args.trials,
        seed=args.seed,
        radius=args.radius,
        bins=args.bins,
        voxel=args.voxel,
    )
    log_resolved(
        "entropy",
        {
            "data": str(args.data),
            "split": args.split,
            "ckpt": args.ckpt and str(args.ckpt),
            **config.model_dump(),
        },
    )
    predictor = None
    if args.ckpt:
        model, _, _ = load_model(args.ckpt)
        predictor = ModelPredictor(model)
        accepts = range(model.config.min_points, model.config.max_points + 1)
    manifest = load_manifest(args.data)
    splits = list(manifest.splits) if args.split == "all" else [args.split]
    entries = [e for s in splits for e in manifest.entries(s)]
    if args.limit:
        entries = entries[: args.limit]

    curves, completed = [], []
    for entry in entries:
        gt = load_sample(args.data, entry, resolutions=()).gt
        sizes = [s for s in config.sizes if s <= len(gt)]
        if not sizes:
            logger.warning(f"Sample {entry.id} has only {len(gt)} points; skipped")
            continue
        try:
            curve = retention_curve(
                gt,
                sizes,
                config.trials,
                config.seed,
                config.radius,
                config.bins,
                config.voxel,
                workers=get_config().threads,
            )
        except DegenerateHistogram as e:
            logger.warning(f"Sample {entry.id}: {e}")
            continue
        curves.append(curve)
        if predictor is not None:
            inputs = [s for s in sizes if s in accepts]
            fractions = []
            if inputs:
                fractions = completion_curve(
                    gt,
                    inputs,
                    config.trials,
                    config.seed,
                    predictor.complete,
                    config.radius,
                    config.bins,
                    config.voxel,
                )
            completed.append(dict(zip(inputs, fractions, strict=True)))
        logger.debug(f"{entry.id}: fraction at {sizes[-1]} = {curve.mean_fraction[-1]:.4f}")
    if not curves:
        raise DegenerateHistogram("no sample produced a usable entropy curve")
    # samples smaller than the largest size drop those sizes; keep the common tail
    common = min(len(c.sizes) for c in curves)
    curves = [_tail(c, common) for c in curves]
    curve = average_curves(curves)
    completion = None if predictor is None else _completion_column(completed, curve.sizes)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as f:
        writer = csv.writer(f)
        header = ["size", "mean_S", "mean_fraction", "stddev"]
        rows = list(zip(curve.sizes, curve.mean_S, curve.mean_fraction, curve.stddev, strict=True))
        if completion is not None:
            header.append("completion_fraction")
            rows = [(*row, value) for row, value in zip(rows, completion, strict=True)]
        writer.writerow(header)
        writer.writerows(rows)
    logger.info(
        f"Entropy retention over {len(curves)} samples written to {out}; "
        f"fraction at {curve.sizes[-1]} points = {curve.mean_fraction[-1]:.4f}"
    )
    if args.svg:
        series = {"mean fraction": list(zip(curve.sizes, curve.mean_fraction, strict=True))}
        if completion is not None:
            series["completion fraction"] = [
                (s, v) for s, v in zip(curve.sizes, completion, strict=True) if v != ""
            ]
        svg = line_chart_svg(
            series,
            "points",
            "entropy fraction",
            "FPFH entropy retention",
            log_x=True,
        )
        write_chart(args.svg, svg)
    return EXIT_OK


def _completion_column(completed: list[dict[int, float]], sizes: list[int]) -> list:
    """Mean completed fraction per size; sizes the model does not accept stay blank"""
    column = []
    for size in sizes:
        values = [c[size] for c in completed if size in c]
        column.append(float(np.mean(values)) if values else "")
    return column


def _tail(curve: RetentionCurve, count: int) -> RetentionCurve:
    return RetentionCurve(
        curve.sizes[-count:],
        curve.mean_fraction[-count:],
        curve.trials,
        curve.seed,
        curve.mean_S[-count:],
        curve.stddev[-count:],
    )


def cmd_train(args) -> int:
    model_config = preset(args.preset)
    if args.disable:
        model_config = model_config.with_disabled(args.disable)
    config = TrainConfig(
        model=model_config,
        loss=LossConfig(
            alpha_ramp_steps=args.steps // 2,
            adv_weight=args.beta,
            gp_lambda=args.gp_lambda,
        ),
        optimizer=OptimizerConfig(lr=args.lr),
        steps=args.steps,
        batch_size=args.batch,
        levels=args.levels,
        seed=args.seed,
        log_every=args.log_every,
    )
    log_resolved("train", config.model_dump(mode="json"))

    manifest = load_manifest(args.data)
    samples = load_split(manifest, args.data, args.split)
    if args.limit:
        samples = samples[: args.limit]
    state = load_state(args.resume) if args.resume else None
    if state is not None:
        # resumed runs keep the stored model and loss settings; only the step target moves
        if state.config.model_copy(update={"steps": config.steps}) != config:
            logger.warning("Resuming with the configuration stored in the checkpoint")
        config = state.config.model_copy(update={"steps": config.steps})
        state.config = config
    trainer = Trainer(config, samples, state, args.log)
    remaining = max(0, config.steps - trainer.state.step)
    with telemetry.span("train", steps=remaining):
        state = trainer.run(remaining)
    save_state(args.ckpt_out, state)
    return EXIT_OK


def cmd_eval(args) -> int:
    log_resolved(
        "eval",
        {
            "ckpt": args.ckpt and str(args.ckpt),
            "data": str(args.data),
            "split": args.split,
            "levels": args.levels,
            "emd": args.emd,
            "mmd_split": args.mmd_split,
            "bypass": args.bypass,
        },
    )
    manifest = load_manifest(args.data)
    if args.bypass:
        predictor = ground_truth_predictor
    else:
        if not args.ckpt:
            raise ConfigError("eval needs --ckpt unless --bypass is given")
        model, _, _ = load_model(args.ckpt)
        predictor = ModelPredictor(model)
    result = evaluate(
        predictor,
        manifest,
        args.data,
        args.split,
        args.levels or None,
        with_emd=args.emd,
        mmd_split=args.mmd_split,
        workers=get_config().threads,
    )
    write_report(args.out, result)
    # the table goes out in both formats; the sibling takes the other suffix
    sibling = args.out.with_suffix(".csv" if args.out.suffix == ".json" else ".json")
    write_report(sibling, result)
    if args.curve:
        write_degradation_csv(args.curve, result)
    if args.svg:
        overall = result.overall()
        series = {"CD-l1 x1000": [(r.resolution, r.cd_l1) for r in overall]}
        write_chart(
            args.svg,
            line_chart_svg(series, "input points", "CD x1000", "Completion vs input size", log_x=True),
        )
    for report in result.overall():
        logger.info(f"{report.resolution} points: CD-l1 x1000 = {report.cd_l1:.3f}")
    if result.failures:
        logger.warning(f"{len(result.failures)} samples failed; see the report for details")
    return EXIT_OK


def cmd_complete(args) -> int:
    log_resolved("complete", {"ckpt": str(args.ckpt), "input": str(args.input), "output": str(args.output)})
    model, _, _ = load_model(args.ckpt)
    cloud = read_ply(args.input)
    points = torch.from_numpy(np.asarray(cloud.points, dtype=np.float32))
    started = time.perf_counter()
    with torch.no_grad():
        trace = model(points)
    elapsed = (time.perf_counter() - started) * 1000
    output = trace.Y_detail[0].double().numpy()
    write_ply(args.output, PointCloud(output, None, cloud.id))
    print(f"n_in={len(cloud)} m_out={len(output)} inference_ms={elapsed:.1f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fsc", description="Few-point shape completion toolkit"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="Generate a synthetic completion dataset")
    source = gen.add_mutually_exclusive_group()
    source.add_argument("--meshes", type=Path, help="Directory of <category>/<id>.ply meshes")
    source.add_argument("--primitives", type=int, default=12, help="Procedural meshes per category")
    gen.add_argument("--out", type=Path, required=True)
    gen.add_argument("--gt-points", type=int, default=16384)
    gen.add_argument("--partial", type=int, default=2048)
    gen.add_argument("--levels", type=int_list, default=list(PARTIAL_LEVELS))
    gen.add_argument("--coarse", type=int, default=512)
    gen.add_argument("--views", type=int, default=1)
    gen.add_argument("--split", type=int_list, default=[8, 1, 1])
    gen.add_argument("--unseen", type=name_list, default=[], help="Categories held out entirely")
    gen.add_argument("--no-nested", action="store_true", help="Downsample every level from the full partial")
    gen.add_argument("--seed", type=int, default=0)
    gen.set_defaults(handler=cmd_gen)

    entropy = sub.add_parser("entropy", help="FPFH entropy retention under downsampling")
    entropy.add_argument("--data", type=Path, required=True)
    entropy.add_argument("--split", default="all")
    entropy.add_argument("--sizes", type=int_list, default=EntropyConfig().sizes)
    entropy.add_argument("--trials", type=int, default=5)
    entropy.add_argument("--radius", type=float, default=None)
    entropy.add_argument("--bins", type=int, default=None)
    entropy.add_argument("--voxel", type=float, default=None)
    entropy.add_argument("--limit", type=int, default=0, help="Use only the first N samples")
    entropy.add_argument("--seed", type=int, default=0)
    entropy.add_argument("--out", type=Path, required=True)
    entropy.add_argument("--svg", type=Path)
    entropy.add_argument(
        "--ckpt", type=Path, help="Also score the model's completions of each subsample"
    )
    entropy.set_defaults(handler=cmd_entropy)

    train = sub.add_parser("train", help="Train the completion network")
    train.add_argument("--data", type=Path, required=True)
    train.add_argument("--split", default="train")
    train.add_argument("--preset", choices=["tiny", "full"], default="tiny")
    train.add_argument("--disable", type=name_list, default=[], help=f"Ablate: {','.join(ABLATION_FLAGS)}")
    train.add_argument("--steps", type=int, default=2000)
    train.add_argument("--batch", type=int, default=8)
    train.add_argument("--levels", type=int_list, default=[64])
    train.add_argument("--lr", type=float, default=1e-4)
    train.add_argument("--beta", type=float, default=0.1, help="Adversarial weight")
    train.add_argument("--gp-lambda", type=float, default=10.0)
    train.add_argument("--limit", type=int, default=0, help="Use only the first N samples")
    train.add_argument("--log-every", type=int, default=10)
    train.add_argument("--seed", type=int, default=0)
    train.add_argument("--resume", type=Path)
    train.add_argument("--ckpt-out", type=Path, required=True)
    train.add_argument("--log", type=Path, help="Per-step CSV log")
    train.set_defaults(handler=cmd_train)

    ev = sub.add_parser("eval", help="Evaluate a checkpoint on a dataset split")
    ev.add_argument("--ckpt", type=Path)
    ev.add_argument("--bypass", action="store_true", help="Score ground truth against itself")
    ev.add_argument("--data", type=Path, required=True)
    ev.add_argument("--split", default="test")
    ev.add_argument("--levels", type=int_list, default=[])
    ev.add_argument("--emd", action="store_true", help="Also report exact EMD on 512-point subsets")
    ev.add_argument("--mmd-split", help="Reference split for per-category MMD")
    ev.add_argument("--out", type=Path, required=True, help="report.csv or report.json")
    ev.add_argument("--curve", type=Path, help="Degradation curve CSV")
    ev.add_argument("--svg", type=Path)
    ev.set_defaults(handler=cmd_eval)

    comp = sub.add_parser("complete", help="Complete one partial cloud")
    comp.add_argument("--ckpt", type=Path, required=True)
    comp.add_argument("--input", type=Path, required=True)
    comp.add_argument("--output", type=Path, required=True)
    comp.set_defaults(handler=cmd_complete)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        env = get_config()
        if args.command == "entropy":
            args.radius = args.radius or env.fpfh_radius
            args.bins = args.bins or env.fpfh_bins
            args.voxel = args.voxel or env.fpfh_voxel
        telemetry.init_telemetry()
        return args.handler(args)
    except FscError as e:
        logger.error(f"{args.command}: {e}")
        return e.exit_code
    except ValidationError as e:
        logger.error(f"{args.command}: invalid configuration: {e}")
        return EXIT_CONFIG
    except OSError as e:
        logger.error(f"{args.command}: {e}")
        return EXIT_INPUT
    except ValueError as e:
        logger.error(f"{args.command}: invalid value: {e}")
        return EXIT_INPUT
    except RuntimeError as e:
        logger.exception(f"{args.command}: runtime failure: {e}")
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
