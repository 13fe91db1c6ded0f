#!/usr/bin/env python3
"""
Acceptance runs for the few-point completion toolkit

Checks the oracle properties (EMD, Chamfer, entropy), the model invariants,
and the slower qualitative runs: the entropy retention window on a
procedural corpus, a tiny-preset overfit, the degradation curve of that
checkpoint and a byte-for-byte determinism rerun of the whole pipeline.

Usage:
    python scripts/run_acceptance.py [--quick] [--work DIR] [--output FILE]
"""

import argparse
import filecmp
import itertools
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import torch

# Add source directory to Python path
sys.path.insert(0, str(Path(__file__).parent.parent / "fsc"))

from config import (  # noqa: E402
    EntropyConfig,
    GenerationConfig,
    LossConfig,
    TrainConfig,
    get_config,
    tiny_preset,
)
from datagen import build_dataset, sample_surface  # noqa: E402
from descriptor import FpfhHistogram, average_curves, fpfh_entropy, retention_curve  # noqa: E402
from geom import PointCloud  # noqa: E402
from meshes import primitive_corpus  # noqa: E402
from metrics import chamfer_l1, chamfer_l2, emd  # noqa: E402
from model import build_model  # noqa: E402
from training import (  # noqa: E402
    ModelPredictor,
    Trainer,
    evaluate,
    load_split,
    save_state,
    write_report,
)

DEGRADATION_LEVELS = [1024, 512, 256, 128, 64, 32, 16]
OVERFIT_TARGET = 25.0
RETENTION_WINDOW = (0.30, 0.65)
WINDOW = 200


class Colors:
    """Terminal color codes for pretty output"""

    GREEN = "\033[92m"
    RED = "\033[91m"
    YELLOW = "\033[93m"
    BLUE = "\033[94m"
    BOLD = "\033[1m"
    END = "\033[0m"


class AcceptanceRunner:
    """Runs each acceptance check and keeps a result record"""

    def __init__(self, work: Path, quick: bool = False):
        self.work = work
        self.quick = quick
        self.results: dict[str, dict] = {}
        self.overfit_checkpoint: Path | None = None

    def print_header(self, title: str):
        print(f"\n{Colors.BLUE}{Colors.BOLD}{'=' * 60}{Colors.END}")
        print(f"{Colors.BLUE}{Colors.BOLD}{title.center(60)}{Colors.END}")
        print(f"{Colors.BLUE}{Colors.BOLD}{'=' * 60}{Colors.END}")

    def record(self, name: str, passed: bool, seconds: float, **details):
        self.results[name] = {"passed": passed, "seconds": round(seconds, 2), **details}
        mark = f"{Colors.GREEN}✅" if passed else f"{Colors.RED}❌"
        print(f"{mark} {name} ({seconds:.1f}s) {details}{Colors.END}")

    def check_emd_oracle(self):
        self.print_header("EMD against brute force")
        started = time.perf_counter()
        rng = np.random.default_rng(0)
        worst = 0.0
        for _ in range(200):
            n = int(rng.integers(2, 8))
            a, b = rng.normal(size=(n, 3)), rng.normal(size=(n, 3))
            brute = min(
                np.mean(np.linalg.norm(a - b[list(p)], axis=1))
                for p in itertools.permutations(range(n))
            )
            worst = max(worst, abs(emd(PointCloud(a), PointCloud(b))[0] - brute))
        seconds = time.perf_counter() - started
        self.record("emd_oracle", worst < 1e-9 and seconds < 10, seconds, max_error=worst)

    def check_chamfer_oracle(self):
        self.print_header("Chamfer against exhaustive search")
        started = time.perf_counter()
        rng = np.random.default_rng(1)
        worst = 0.0
        for _ in range(100):
            a = rng.uniform(-1, 1, (int(rng.integers(1, 200)), 3))
            b = rng.uniform(-1, 1, (int(rng.integers(1, 200)), 3))
            diff = a[:, None, :] - b[None, :, :]
            l1 = np.abs(diff).sum(-1)
            l2 = (diff * diff).sum(-1)
            for value, table in (
                (chamfer_l1(PointCloud(a), PointCloud(b)), l1),
                (chamfer_l2(PointCloud(a), PointCloud(b)), l2),
            ):
                exhaustive = table.min(1).mean() + table.min(0).mean()
                worst = max(worst, abs(value - exhaustive))
        golden = (
            chamfer_l1(PointCloud([[0, 0, 0]]), PointCloud([[1, 1, 1]])) == 6.0
            and chamfer_l2(PointCloud([[0, 0, 0]]), PointCloud([[2, 0, 0]])) == 8.0
        )
        self.record(
            "chamfer_oracle",
            worst < 1e-9 and golden,
            time.perf_counter() - started,
            max_error=worst,
        )

    def check_uniform_entropy(self):
        started = time.perf_counter()
        value = fpfh_entropy(FpfhHistogram(np.full(108, 1 / 108), 36))
        error = abs(value - np.log(108))
        self.record("uniform_entropy", error < 1e-9, time.perf_counter() - started, error=error)

    def check_retention_window(self):
        self.print_header("Entropy retention on the procedural corpus")
        started = time.perf_counter()
        env = get_config()
        config = EntropyConfig(radius=env.fpfh_radius, bins=env.fpfh_bins, voxel=env.fpfh_voxel)
        meshes = primitive_corpus(4, 0, categories=("box", "cylinder", "torus", "sphere", "bracket"))
        curves = []
        for k, mesh in enumerate(meshes):
            gt = sample_surface(mesh, config.sizes[0], k)
            curves.append(
                retention_curve(
                    gt, config.sizes, config.trials, config.seed,
                    config.radius, config.bins, config.voxel, workers=env.threads,
                )
            )
            print(f"  {mesh.id}: fraction at 64 = {curves[-1].mean_fraction[-1]:.3f}")
        curve = average_curves(curves)
        fractions = curve.mean_fraction
        at_64 = fractions[curve.sizes.index(64)]
        monotone = all(b <= a + 0.02 for a, b in zip(fractions, fractions[1:], strict=False))
        low, high = RETENTION_WINDOW
        self.record(
            "retention_window",
            low <= at_64 <= high and monotone,
            time.perf_counter() - started,
            fraction_at_64=at_64,
            curve=dict(zip(curve.sizes, fractions, strict=True)),
        )

    def check_model_invariants(self):
        self.print_header("Model invariants")
        started = time.perf_counter()
        model, _ = build_model(tiny_preset(), seed=0)
        model.eval()
        rng = torch.Generator().manual_seed(0)
        worst = 0.0
        with torch.no_grad():
            for _ in range(50):
                X = torch.randn(1, 256, 3, generator=rng)
                base = model.encode(X)
                for _ in range(5):
                    perm = torch.randperm(256, generator=rng)
                    worst = max(worst, float((model.encode(X[:, perm]) - base).abs().max()))
            trace = model(torch.randn(2, 64, 3, generator=rng))
        identity = torch.equal(trace.Y_fine, trace.Y_coarse) and torch.equal(
            trace.f_fine, trace.f_coarse
        )
        self.record(
            "model_invariants",
            worst < 1e-5 and identity,
            time.perf_counter() - started,
            permutation_deviation=worst,
        )

    def _generate(self, root: Path, partial: int, levels: list[int], per_category: int):
        config = GenerationConfig(
            seed=0,
            gt_points=16384,
            partial_points=partial,
            levels=levels,
            coarse_points=512,
            split=(1, 0, 0),
        )
        meshes = primitive_corpus(per_category, 0, categories=("box", "cylinder", "torus", "sphere"))
        return build_dataset(meshes, config, root, workers=get_config().threads)

    def check_overfit(self):
        self.print_header("Overfit and degradation")
        started = time.perf_counter()
        root = self.work / "overfit"
        manifest = self._generate(root, 2048, DEGRADATION_LEVELS, per_category=2)
        samples = load_split(manifest, root, "train")
        steps = 300 if self.quick else 2000
        config = TrainConfig(
            model=tiny_preset(),
            loss=LossConfig(alpha_ramp_steps=steps // 2),
            steps=steps,
            batch_size=8,
            levels=[64],
            log_every=100,
        )
        trainer = Trainer(config, samples)
        cd_l1 = []
        for _ in range(steps):
            trainer.run(1)
            cd_l1.append(trainer.state.last["cd_l1"])
        self.overfit_checkpoint = self.work / "overfit.fsck"
        save_state(self.overfit_checkpoint, trainer.state)

        # sliding mean over the last WINDOW steps, read off once per window
        smoothed = np.convolve(cd_l1, np.ones(WINDOW) / WINDOW, "valid")
        averages = [float(v) for v in smoothed[::WINDOW]] + [float(smoothed[-1])]
        decreasing = smoothed[-1] < smoothed[0] and bool(np.all(np.diff(averages) <= 0))
        result = evaluate(ModelPredictor(trainer.state.model), manifest, root, "train", [64])
        final = result.overall()[0].cd_l1
        self.record(
            "overfit",
            final < OVERFIT_TARGET and decreasing,
            time.perf_counter() - started,
            cd_l1_x1000=final,
            window_averages=averages,
        )

        started = time.perf_counter()
        result = evaluate(
            ModelPredictor(trainer.state.model), manifest, root, "train", [2048, *DEGRADATION_LEVELS]
        )
        curve = {r.resolution: r.cd_l1 for r in result.overall()}
        finite = all(np.isfinite(v) for v in curve.values())
        self.record(
            "degradation",
            finite and curve[16] > curve[64],
            time.perf_counter() - started,
            curve=curve,
        )

    def _pipeline(self, root: Path) -> list[Path]:
        manifest = self._generate(root / "data", 256, [128, 64], per_category=1)
        samples = load_split(manifest, root / "data", "train")
        config = TrainConfig(model=tiny_preset(), steps=100, batch_size=4, levels=[64])
        state = Trainer(config, samples).run()
        save_state(root / "model.fsck", state)
        result = evaluate(ModelPredictor(state.model), manifest, root / "data", "train")
        write_report(root / "report.csv", result)
        return [Path("data/manifest.json"), Path("model.fsck"), Path("report.csv")]

    def check_determinism(self):
        self.print_header("Determinism")
        started = time.perf_counter()
        files = self._pipeline(self.work / "run_a")
        self._pipeline(self.work / "run_b")
        same = {
            str(f): filecmp.cmp(self.work / "run_a" / f, self.work / "run_b" / f, shallow=False)
            for f in files
        }
        self.record("determinism", all(same.values()), time.perf_counter() - started, files=same)

    def run(self) -> bool:
        print(f"{Colors.BLUE}{Colors.BOLD}Few-point completion acceptance{Colors.END}")
        self.check_emd_oracle()
        self.check_chamfer_oracle()
        self.check_uniform_entropy()
        self.check_model_invariants()
        if self.quick:
            print(f"{Colors.YELLOW}⚠️  --quick: retention window skipped, overfit shortened{Colors.END}")
        else:
            self.check_retention_window()
        self.check_overfit()
        self.check_determinism()

        passed = sum(r["passed"] for r in self.results.values())
        self.print_header("Summary")
        print(f"{passed}/{len(self.results)} checks passed")
        return passed == len(self.results)

    def save_results(self, output_file: Path):
        output_file = Path(output_file)
        output_file.parent.mkdir(parents=True, exist_ok=True)
        with open(output_file, "w") as f:
            json.dump(self.results, f, indent=2, default=str)
        print(f"\n💾 Results saved to: {output_file}")


def main():
    parser = argparse.ArgumentParser(description="Run the acceptance checks")
    parser.add_argument("--work", type=Path, default=Path("acceptance"), help="Scratch directory")
    parser.add_argument("--output", type=Path, default=Path("acceptance/results.json"))
    parser.add_argument(
        "--quick", action="store_true", help="Skip the retention run and shorten the overfit"
    )
    args = parser.parse_args()

    get_config()
    logging.getLogger("training").setLevel(logging.WARNING)
    runner = AcceptanceRunner(args.work, args.quick)
    success = runner.run()
    runner.save_results(args.output)
    sys.exit(0 if success else 1)


if __name__ == "__main__":
    main()
