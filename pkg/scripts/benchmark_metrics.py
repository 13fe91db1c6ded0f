#!/usr/bin/env python3
"""
Metric Benchmark Script for the few-point completion toolkit

Times the exact and entropic EMD solvers and both Chamfer variants over a
range of cloud sizes, and reports how far the entropic estimate sits from
the exact optimum.

Usage:
    python scripts/benchmark_metrics.py [--sizes 128,512,2048] [--repeats 3] [--output FILE]
"""

import argparse
import json
import statistics
import sys
import time
from pathlib import Path
from typing import Any

import numpy as np

# Add source directory to Python path
sys.path.insert(0, str(Path(__file__).parent.parent / "fsc"))

from geom import PointCloud  # noqa: E402
from metrics import chamfer_l1, chamfer_l2, emd, emd_approx  # noqa: E402

EXACT_LIMIT = 2048


class MetricBenchmark:
    """Benchmark distance computations at several cloud sizes"""

    def __init__(self, sizes: list[int], repeats: int, eps: float, iters: int):
        self.sizes = sizes
        self.repeats = repeats
        self.eps = eps
        self.iters = iters

    def time_call(self, fn, *args) -> tuple[float, Any]:
        started = time.perf_counter()
        value = fn(*args)
        return (time.perf_counter() - started) * 1000, value

    def benchmark_size(self, n: int) -> dict[str, Any]:
        """Time every metric on ``repeats`` random pairs of n-point clouds"""
        print(f"\nTesting n={n}")
        timings: dict[str, list[float]] = {"cd_l1": [], "cd_l2": [], "emd_approx": []}
        gaps = []
        if n <= EXACT_LIMIT:
            timings["emd"] = []

        for r in range(self.repeats):
            rng = np.random.default_rng(r)
            a = PointCloud(rng.normal(size=(n, 3)))
            b = PointCloud(rng.normal(size=(n, 3)))

            ms, _ = self.time_call(chamfer_l1, a, b)
            timings["cd_l1"].append(ms)
            ms, _ = self.time_call(chamfer_l2, a, b)
            timings["cd_l2"].append(ms)
            ms, estimate = self.time_call(emd_approx, a, b, self.eps, self.iters)
            timings["emd_approx"].append(ms)
            if "emd" in timings:
                ms, (exact, _) = self.time_call(emd, a, b)
                timings["emd"].append(ms)
                gaps.append((estimate.cost - exact) / exact)
            print(f"    Pair {r + 1}: entropic converged={estimate.converged}")

        result = {
            "n": n,
            "milliseconds": {
                name: {
                    "mean": statistics.mean(values),
                    "median": statistics.median(values),
                    "max": max(values),
                }
                for name, values in timings.items()
            },
        }
        if gaps:
            result["relative_gap"] = {"mean": statistics.mean(gaps), "max": max(gaps)}
        return result

    def print_result_summary(self, result: dict[str, Any]):
        print(f"\nn={result['n']}:")
        for name, stats in result["milliseconds"].items():
            print(f"  {name:<11} {stats['mean']:9.1f}ms (median {stats['median']:.1f}ms)")
        if "relative_gap" in result:
            print(f"  entropic gap: {result['relative_gap']['mean']:.2%} mean")

    def run_benchmark(self) -> list[dict[str, Any]]:
        print("=" * 60)
        print("Few-point completion metric benchmark")
        print("=" * 60)
        print(f"Sizes: {self.sizes}, {self.repeats} pairs each, eps={self.eps}")
        print("=" * 60)

        results = []
        for n in self.sizes:
            result = self.benchmark_size(n)
            results.append(result)
            self.print_result_summary(result)
        return results

    def save_results(self, results: list[dict[str, Any]], output_file: Path):
        output_file = Path(output_file)
        output_file.parent.mkdir(parents=True, exist_ok=True)
        with open(output_file, "w") as f:
            json.dump({"eps": self.eps, "iters": self.iters, "results": results}, f, indent=2)
        print(f"\n💾 Results saved to: {output_file}")


def main():
    parser = argparse.ArgumentParser(description="Benchmark Chamfer and EMD computations")
    parser.add_argument(
        "--sizes",
        type=lambda s: [int(v) for v in s.split(",")],
        default=[128, 512, 2048],
        help="Comma-separated cloud sizes",
    )
    parser.add_argument("--repeats", type=int, default=3, help="Random pairs per size")
    parser.add_argument("--eps", type=float, default=0.005, help="Entropic regularization")
    parser.add_argument("--iters", type=int, default=200, help="Sinkhorn iteration cap")
    parser.add_argument(
        "--output",
        type=Path,
        default="benchmark_metrics.json",
        help="Output file for results",
    )
    args = parser.parse_args()

    benchmark = MetricBenchmark(args.sizes, args.repeats, args.eps, args.iters)
    results = benchmark.run_benchmark()
    benchmark.save_results(results, args.output)
    print("\n✅ Benchmark complete!")


if __name__ == "__main__":
    main()
