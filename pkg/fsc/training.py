"""
Losses, adversarial objectives, the optimization loop and evaluation sweeps.

The generator loss is EMD(Y_coarse, coarse ground truth) + alpha * CD-l2
(Y_detail, ground truth) plus beta times the WGAN generator terms of the two
revision critics. Critics are trained with a gradient penalty.
"""

import csv
import json
import logging
import time
from collections.abc import Callable
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import telemetry
import torch
from checkpoint import load_tensors, model_tensors, restore_module, save_tensors
from config import CheckpointMismatch, LossConfig, TrainConfig
from datagen import DatasetSample, Manifest, load_sample
from errors import FscError, InputError, InsufficientPoints, NonFiniteLoss, SizeMismatch
from geom import PointCloud, farthest_point_sample, subsample_random
from metrics import (
    REPORT_SCALE,
    MetricsReport,
    chamfer_l1,
    chamfer_l1_torch,
    chamfer_l2,
    chamfer_l2_torch,
    emd,
    emd_approx_torch,
    mmd,
)
from model import CompletionNetwork, Critics, build_model, check_gradients

logger = logging.getLogger(__name__)

AVERAGE_DECAY = 0.99
EMD_EVAL_POINTS = 512
MMD_REFERENCE_POINTS = 2048
SEED_RANGE = 2**31 - 1


def completion_loss(
    Y_coarse: torch.Tensor,
    Y_detail: torch.Tensor,
    coarse_gt: torch.Tensor,
    gt: torch.Tensor,
    alpha: float,
    loss: LossConfig,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Returns the total, its EMD (d1) and Chamfer (d2) components, and the
    detail output's L1 Chamfer x1000 (cd_l1) for monitoring only"""
    if Y_coarse.shape != coarse_gt.shape:
        raise SizeMismatch(
            f"coarse output {tuple(Y_coarse.shape)} does not match target {tuple(coarse_gt.shape)}"
        )
    d1, converged = emd_approx_torch(Y_coarse, coarse_gt, loss.emd_eps, loss.emd_iters)
    if not converged:
        logger.debug("Sinkhorn stopped before convergence inside the training loss")
    d2 = chamfer_l2_torch(Y_detail, gt)
    total = d1 + alpha * d2
    if not torch.isfinite(total):
        raise NonFiniteLoss(f"completion loss is not finite (d1={float(d1)}, d2={float(d2)})")
    with torch.no_grad():
        cd_l1 = float(chamfer_l1_torch(Y_detail, gt)) * REPORT_SCALE
    return total, {"d1": float(d1), "d2": float(d2), "cd_l1": cd_l1}


def gradient_penalty(
    critic: torch.nn.Module, real: torch.Tensor, fake: torch.Tensor, seed: int
) -> torch.Tensor:
    """E[(||grad D(x_hat)|| - 1)^2] at seeded uniform interpolates x_hat"""
    generator = torch.Generator().manual_seed(int(seed))
    shape = (real.shape[0],) + (1,) * (real.dim() - 1)
    t = torch.rand(shape, generator=generator, dtype=real.dtype)
    mixed = (t * real.detach() + (1 - t) * fake.detach()).requires_grad_(True)
    score = critic(mixed)
    (grad,) = torch.autograd.grad(score.sum(), mixed, create_graph=True, allow_unused=True)
    if grad is None:
        grad = torch.zeros_like(mixed)
    norm = torch.sqrt((grad * grad).flatten(1).sum(dim=1) + 1e-12)
    return ((norm - 1.0) ** 2).mean()


def critic_losses(
    critic: torch.nn.Module,
    real: torch.Tensor,
    fake: torch.Tensor,
    gp_lambda: float,
    seed: int,
) -> tuple[torch.Tensor, torch.Tensor]:
    """WGAN-GP critic loss (fake detached) and the generator term -E[D(fake)]"""
    loss = critic(fake.detach()).mean() - critic(real.detach()).mean()
    if gp_lambda > 0:
        loss = loss + gp_lambda * gradient_penalty(critic, real, fake, seed)
    generator_term = -critic(fake).mean()
    if not (torch.isfinite(loss) and torch.isfinite(generator_term)):
        raise NonFiniteLoss(f"critic loss is not finite ({float(loss)})")
    return loss, generator_term


@dataclass
class TrainingBatch:
    resolution: int
    partial: torch.Tensor
    coarse_gt: torch.Tensor
    gt: torch.Tensor
    gt_feature: torch.Tensor
    ids: list[str] = field(default_factory=list)


@dataclass
class TrainState:
    config: TrainConfig
    model: CompletionNetwork
    critics: Critics
    optimizer: torch.optim.Adam
    critic_optimizer: torch.optim.Adam | None
    rng: np.random.Generator
    step: int = 0
    averages: dict[str, float] = field(default_factory=dict)
    last: dict[str, float] = field(default_factory=dict)


def init_state(config: TrainConfig) -> TrainState:
    model, critics = build_model(config.model, config.seed)
    opt = config.optimizer
    optimizer = torch.optim.Adam(model.parameters(), lr=opt.lr, betas=(opt.beta1, opt.beta2))
    critic_optimizer = None
    if any(True for _ in critics.parameters()):
        critic_optimizer = torch.optim.Adam(
            critics.parameters(), lr=opt.critic_lr, betas=(opt.beta1, opt.beta2)
        )
    rng = np.random.default_rng(config.seed)
    return TrainState(config, model, critics, optimizer, critic_optimizer, rng)


def partial_at(sample: DatasetSample, resolution: int, seed: int) -> PointCloud:
    """Stored partial, or a random subset of the smallest larger stored partial"""
    if resolution in sample.partials:
        return sample.partials[resolution]
    larger = [r for r in sample.partials if r > resolution]
    if not larger:
        raise InsufficientPoints(f"sample {sample.id} has no partial with {resolution}+ points")
    return subsample_random(sample.partials[min(larger)], resolution, seed)


def coarse_target(sample: DatasetSample, n: int) -> PointCloud:
    """n-point farthest-point target; a prefix of a longer stored FPS order"""
    if len(sample.coarse_gt) >= n:
        return sample.coarse_gt.subset(np.arange(n))
    return farthest_point_sample(sample.gt, n)


def _resample(cloud: PointCloud, n: int, rng: np.random.Generator) -> np.ndarray:
    chosen = rng.choice(len(cloud), size=n, replace=len(cloud) < n)
    return cloud.points[chosen]


def make_batch(state: TrainState, samples: list[DatasetSample]) -> TrainingBatch:
    """Draw a batch at one uniformly chosen resolution using the state's RNG"""
    if not samples:
        raise InputError("no training samples")
    config = state.config
    rng = state.rng
    resolution = int(config.levels[rng.integers(len(config.levels))])
    picks = rng.choice(len(samples), size=config.batch_size, replace=len(samples) < config.batch_size)

    partial, coarse, gt, gt_feature = [], [], [], []
    for i in picks:
        sample = samples[int(i)]
        partial.append(partial_at(sample, resolution, int(rng.integers(SEED_RANGE))).points)
        coarse.append(coarse_target(sample, config.model.n_coarse).points)
        gt.append(_resample(sample.gt, config.loss.loss_gt_points, rng))
        gt_feature.append(_resample(sample.gt, config.loss.feature_gt_points, rng))

    def stack(arrays):
        return torch.from_numpy(np.stack(arrays)).to(torch.float32)

    return TrainingBatch(
        resolution,
        stack(partial),
        stack(coarse),
        stack(gt),
        stack(gt_feature),
        [samples[int(i)].id for i in picks],
    )


def _critic_step(state: TrainState, batch: TrainingBatch, seeds: np.ndarray) -> dict[str, float]:
    model, critics, loss_cfg = state.model, state.critics, state.config.loss
    with torch.no_grad():
        trace = model(batch.partial)
        real_feature = model.encode(batch.gt_feature)

    values = {}
    for k in range(loss_cfg.n_critic):
        state.critic_optimizer.zero_grad()
        total = torch.zeros(())
        if critics.feature is not None:
            loss, _ = critic_losses(
                critics.feature, real_feature, trace.f_fine, loss_cfg.gp_lambda, seeds[2 * k]
            )
            total = total + loss
            values["critic_feature"] = float(loss)
        if critics.point is not None:
            loss, _ = critic_losses(
                critics.point, batch.coarse_gt, trace.Y_fine, loss_cfg.gp_lambda, seeds[2 * k + 1]
            )
            total = total + loss
            values["critic_point"] = float(loss)
        total.backward()
        check_gradients(critics, "critics.")
        state.critic_optimizer.step()
    return values


def train_step(state: TrainState, batch: TrainingBatch) -> TrainState:
    """Critic updates for both revision stages, then one generator update"""
    loss_cfg = state.config.loss
    alpha = loss_cfg.alpha(state.step)
    seeds = state.rng.integers(SEED_RANGE, size=2 * max(1, loss_cfg.n_critic))

    values = {}
    if state.critic_optimizer is not None and loss_cfg.n_critic > 0:
        values.update(_critic_step(state, batch, seeds))

    model, critics = state.model, state.critics
    state.optimizer.zero_grad()
    trace = model(batch.partial)
    total, components = completion_loss(
        trace.Y_coarse, trace.Y_detail, batch.coarse_gt, batch.gt, alpha, loss_cfg
    )
    values.update(components)
    if loss_cfg.adv_weight > 0:
        adversarial = torch.zeros(())
        if critics.feature is not None:
            adversarial = adversarial - critics.feature(trace.f_fine).mean()
        if critics.point is not None:
            adversarial = adversarial - critics.point(trace.Y_fine).mean()
        values["adversarial"] = float(adversarial)
        total = total + loss_cfg.adv_weight * adversarial
    if not torch.isfinite(total):
        raise NonFiniteLoss(f"step {state.step}: generator loss is not finite ({values})")
    values["total"] = float(total)

    total.backward()
    check_gradients(model, "model.")
    state.optimizer.step()

    for name, value in values.items():
        previous = state.averages.get(name, value)
        state.averages[name] = AVERAGE_DECAY * previous + (1 - AVERAGE_DECAY) * value
    state.last = values
    state.step += 1
    return state


def _optimizer_tensors(prefix: str, optimizer: torch.optim.Optimizer, module) -> dict:
    names = [name for name, _ in module.named_parameters()]
    stored = optimizer.state_dict()["state"]
    tensors = {}
    for index, name in enumerate(names):
        entry = stored.get(index)
        if entry is None:
            continue
        for key in ("step", "exp_avg", "exp_avg_sq"):
            tensors[f"{prefix}{name}/{key}"] = torch.as_tensor(entry[key])
    return tensors


def _restore_optimizer(prefix: str, optimizer: torch.optim.Optimizer, module, tensors: dict):
    names = [name for name, _ in module.named_parameters()]
    state_dict = optimizer.state_dict()
    restored = {}
    for index, name in enumerate(names):
        if f"{prefix}{name}/step" not in tensors:
            continue
        restored[index] = {
            key: torch.from_numpy(tensors[f"{prefix}{name}/{key}"])
            for key in ("step", "exp_avg", "exp_avg_sq")
        }
    state_dict["state"] = restored
    optimizer.load_state_dict(state_dict)


def save_state(path, state: TrainState):
    """Everything needed to continue training bit-for-bit"""
    tensors = model_tensors(state.model, state.critics)
    tensors.update(_optimizer_tensors("optim/", state.optimizer, state.model))
    if state.critic_optimizer is not None:
        tensors.update(_optimizer_tensors("critic_optim/", state.critic_optimizer, state.critics))
    metadata = {
        "step": state.step,
        "rng": state.rng.bit_generator.state,
        "averages": state.averages,
    }
    save_tensors(path, tensors, "train_state", state.config.model_dump(mode="json"), metadata)
    logger.info(f"Saved training state at step {state.step} to {path}")


def load_state(path) -> TrainState:
    header, tensors = load_tensors(path)
    if header.get("kind") != "train_state":
        raise CheckpointMismatch(f"{path}: not a training state checkpoint")
    try:
        config = TrainConfig.model_validate(header["config"])
    except ValueError as e:
        raise CheckpointMismatch(f"{path}: invalid embedded config ({e})") from e

    state = init_state(config)
    restore_module(state.model, "model/", tensors, path)
    restore_module(state.critics, "critics/", tensors, path)
    _restore_optimizer("optim/", state.optimizer, state.model, tensors)
    if state.critic_optimizer is not None:
        _restore_optimizer("critic_optim/", state.critic_optimizer, state.critics, tensors)
    metadata = header["metadata"]
    state.rng.bit_generator.state = metadata["rng"]
    state.step = int(metadata["step"])
    state.averages = {k: float(v) for k, v in metadata["averages"].items()}
    return state


LOG_COLUMNS = (
    "step",
    "resolution",
    "d1",
    "d2",
    "cd_l1",
    "adversarial",
    "critic_feature",
    "critic_point",
    "total",
    "seconds",
)


class Trainer:
    """Runs train_step over a fixed sample list and appends rows to a CSV log"""

    def __init__(
        self,
        config: TrainConfig,
        samples: list[DatasetSample],
        state: TrainState | None = None,
        log_path=None,
    ):
        self.config = config
        self.samples = samples
        self.state = state or init_state(config)
        self.log_path = Path(log_path) if log_path else None

    def run(self, steps: int | None = None) -> TrainState:
        steps = self.config.steps if steps is None else steps
        writer = None
        handle = None
        if self.log_path is not None:
            self.log_path.parent.mkdir(parents=True, exist_ok=True)
            handle = open(self.log_path, "w", newline="")
            writer = csv.DictWriter(handle, fieldnames=LOG_COLUMNS, extrasaction="ignore")
            writer.writeheader()
        logger.info(
            f"Training for {steps} steps from step {self.state.step} on {len(self.samples)} samples"
        )
        try:
            for _ in range(steps):
                batch = make_batch(self.state, self.samples)
                started = time.perf_counter()
                with telemetry.span("train_step", step=self.state.step):
                    train_step(self.state, batch)
                seconds = time.perf_counter() - started
                row = {
                    "step": self.state.step,
                    "resolution": batch.resolution,
                    "seconds": round(seconds, 4),
                    **self.state.last,
                }
                if writer is not None:
                    writer.writerow(row)
                telemetry.record_step(self.state.step, seconds, self.state.last)
                if self.state.step % self.config.log_every == 0:
                    logger.info(
                        f"step {self.state.step}: total={self.state.last['total']:.5f} "
                        f"d1={self.state.last['d1']:.5f} d2={self.state.last['d2']:.6f} "
                        f"({batch.resolution} pts, {seconds:.2f}s)"
                    )
        finally:
            if handle is not None:
                handle.close()
        return self.state


def load_split(manifest: Manifest, root, split: str) -> list[DatasetSample]:
    entries = manifest.entries(split)
    if not entries:
        raise InputError(f"split '{split}' has no samples")
    return [load_sample(root, entry) for entry in entries]


# Evaluation

Predictor = Callable[[DatasetSample, PointCloud], PointCloud]


class ModelPredictor:
    """Completes a partial cloud with the network and returns Y_detail"""

    def __init__(self, model: CompletionNetwork):
        self.model = model.eval()

    def complete(self, partial: PointCloud) -> PointCloud:
        points = torch.from_numpy(np.asarray(partial.points, dtype=np.float32))
        with torch.no_grad():
            trace = self.model(points)
        return PointCloud(trace.Y_detail[0].double().numpy(), None, partial.id)

    def __call__(self, sample: DatasetSample, partial: PointCloud) -> PointCloud:
        completed = self.complete(partial)
        return PointCloud(completed.points, None, sample.id)


def ground_truth_predictor(sample: DatasetSample, partial: PointCloud) -> PointCloud:
    """Ignores the input; evaluating it must give zero Chamfer distances"""
    return sample.gt


@dataclass
class EvaluationResult:
    reports: list[MetricsReport]
    failures: dict[str, str] = field(default_factory=dict)

    def overall(self) -> list[MetricsReport]:
        return [r for r in self.reports if r.category == "all"]


def _emd_subset(output: PointCloud, gt: PointCloud, seed: int) -> float:
    n = min(len(output), len(gt), EMD_EVAL_POINTS)
    rng = np.random.default_rng(seed)
    a = output.subset(rng.choice(len(output), size=n, replace=False))
    b = gt.subset(rng.choice(len(gt), size=n, replace=False))
    return emd(a, b)[0]


def _reference_sets(manifest: Manifest, root, split: str) -> dict[str, list[PointCloud]]:
    references: dict[str, list[PointCloud]] = {}
    for entry in manifest.entries(split):
        gt = load_sample(root, entry, resolutions=()).gt
        if len(gt) > MMD_REFERENCE_POINTS:
            gt = subsample_random(gt, MMD_REFERENCE_POINTS, 0)
        references.setdefault(entry.category, []).append(gt)
    return references


def _summarize(category: str, resolution: int, rows: list[dict[str, float]]) -> MetricsReport:
    values = {}
    for key in ("cd_l1", "cd_l2", "emd", "mmd"):
        present = [row[key] for row in rows if key in row]
        values[key] = REPORT_SCALE * float(np.mean(present)) if present else None
    return MetricsReport(category=category, resolution=resolution, count=len(rows), **values)


def evaluate(
    predictor: Predictor,
    manifest: Manifest,
    root,
    split: str = "test",
    resolutions: list[int] | None = None,
    with_emd: bool = False,
    mmd_split: str | None = None,
    workers: int = 1,
) -> EvaluationResult:
    """Mean metrics x1000 per (category, resolution) plus an overall row per resolution.

    Resolutions that were not stored are subsampled from the smallest larger
    stored partial. Samples that fail to load are reported and skipped.
    """
    entries = manifest.entries(split)
    if not entries:
        raise InputError(f"split '{split}' has no samples")
    resolutions = list(resolutions or manifest.config.resolutions)
    references = _reference_sets(manifest, root, mmd_split) if mmd_split else None

    def run(entry):
        try:
            sample = load_sample(root, entry)
            values = {}
            for resolution in resolutions:
                seed = entry.seeds.get("chain", 0) + resolution
                output = predictor(sample, partial_at(sample, resolution, seed))
                row = {
                    "cd_l1": chamfer_l1(output, sample.gt),
                    "cd_l2": chamfer_l2(output, sample.gt),
                }
                if with_emd:
                    row["emd"] = _emd_subset(output, sample.gt, seed)
                if references and references.get(sample.category):
                    row["mmd"] = mmd(output, references[sample.category])[0]
                values[resolution] = row
            return values, None
        except (FscError, OSError) as e:
            logger.warning(f"Skipping sample {entry.id}: {e}")
            return None, str(e)

    with telemetry.span("evaluate", split=split, samples=len(entries)):
        with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
            results = list(pool.map(run, entries))
    telemetry.count_samples(len(entries), "evaluate")

    failures = {entry.id: error for entry, (_, error) in zip(entries, results, strict=True) if error}
    reports = []
    for resolution in resolutions:
        by_category: dict[str, list[dict]] = {}
        for entry, (values, _) in zip(entries, results, strict=True):
            if values is not None:
                by_category.setdefault(entry.category, []).append(values[resolution])
        for category in sorted(by_category):
            reports.append(_summarize(category, resolution, by_category[category]))
        everything = [row for rows in by_category.values() for row in rows]
        if everything:
            reports.append(_summarize("all", resolution, everything))
    logger.info(
        f"Evaluated {len(entries) - len(failures)} of {len(entries)} samples "
        f"in split '{split}' at {len(resolutions)} resolutions"
    )
    return EvaluationResult(reports, failures)


REPORT_COLUMNS = ("category", "resolution", "cd_l1", "cd_l2", "emd", "mmd", "count")


def write_report(path, result: EvaluationResult):
    """CSV (one row per category and resolution) or JSON, chosen by suffix"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix == ".json":
        payload = {
            "reports": [r.model_dump() for r in result.reports],
            "failures": result.failures,
        }
        path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
        return
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=REPORT_COLUMNS)
        writer.writeheader()
        for report in result.reports:
            writer.writerow(report.model_dump())


def write_degradation_csv(path, result: EvaluationResult):
    """Overall metrics against input resolution, largest first"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=REPORT_COLUMNS[1:-1], extrasaction="ignore")
        writer.writeheader()
        for report in sorted(result.overall(), key=lambda r: -r.resolution):
            writer.writerow(report.model_dump())
