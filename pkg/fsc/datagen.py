"""
Synthetic dataset construction.

Each mesh yields a dense ground-truth surface sample, a coarse farthest-point
version of it, and partial views rendered through an orthographic depth
camera and back-projected to 3D, then downsampled into a nested chain of
lower resolutions. All randomness derives from (master seed, sample id).
"""

import json
import logging
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import trimesh
from config import CameraConfig, GenerationConfig
from errors import EmptyInput, EmptyView, ManifestNotFound
from geom import PointCloud, farthest_point_sample, subsample_random
from meshes import TriangleMesh
from plyio import read_mesh_ply, read_ply, write_ply
from pydantic import BaseModel, Field, model_validator

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
UNSEEN_SPLIT = "unseen"
MANIFEST_NAME = "manifest.json"
BARYCENTRIC_TOLERANCE = 1e-12


@dataclass(frozen=True)
class SampleSeeds:
    gt: int
    view: int
    partial: int
    chain: int


@dataclass(eq=False)
class DatasetSample:
    id: str
    category: str
    gt: PointCloud
    coarse_gt: PointCloud
    partials: dict[int, PointCloud] = field(default_factory=dict)


class ManifestEntry(BaseModel):
    id: str
    category: str
    mesh: str
    viewpoint: list[float]
    seeds: dict[str, int]
    files: dict[str, str] = Field(description="gt, coarse and partial_<r> paths")


class Manifest(BaseModel):
    """Split listing plus the generation config that produced it"""

    config: GenerationConfig
    splits: dict[str, list[ManifestEntry]]

    @model_validator(mode="after")
    def _disjoint(self) -> "Manifest":
        seen: set[str] = set()
        for entries in self.splits.values():
            for entry in entries:
                if entry.id in seen:
                    raise ValueError(f"sample {entry.id} appears in more than one split")
                seen.add(entry.id)
        return self

    def entries(self, split: str) -> list[ManifestEntry]:
        return self.splits.get(split, [])

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, indent=2) + "\n"


def sample_seeds(master_seed: int, sample_id: str) -> SampleSeeds:
    """Independent per-sample streams from the master seed and the sample id"""
    sequence = np.random.SeedSequence([master_seed, zlib.crc32(sample_id.encode())])
    gt, view, partial, chain = (int(s) for s in sequence.generate_state(4))
    return SampleSeeds(gt, view, partial, chain)


def sample_surface(mesh: TriangleMesh, n: int, seed: int) -> PointCloud:
    """Area-weighted uniform samples on the mesh surface"""
    if len(mesh) == 0:
        raise EmptyInput("cannot sample an empty mesh")
    if n < 1:
        raise ValueError(f"sample size must be positive, got {n}")
    points, _ = trimesh.sample.sample_surface(mesh.surface, n, seed=seed)
    return PointCloud(np.asarray(points, dtype=np.float64), None, mesh.id)


def _camera_basis(eye: np.ndarray, target: np.ndarray):
    forward = target - eye
    forward = forward / np.sqrt(forward @ forward)
    up = np.array([0.0, 0.0, 1.0])
    if abs(forward @ up) > 0.99:
        up = np.array([0.0, 1.0, 0.0])
    right = np.cross(forward, up)
    right = right / np.sqrt(right @ right)
    return right, np.cross(right, forward), forward


def depth_image(
    mesh: TriangleMesh, eye: np.ndarray, target: np.ndarray, camera: CameraConfig
) -> np.ndarray:
    """Orthographic z-buffer of distances along the view direction; inf = empty"""
    right, up, forward = _camera_basis(eye, target)
    pixel = 2.0 * camera.extent / camera.height
    rel = mesh.vertices - eye
    xs = (rel @ right) / pixel + 0.5 * camera.width
    ys = 0.5 * camera.height - (rel @ up) / pixel
    zs = rel @ forward

    zbuf = np.full((camera.height, camera.width), np.inf)
    for a, b, c in mesh.triangles:
        x0, x1, x2 = xs[a], xs[b], xs[c]
        y0, y1, y2 = ys[a], ys[b], ys[c]
        area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if abs(area) < 1e-12:
            continue
        i0 = max(0, int(np.ceil(min(x0, x1, x2) - 0.5)))
        i1 = min(camera.width - 1, int(np.floor(max(x0, x1, x2) - 0.5)))
        j0 = max(0, int(np.ceil(min(y0, y1, y2) - 0.5)))
        j1 = min(camera.height - 1, int(np.floor(max(y0, y1, y2) - 0.5)))
        if i0 > i1 or j0 > j1:
            continue
        px, py = np.meshgrid(np.arange(i0, i1 + 1) + 0.5, np.arange(j0, j1 + 1) + 0.5)
        w0 = ((x1 - px) * (y2 - py) - (x2 - px) * (y1 - py)) / area
        w1 = ((x2 - px) * (y0 - py) - (x0 - px) * (y2 - py)) / area
        w2 = 1.0 - w0 - w1
        inside = (
            (w0 >= -BARYCENTRIC_TOLERANCE)
            & (w1 >= -BARYCENTRIC_TOLERANCE)
            & (w2 >= -BARYCENTRIC_TOLERANCE)
        )
        depth = w0 * zs[a] + w1 * zs[b] + w2 * zs[c]
        window = zbuf[j0 : j1 + 1, i0 : i1 + 1]
        closer = inside & (depth < window)
        window[closer] = depth[closer]
    return zbuf


def back_project(
    zbuf: np.ndarray, eye: np.ndarray, target: np.ndarray, camera: CameraConfig
) -> np.ndarray:
    """World coordinates of every finite depth pixel, in row-major pixel order"""
    right, up, forward = _camera_basis(eye, target)
    pixel = 2.0 * camera.extent / camera.height
    rows, cols = np.nonzero(np.isfinite(zbuf))
    u = (cols + 0.5 - 0.5 * camera.width) * pixel
    v = (0.5 * camera.height - rows - 0.5) * pixel
    depth = zbuf[rows, cols]
    return eye + u[:, None] * right + v[:, None] * up + depth[:, None] * forward


def render_partial(
    mesh: TriangleMesh,
    viewpoint,
    n: int,
    seed: int,
    camera: CameraConfig | None = None,
) -> PointCloud:
    """Back-projected depth view of the mesh resampled to exactly n points"""
    camera = camera or CameraConfig()
    if len(mesh) == 0:
        raise EmptyInput("cannot render an empty mesh")
    eye = np.asarray(viewpoint, dtype=np.float64)
    target = mesh.centroid()
    radius = np.sqrt(((mesh.vertices - target) ** 2).sum(axis=1)).max()
    if np.sqrt(((eye - target) ** 2).sum()) <= radius:
        raise ValueError("viewpoint must lie outside the mesh bounding sphere")

    visible = back_project(depth_image(mesh, eye, target, camera), eye, target, camera)
    if len(visible) == 0:
        raise EmptyView(f"no visible surface of {mesh.id or 'mesh'} from {eye.tolist()}")

    rng = np.random.default_rng(seed)
    replace = len(visible) < n
    if replace:
        logger.debug(f"Only {len(visible)} visible pixels for {n} points; resampling")
    chosen = rng.choice(len(visible), size=n, replace=replace)
    return PointCloud(visible[chosen], None, mesh.id)


def random_viewpoint(seed: int, distance: float) -> np.ndarray:
    rng = np.random.default_rng(seed)
    direction = rng.normal(size=3)
    return distance * direction / np.sqrt(direction @ direction)


def partial_chain(
    partial: PointCloud, levels: list[int], seed: int, nested: bool = True
) -> dict[int, PointCloud]:
    """Downsample a partial view to each level; nested levels subsample the previous one"""
    chain = {len(partial): partial}
    current = partial
    for k, level in enumerate(levels):
        source = current if nested else partial
        current = subsample_random(source, level, seed + k)
        chain[level] = current
    return chain


def _split_counts(n: int, weights: tuple[int, int, int]) -> tuple[int, int, int]:
    """Largest-remainder allocation; every weighted split gets a mesh once n allows it"""
    total = sum(weights)
    exact = np.array([n * w / total for w in weights])
    counts = np.floor(exact).astype(int)
    # ties go to the earlier split
    order = np.lexsort((np.arange(3), -(exact - counts)))
    counts[order[: n - counts.sum()]] += 1
    for i in range(3):
        if weights[i] > 0 and counts[i] == 0:
            donor = int(np.argmax(counts))
            if counts[donor] > 1:
                counts[donor] -= 1
                counts[i] += 1
    return tuple(int(c) for c in counts)


def assign_splits(meshes: list[TriangleMesh], config: GenerationConfig) -> dict[str, str]:
    """mesh id -> split, stratified by category and seeded by the master seed"""
    by_category: dict[str, list[str]] = {}
    for mesh in meshes:
        by_category.setdefault(mesh.category or "unknown", []).append(mesh.id)

    assignment = {}
    for c, category in enumerate(sorted(by_category)):
        ids = sorted(by_category[category])
        if category in config.unseen_categories:
            assignment.update(dict.fromkeys(ids, UNSEEN_SPLIT))
            continue
        order = np.random.default_rng([config.seed, c]).permutation(len(ids))
        n_train, n_val, _ = _split_counts(len(ids), config.split)
        for rank, i in enumerate(order):
            if rank < n_train:
                assignment[ids[i]] = "train"
            elif rank < n_train + n_val:
                assignment[ids[i]] = "val"
            else:
                assignment[ids[i]] = "test"
    return assignment


def _sample_ids(mesh: TriangleMesh, views: int) -> list[str]:
    if views == 1:
        return [mesh.id]
    return [f"{mesh.id}-v{k}" for k in range(views)]


def make_sample(
    mesh: TriangleMesh, sample_id: str, config: GenerationConfig
) -> tuple[DatasetSample, np.ndarray, SampleSeeds]:
    seeds = sample_seeds(config.seed, sample_id)
    gt = sample_surface(mesh, config.gt_points, seeds.gt)
    coarse = farthest_point_sample(gt, config.coarse_points)
    viewpoint = random_viewpoint(seeds.view, config.camera.distance) + mesh.centroid()
    partial = render_partial(mesh, viewpoint, config.partial_points, seeds.partial, config.camera)
    partials = partial_chain(partial, config.levels, seeds.chain, config.nested)
    sample = DatasetSample(sample_id, mesh.category or "unknown", gt, coarse, partials)
    return sample, viewpoint, seeds


def write_sample(root: Path, split: str, sample: DatasetSample) -> dict[str, str]:
    """Write one sample's clouds; returns paths relative to the dataset root"""
    directory = Path(split) / sample.id
    files = {"gt": str(directory / "gt.ply"), "coarse": str(directory / "coarse.ply")}
    for resolution in sample.partials:
        files[f"partial_{resolution}"] = str(directory / f"partial_{resolution}.ply")
    try:
        write_ply(root / files["gt"], sample.gt)
        write_ply(root / files["coarse"], sample.coarse_gt)
        for resolution, cloud in sample.partials.items():
            write_ply(root / files[f"partial_{resolution}"], cloud)
    except OSError as e:
        raise OSError(f"Failed to write sample {sample.id} under {root / directory}: {e}") from e
    return files


def build_dataset(
    meshes: list[TriangleMesh],
    config: GenerationConfig,
    root,
    workers: int = 1,
) -> Manifest:
    """Generate every sample and write the dataset tree and manifest under root"""
    if not meshes:
        raise EmptyInput("no meshes to build a dataset from")
    ids = [m.id for m in meshes]
    if any(i is None for i in ids) or len(set(ids)) != len(ids):
        raise ValueError("every mesh needs a unique id")
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)

    assignment = assign_splits(meshes, config)
    jobs = [
        (mesh, sample_id)
        for mesh in sorted(meshes, key=lambda m: m.id)
        for sample_id in _sample_ids(mesh, config.views)
    ]
    logger.info(f"Generating {len(jobs)} samples from {len(meshes)} meshes with {workers} workers")

    def run(job) -> ManifestEntry:
        mesh, sample_id = job
        sample, viewpoint, seeds = make_sample(mesh, sample_id, config)
        files = write_sample(root, assignment[mesh.id], sample)
        logger.debug(f"Wrote sample {sample_id} ({sample.category})")
        return ManifestEntry(
            id=sample_id,
            category=sample.category,
            mesh=mesh.id,
            viewpoint=[float(v) for v in viewpoint],
            seeds={"gt": seeds.gt, "view": seeds.view, "partial": seeds.partial, "chain": seeds.chain},
            files=files,
        )

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        entries = list(pool.map(run, jobs))

    splits: dict[str, list[ManifestEntry]] = {s: [] for s in SPLITS}
    for (mesh, _), entry in zip(jobs, entries, strict=True):
        splits.setdefault(assignment[mesh.id], []).append(entry)

    manifest = Manifest(config=config, splits=splits)
    (root / MANIFEST_NAME).write_text(manifest.to_json())
    logger.info(
        "Dataset written to "
        f"{root}: " + ", ".join(f"{s}={len(e)}" for s, e in manifest.splits.items())
    )
    return manifest


def load_manifest(root) -> Manifest:
    path = Path(root) / MANIFEST_NAME
    if not path.is_file():
        raise ManifestNotFound(f"manifest not found: {path}")
    return Manifest.model_validate_json(path.read_text())


def load_sample(root, entry: ManifestEntry, resolutions=None) -> DatasetSample:
    """Read a sample's clouds; ``resolutions`` limits which partials are loaded"""
    root = Path(root)
    partials = {}
    for key, relative in entry.files.items():
        if not key.startswith("partial_"):
            continue
        resolution = int(key.removeprefix("partial_"))
        if resolutions is None or resolution in resolutions:
            partials[resolution] = read_ply(root / relative)
    return DatasetSample(
        entry.id,
        entry.category,
        read_ply(root / entry.files["gt"]),
        read_ply(root / entry.files["coarse"]),
        partials,
    )


def load_meshes(directory) -> list[TriangleMesh]:
    """Meshes stored as ``<directory>/<category>/<id>.ply``, normalized to the unit ball"""
    directory = Path(directory)
    meshes = []
    for path in sorted(directory.glob("*/*.ply")):
        mesh = read_mesh_ply(path)
        mesh = TriangleMesh(mesh.vertices, mesh.triangles, path.stem, path.parent.name)
        meshes.append(mesh.normalized())
    if not meshes:
        raise EmptyInput(f"no meshes found under {directory}/<category>/*.ply")
    logger.info(f"Loaded {len(meshes)} meshes from {directory}")
    return meshes
