"""
Triangle meshes and the procedural primitive corpus used in place of a
CAD dataset: boxes, cylinders, tori, spheres, L-brackets and lamps.

Geometry lives in a ``trimesh.Trimesh`` built with ``process=False`` so
vertex order and face order are exactly what the caller passed in.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
import trimesh
from errors import EmptyInput

logger = logging.getLogger(__name__)

CATEGORIES = ("box", "cylinder", "torus", "sphere", "bracket", "lamp")

AREA_EPSILON = 1e-14


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    """Vertices and index triples; zero-area triangles are dropped on load"""

    vertices: np.ndarray
    triangles: np.ndarray
    id: str | None = None
    category: str | None = None
    surface: trimesh.Trimesh = field(init=False, repr=False)

    def __post_init__(self):
        vertices = np.array(self.vertices, dtype=np.float64).reshape(-1, 3)
        triangles = np.array(self.triangles, dtype=np.int64).reshape(-1, 3)
        if triangles.size and (triangles.min() < 0 or triangles.max() >= len(vertices)):
            raise ValueError("triangle index out of range")
        if not np.all(np.isfinite(vertices)):
            raise ValueError("mesh vertices must be finite")
        surface = trimesh.Trimesh(vertices=vertices.copy(), faces=triangles.copy(), process=False)
        if triangles.size:
            keep = np.asarray(surface.area_faces) > AREA_EPSILON
            if not keep.all():
                logger.debug(f"Dropping {int((~keep).sum())} degenerate triangles")
                triangles = triangles[keep]
                surface = trimesh.Trimesh(
                    vertices=vertices.copy(), faces=triangles.copy(), process=False
                )
        vertices.setflags(write=False)
        triangles.setflags(write=False)
        object.__setattr__(self, "vertices", vertices)
        object.__setattr__(self, "triangles", triangles)
        object.__setattr__(self, "surface", surface)

    @classmethod
    def from_trimesh(cls, mesh: trimesh.Trimesh, id=None, category=None) -> "TriangleMesh":
        return cls(np.asarray(mesh.vertices), np.asarray(mesh.faces), id, category)

    def __len__(self) -> int:
        return len(self.triangles)

    def corners(self) -> np.ndarray:
        """(t, 3, 3) array of triangle corner coordinates"""
        if len(self) == 0:
            return np.empty((0, 3, 3))
        return np.asarray(self.surface.triangles)

    def areas(self) -> np.ndarray:
        if len(self) == 0:
            return np.empty(0)
        return np.asarray(self.surface.area_faces)

    def centroid(self) -> np.ndarray:
        """Area-weighted centroid of the surface"""
        if len(self) == 0:
            raise EmptyInput("an empty mesh has no centroid")
        return np.average(self.surface.triangles_center, axis=0, weights=self.areas())

    def normalized(self) -> "TriangleMesh":
        """Center on the area-weighted centroid and fit inside the unit ball"""
        if len(self) == 0:
            raise EmptyInput("cannot normalize an empty mesh")
        shifted = self.vertices - self.centroid()
        extent = np.linalg.norm(shifted, axis=1).max()
        return TriangleMesh(shifted / extent, self.triangles, self.id, self.category)

    def merged(self, other: "TriangleMesh") -> "TriangleMesh":
        joined = trimesh.util.concatenate([self.surface, other.surface])
        return TriangleMesh.from_trimesh(joined, self.id, self.category)

    def transformed(self, rotation=None, translation=None) -> "TriangleMesh":
        matrix = np.eye(4)
        if rotation is not None:
            matrix[:3, :3] = rotation
        if translation is not None:
            matrix[:3, 3] = translation
        moved = self.surface.copy()
        moved.apply_transform(matrix)
        return TriangleMesh.from_trimesh(moved, self.id, self.category)


def _placed(center) -> np.ndarray:
    return trimesh.transformations.translation_matrix(np.asarray(center, dtype=np.float64))


def box(size=(1.0, 1.0, 1.0), center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    return TriangleMesh.from_trimesh(trimesh.creation.box(extents=size, transform=_placed(center)))


def cylinder(radius=0.5, height=1.0, segments=32, center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    mesh = trimesh.creation.cylinder(
        radius=radius, height=height, sections=segments, transform=_placed(center)
    )
    return TriangleMesh.from_trimesh(mesh)


def cone(radius=0.5, height=1.0, segments=32, center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    """Closed cone whose base disc is centered at ``center``"""
    mesh = trimesh.creation.cone(radius=radius, height=height, sections=segments)
    mesh.apply_transform(_placed(center))
    return TriangleMesh.from_trimesh(mesh)


def sphere(radius=1.0, subdivisions=3, center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    mesh = trimesh.creation.icosphere(subdivisions=subdivisions, radius=radius)
    mesh.apply_transform(_placed(center))
    return TriangleMesh.from_trimesh(mesh)


def torus(major=0.7, minor=0.25, rings=32, segments=16) -> TriangleMesh:
    mesh = trimesh.creation.torus(
        major_radius=major, minor_radius=minor, major_sections=rings, minor_sections=segments
    )
    return TriangleMesh.from_trimesh(mesh)


def bracket(length=1.0, height=0.8, width=0.5, thickness=0.15) -> TriangleMesh:
    """L-shaped bracket: a base plate joined to an upright plate"""
    base = box((length, width, thickness), (0.0, 0.0, 0.5 * thickness))
    upright = box(
        (thickness, width, height),
        (-0.5 * length + 0.5 * thickness, 0.0, thickness + 0.5 * height),
    )
    return base.merged(upright)


def lamp(base_radius=0.35, pole_height=1.0, shade_radius=0.45) -> TriangleMesh:
    """Disc base, thin pole and a conical shade"""
    base = cylinder(base_radius, 0.08, 32, (0.0, 0.0, 0.04))
    pole = cylinder(0.04, pole_height, 12, (0.0, 0.0, 0.08 + 0.5 * pole_height))
    shade = cone(shade_radius, 0.4, 32, (0.0, 0.0, 0.08 + 0.7 * pole_height))
    return base.merged(pole).merged(shade)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q


def make_primitive(category: str, rng: np.random.Generator) -> TriangleMesh:
    """One randomly proportioned, randomly oriented member of a category"""
    if category == "box":
        mesh = box(tuple(rng.uniform(0.3, 1.2, size=3)))
    elif category == "cylinder":
        mesh = cylinder(rng.uniform(0.2, 0.6), rng.uniform(0.5, 1.5))
    elif category == "torus":
        major = rng.uniform(0.5, 0.9)
        mesh = torus(major, rng.uniform(0.1, 0.4) * major)
    elif category == "sphere":
        mesh = sphere(1.0).transformed(np.diag(rng.uniform(0.6, 1.0, size=3)))
    elif category == "bracket":
        mesh = bracket(
            rng.uniform(0.6, 1.2),
            rng.uniform(0.5, 1.0),
            rng.uniform(0.3, 0.7),
            rng.uniform(0.08, 0.2),
        )
    elif category == "lamp":
        mesh = lamp(rng.uniform(0.2, 0.4), rng.uniform(0.6, 1.2), rng.uniform(0.3, 0.6))
    else:
        raise ValueError(f"Unknown primitive category: {category}")
    return mesh.transformed(random_rotation(rng)).normalized()


def primitive_corpus(
    per_category: int, seed: int, categories=CATEGORIES
) -> list[TriangleMesh]:
    """``per_category`` meshes for each category, ids ``<category>-<k>``"""
    meshes = []
    for c, category in enumerate(categories):
        rng = np.random.default_rng([seed, c])
        for k in range(per_category):
            mesh = make_primitive(category, rng)
            meshes.append(
                TriangleMesh(mesh.vertices, mesh.triangles, f"{category}-{k:03d}", category)
            )
    return meshes
