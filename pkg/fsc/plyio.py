"""
PLY reading and writing for point clouds and triangle meshes, on top of
plyfile. Any encoding plyfile understands is read; files are written as
binary little-endian (or ascii) doubles so coordinates round-trip exactly.
"""

import logging
from pathlib import Path

import numpy as np
from errors import EmptyInput, InvalidCloud, PlyFormatError
from geom import PointCloud
from plyfile import PlyData, PlyElement, PlyParseError

logger = logging.getLogger(__name__)

AXES = ("x", "y", "z")
NORMAL_AXES = ("nx", "ny", "nz")
FACE_PROPERTIES = ("vertex_indices", "vertex_index")


def _read(path: Path) -> PlyData:
    try:
        return PlyData.read(str(path))
    except OSError as e:
        raise PlyFormatError(f"{path}: {e}") from e
    except (PlyParseError, ValueError, EOFError) as e:
        raise PlyFormatError(f"{path}: malformed PLY ({e})") from e


def _columns(vertex: PlyElement, names, path: Path) -> np.ndarray:
    table = np.column_stack([np.asarray(vertex[name], dtype=np.float64) for name in names])
    if not np.all(np.isfinite(table)):
        raise PlyFormatError(f"{path}: non-finite vertex values")
    return table


def _vertex_arrays(ply: PlyData, path: Path):
    if "vertex" not in ply:
        raise PlyFormatError(f"{path}: no vertex element")
    vertex = ply["vertex"]
    names = vertex.data.dtype.names or ()
    for axis in AXES:
        if axis not in names:
            raise PlyFormatError(f"{path}: vertex element lacks {axis}")
    if vertex.count == 0:
        raise EmptyInput(f"{path}: no vertices")
    points = _columns(vertex, AXES, path)
    normals = None
    if all(a in names for a in NORMAL_AXES):
        normals = _columns(vertex, NORMAL_AXES, path)
    return points, normals


def read_ply(path) -> PointCloud:
    """Read a point cloud (faces, if any, are ignored)"""
    path = Path(path)
    points, normals = _vertex_arrays(_read(path), path)
    try:
        return PointCloud(points, normals, path.stem)
    except InvalidCloud as e:
        raise PlyFormatError(f"{path}: {e}") from e


def _polygons(ply: PlyData, path: Path) -> list:
    if "face" not in ply:
        return []
    face = ply["face"]
    names = face.data.dtype.names or ()
    prop = next((p for p in FACE_PROPERTIES if p in names), None)
    if prop is None:
        raise PlyFormatError(f"{path}: face element has no vertex index list")
    return list(face[prop])


def read_mesh_ply(path):
    """Read vertices and faces into a TriangleMesh, fan-triangulating polygons"""
    from meshes import TriangleMesh

    path = Path(path)
    ply = _read(path)
    points, _ = _vertex_arrays(ply, path)
    triangles = [
        (polygon[0], polygon[i], polygon[i + 1])
        for polygon in _polygons(ply, path)
        for i in range(1, len(polygon) - 1)
    ]
    try:
        return TriangleMesh(points, np.asarray(triangles, dtype=np.int64).reshape(-1, 3))
    except ValueError as e:
        raise PlyFormatError(f"{path}: {e}") from e


def _vertex_element(points: np.ndarray, normals: np.ndarray | None) -> PlyElement:
    names = AXES + (NORMAL_AXES if normals is not None else ())
    table = np.empty(len(points), dtype=[(name, "<f8") for name in names])
    for i, axis in enumerate(AXES):
        table[axis] = points[:, i]
    if normals is not None:
        for i, axis in enumerate(NORMAL_AXES):
            table[axis] = normals[:, i]
    return PlyElement.describe(table, "vertex")


def _write(path: Path, elements: list[PlyElement], binary: bool):
    path.parent.mkdir(parents=True, exist_ok=True)
    PlyData(elements, text=not binary, byte_order="<").write(str(path))


def write_ply(path, cloud: PointCloud, binary: bool = True):
    """Write a cloud with double precision so coordinates round-trip exactly"""
    path = Path(path)
    _write(path, [_vertex_element(cloud.points, cloud.normals)], binary)
    logger.debug(f"Wrote {len(cloud)} points to {path}")


def write_mesh_ply(path, mesh, binary: bool = True):
    path = Path(path)
    faces = np.empty(len(mesh.triangles), dtype=[("vertex_indices", "<i4", (3,))])
    faces["vertex_indices"] = mesh.triangles
    elements = [
        _vertex_element(np.asarray(mesh.vertices), None),
        PlyElement.describe(faces, "face", len_types={"vertex_indices": "u1"}),
    ]
    _write(path, elements, binary)
    logger.debug(f"Wrote {len(mesh.vertices)} vertices and {len(faces)} faces to {path}")
