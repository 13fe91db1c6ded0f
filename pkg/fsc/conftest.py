"""
Pytest configuration and shared fixtures for the completion toolkit tests.
"""

import os
from unittest.mock import patch

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

settings.register_profile(
    "fsc",
    max_examples=25,
    deadline=None,
    suppress_health_check=[HealthCheck.function_scoped_fixture],
)
settings.load_profile(os.getenv("HYPOTHESIS_PROFILE", "fsc"))


@pytest.fixture
def rng():
    """Seeded generator so fixtures built from it are reproducible"""
    return np.random.default_rng(1234)


@pytest.fixture
def sphere_cloud(rng):
    """512 points on the unit sphere"""
    from geom import PointCloud

    points = rng.normal(size=(512, 3))
    points /= np.linalg.norm(points, axis=1, keepdims=True)
    return PointCloud(points, None, "sphere")


@pytest.fixture
def cube_cloud(rng):
    """1024 points on the surface of a unit cube, with outward face normals"""
    from geom import PointCloud

    points = rng.uniform(-0.5, 0.5, size=(1024, 3))
    axis = rng.integers(0, 3, size=1024)
    sign = rng.choice([-0.5, 0.5], size=1024)
    points[np.arange(1024), axis] = sign
    normals = np.zeros_like(points)
    normals[np.arange(1024), axis] = np.sign(sign)
    return PointCloud(points, normals, "cube")


@pytest.fixture
def small_generation_config():
    """Generation settings small enough for tests to build a dataset in seconds"""
    from config import CameraConfig, GenerationConfig

    return GenerationConfig(
        seed=7,
        gt_points=512,
        partial_points=128,
        levels=[64, 32],
        coarse_points=32,
        split=(2, 1, 1),
        camera=CameraConfig(width=64, height=48),
    )


@pytest.fixture(scope="session")
def toy_dataset(tmp_path_factory):
    """A generated dataset over two primitive categories, shared across tests"""
    from config import CameraConfig, GenerationConfig
    from datagen import build_dataset
    from meshes import primitive_corpus

    root = tmp_path_factory.mktemp("toy")
    config = GenerationConfig(
        seed=3,
        gt_points=512,
        partial_points=128,
        levels=[64, 32],
        coarse_points=32,
        split=(2, 1, 1),
        camera=CameraConfig(width=64, height=48),
    )
    meshes = primitive_corpus(4, 3, categories=("box", "sphere"))
    manifest = build_dataset(meshes, config, root)
    return root, manifest


@pytest.fixture
def micro_model_config():
    """The tiny preset shrunk further so forward and backward passes are instant"""
    from config import ModelConfig, tiny_preset

    return ModelConfig.model_validate(
        {
            **tiny_preset().model_dump(),
            "n_coarse": 16,
            "d1": 32,
            "d2": 32,
            "heads": 2,
            "memory": 8,
            "point_hidden": 16,
            "decoder_hidden": 32,
            "local_width": 8,
            "fold_width": 16,
            "critic_width": 16,
            "ball_k": 4,
        }
    )


@pytest.fixture(autouse=True)
def reset_global_state():
    """Reset global state before each test."""
    with patch("config.config", None), patch("telemetry.telemetry", None):
        yield
    torch.use_deterministic_algorithms(False)


# Test data validation
def pytest_configure(config):
    """Configure pytest with custom markers."""
    config.addinivalue_line(
        "markers", "slow: marks tests as slow (deselect with '-m \"not slow\"')"
    )
    config.addinivalue_line("markers", "integration: marks tests as integration tests")
    config.addinivalue_line("markers", "unit: marks tests as unit tests")


# Test collection customization
def pytest_collection_modifyitems(config, items):
    """Modify test collection to add markers automatically."""
    for item in items:
        if "test_integration" in item.name or "Integration" in str(item.cls):
            item.add_marker(pytest.mark.integration)
        elif "Slow" in str(item.cls):
            item.add_marker(pytest.mark.slow)
        else:
            item.add_marker(pytest.mark.unit)
