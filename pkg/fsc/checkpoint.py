"""
Versioned tensor container used for model checkpoints and training state.

Layout: magic ``FSCK``, u32 LE format version, u32 LE header length, UTF-8
JSON header, then every tensor little-endian and row-major in header order.
"""

import json
import logging
import struct
from pathlib import Path

import numpy as np
import torch
from config import CheckpointMismatch, ModelConfig
from errors import InputError
from model import CompletionNetwork, Critics

logger = logging.getLogger(__name__)

MAGIC = b"FSCK"
FORMAT_VERSION = 1

_DTYPES = {
    "f32": np.dtype("<f4"),
    "f64": np.dtype("<f8"),
    "i64": np.dtype("<i8"),
    "u8": np.dtype("u1"),
}
_CODES = {dtype.str.lstrip("<|"): code for code, dtype in _DTYPES.items()}


def _code(array: np.ndarray) -> str:
    key = array.dtype.newbyteorder("<").str.lstrip("<|")
    if key not in _CODES:
        raise TypeError(f"unsupported tensor dtype {array.dtype}")
    return _CODES[key]


def _as_array(value) -> np.ndarray:
    if isinstance(value, torch.Tensor):
        value = value.detach().cpu().numpy()
    # keeps 0-d arrays 0-d, unlike ascontiguousarray
    return np.require(np.asarray(value), requirements="C")


def save_tensors(
    path,
    tensors: dict,
    kind: str,
    config: dict,
    metadata: dict | None = None,
):
    """Write tensors with an embedded config; output depends only on contents"""
    path = Path(path)
    table = []
    chunks = []
    offset = 0
    for name, value in tensors.items():
        array = _as_array(value)
        code = _code(array)
        data = array.astype(_DTYPES[code], copy=False).tobytes(order="C")
        table.append({"name": name, "shape": list(array.shape), "dtype": code, "offset": offset})
        chunks.append(data)
        offset += len(data)

    header = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "config": config,
        "metadata": metadata or {},
        "tensors": table,
    }
    encoded = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(encoded)))
        f.write(encoded)
        for chunk in chunks:
            f.write(chunk)
    logger.debug(f"Wrote {len(table)} tensors ({offset} bytes) to {path}")


def load_tensors(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a container; returns the header and a name -> array mapping"""
    path = Path(path)
    if not path.is_file():
        raise InputError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:4] != MAGIC or len(raw) < 12:
        raise CheckpointMismatch(f"{path}: not a checkpoint file")
    version, header_length = struct.unpack("<II", raw[4:12])
    if version != FORMAT_VERSION:
        raise CheckpointMismatch(
            f"{path}: format version {version}, this build reads {FORMAT_VERSION}"
        )
    try:
        header = json.loads(raw[12 : 12 + header_length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointMismatch(f"{path}: corrupt header ({e})") from e

    body = raw[12 + header_length :]
    tensors = {}
    for entry in header["tensors"]:
        dtype = _DTYPES[entry["dtype"]]
        count = int(np.prod(entry["shape"], dtype=np.int64))
        end = entry["offset"] + count * dtype.itemsize
        if end > len(body):
            raise CheckpointMismatch(f"{path}: tensor {entry['name']} is truncated")
        array = np.frombuffer(body, dtype=dtype, count=count, offset=entry["offset"])
        tensors[entry["name"]] = array.reshape(entry["shape"]).copy()
    return header, tensors


def model_tensors(model: CompletionNetwork, critics: Critics | None = None) -> dict:
    tensors = {f"model/{k}": v for k, v in model.state_dict().items()}
    if critics is not None:
        tensors.update({f"critics/{k}": v for k, v in critics.state_dict().items()})
    return tensors


def save_model(
    path,
    model: CompletionNetwork,
    critics: Critics | None = None,
    metadata: dict | None = None,
):
    save_tensors(
        path,
        model_tensors(model, critics),
        "model",
        model.config.model_dump(mode="json"),
        metadata,
    )
    logger.info(f"Saved model checkpoint to {path}")


def restore_module(module: torch.nn.Module, prefix: str, tensors: dict[str, np.ndarray], path):
    expected = module.state_dict()
    stored = {k.removeprefix(prefix): v for k, v in tensors.items() if k.startswith(prefix)}
    missing = sorted(set(expected) - set(stored))
    unexpected = sorted(set(stored) - set(expected))
    if missing or unexpected:
        raise CheckpointMismatch(
            f"{path}: parameters do not match the embedded config "
            f"(missing {missing[:3]}, unexpected {unexpected[:3]})"
        )
    state = {}
    for name, reference in expected.items():
        array = stored[name]
        if tuple(array.shape) != tuple(reference.shape):
            raise CheckpointMismatch(
                f"{path}: {prefix}{name} has shape {tuple(array.shape)}, "
                f"config expects {tuple(reference.shape)}"
            )
        state[name] = torch.from_numpy(array).to(reference.dtype)
    module.load_state_dict(state)


def load_model(
    path, expected: ModelConfig | None = None, with_critics: bool = False
) -> tuple[CompletionNetwork, Critics | None, dict]:
    """Rebuild the network from the embedded config and validate every shape"""
    header, tensors = load_tensors(path)
    raw = header["config"]
    if header.get("kind") == "train_state":
        raw = raw.get("model", {})
    try:
        config = ModelConfig.model_validate(raw)
    except ValueError as e:
        raise CheckpointMismatch(f"{path}: invalid embedded config ({e})") from e
    if expected is not None and expected != config:
        raise CheckpointMismatch(f"{path}: checkpoint config differs from the requested one")

    model = CompletionNetwork(config)
    restore_module(model, "model/", tensors, path)
    critics = None
    if with_critics:
        critics = Critics(config)
        restore_module(critics, "critics/", tensors, path)
    model.eval()
    return model, critics, header
