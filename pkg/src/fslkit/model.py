"""Feature extractor and base classifier with named parameters.

The backbone is a plain MLP (configurable widths, relu or identity
nonlinearity applied after every layer). The base classifier is an affine
map plus row softmax over the base classes. All parameters are named
DiffValue leaves; checkpoints serialize them as float32 tensors in a small
binary format with a trailing key=value metadata block.
"""

from __future__ import annotations

import hashlib
import logging
import struct
from pathlib import Path

import numpy as np

from . import diffmath as dm
from .rng import stream

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"FSLC"
CHECKPOINT_VERSION = 1

NONLINEARITIES = ("relu", "identity")


class CheckpointFormatError(ValueError):
    """A checkpoint file failed to parse or does not match the model."""


def _apply_nonlinearity(h: dm.DiffValue, kind: str) -> dm.DiffValue:
    if kind == "relu":
        return dm.relu(h)
    return h


class Model:
    """MLP feature extractor plus base classifier.

    ``widths`` includes the input dimension first and the embedding
    dimension last. Weights are stored (out, in); forward passes use
    x @ W^T + b.
    """

    def __init__(self, widths, num_base_classes: int, nonlinearity: str = "relu"):
        widths = tuple(int(w) for w in widths)
        if len(widths) < 2 or min(widths) < 1:
            raise ValueError("widths must list input dim, hidden dims..., embedding dim")
        if num_base_classes < 2:
            raise ValueError("need at least 2 base classes")
        if nonlinearity not in NONLINEARITIES:
            raise ValueError(f"nonlinearity must be one of {NONLINEARITIES}")
        self.widths = widths
        self.num_base_classes = int(num_base_classes)
        self.nonlinearity = nonlinearity
        self.params: dict[str, dm.DiffValue] = {}

    # -- construction -------------------------------------------------------

    @classmethod
    def init(cls, widths, num_base_classes: int, seed: int, nonlinearity: str = "relu") -> "Model":
        """Deterministic scaled-uniform (fan-in) initialization."""
        m = cls(widths, num_base_classes, nonlinearity)
        params: dict[str, np.ndarray] = {}
        for i, (fan_in, fan_out) in enumerate(zip(m.widths[:-1], m.widths[1:])):
            bound = 1.0 / np.sqrt(fan_in)
            g = stream(seed, "init", f"backbone.{i}")
            params[f"backbone.{i}.weight"] = g.uniform(-bound, bound, size=(fan_out, fan_in))
            params[f"backbone.{i}.bias"] = g.uniform(-bound, bound, size=fan_out)
        bound = 1.0 / np.sqrt(m.embed_dim)
        g = stream(seed, "init", "classifier")
        params["classifier.weight"] = g.uniform(-bound, bound, size=(num_base_classes, m.embed_dim))
        params["classifier.bias"] = g.uniform(-bound, bound, size=num_base_classes)
        m.set_parameters(params)
        return m

    @property
    def embed_dim(self) -> int:
        return self.widths[-1]

    @property
    def input_dim(self) -> int:
        return self.widths[0]

    def expected_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        for i, (fan_in, fan_out) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            shapes[f"backbone.{i}.weight"] = (fan_out, fan_in)
            shapes[f"backbone.{i}.bias"] = (fan_out,)
        shapes["classifier.weight"] = (self.num_base_classes, self.embed_dim)
        shapes["classifier.bias"] = (self.num_base_classes,)
        return shapes

    def set_parameters(self, values) -> None:
        """Install parameters from a name -> array/DiffValue mapping."""
        expected = self.expected_shapes()
        if set(values) != set(expected):
            missing = sorted(set(expected) - set(values))
            extra = sorted(set(values) - set(expected))
            raise CheckpointFormatError(f"parameter names mismatch: missing={missing} extra={extra}")
        fresh: dict[str, dm.DiffValue] = {}
        for name, shape in expected.items():
            v = values[name]
            arr = v.value if isinstance(v, dm.DiffValue) else np.asarray(v, dtype=np.float64)
            if arr.shape != shape:
                raise CheckpointFormatError(f"tensor {name!r} has shape {arr.shape}, expected {shape}")
            fresh[name] = dm.parameter(arr, name=name)
        self.params = fresh

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: np.array(p.value) for name, p in self.params.items()}

    def param_hash(self) -> str:
        """Hash of the float32-quantized parameters, stable across runs."""
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode("utf-8"))
            h.update(np.ascontiguousarray(self.params[name].value, dtype="<f4").tobytes())
        return h.hexdigest()

    def clone(self) -> "Model":
        m = Model(self.widths, self.num_base_classes, self.nonlinearity)
        m.set_parameters(self.state_arrays())
        return m

    # -- forward passes ------------------------------------------------------

    def embed(self, x) -> dm.DiffValue:
        """Map a (batch, input_dim) matrix to (batch, embed_dim) features."""
        h = x if isinstance(x, dm.DiffValue) else dm.constant(np.asarray(x, dtype=np.float64))
        if h.value.ndim != 2 or h.shape[1] != self.input_dim:
            raise ValueError(f"embed: expected (batch, {self.input_dim}) input, got {h.shape}")
        for i in range(len(self.widths) - 1):
            w = self.params[f"backbone.{i}.weight"]
            b = self.params[f"backbone.{i}.bias"]
            h = dm.add_rowvec(dm.matmul(h, dm.transpose(w)), b)
            h = _apply_nonlinearity(h, self.nonlinearity)
        return h

    def classify_base(self, z: dm.DiffValue) -> dm.DiffValue:
        """Row-softmax class probabilities over the base classes."""
        if z.value.ndim != 2 or z.shape[1] != self.embed_dim:
            raise ValueError(f"classify_base: expected (batch, {self.embed_dim}) input, got {z.shape}")
        logits = dm.add_rowvec(
            dm.matmul(z, dm.transpose(self.params["classifier.weight"])),
            self.params["classifier.bias"],
        )
        return dm.row_softmax(logits)


# ---------------------------------------------------------------------------
# checkpoint I/O


def save_checkpoint(model: Model, path, metadata: dict[str, str] | None = None) -> None:
    """Serialize named tensors (float32) plus a key=value metadata block."""
    tensors = model.state_arrays()
    meta = dict(metadata or {})
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            raw = name.encode("utf-8")
            arr = np.ascontiguousarray(tensors[name], dtype="<f4")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())
        lines = "".join(f"{k}={meta[k]}\n" for k in sorted(meta))
        fh.write(lines.encode("utf-8"))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    """Read tensors and metadata; validation against a model happens in
    :func:`load_into_model`."""

    def read_exact(fh, count, what):
        data = fh.read(count)
        if len(data) != count:
            raise CheckpointFormatError(f"truncated checkpoint: expected {count} bytes for {what}")
        return data

    with open(path, "rb") as fh:
        if read_exact(fh, 4, "magic") != CHECKPOINT_MAGIC:
            raise CheckpointFormatError("bad checkpoint magic")
        (version,) = struct.unpack("<I", read_exact(fh, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointFormatError(f"unsupported checkpoint version {version}")
        (count,) = struct.unpack("<I", read_exact(fh, 4, "tensor count"))
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", read_exact(fh, 2, "name length"))
            name = read_exact(fh, name_len, "tensor name").decode("utf-8")
            (rank,) = struct.unpack("<I", read_exact(fh, 4, "rank"))
            dims = struct.unpack(f"<{rank}Q", read_exact(fh, 8 * rank, "dims"))
            size = int(np.prod(dims)) if rank else 1
            payload = read_exact(fh, size * 4, f"payload of {name!r}")
            if name in tensors:
                raise CheckpointFormatError(f"duplicate tensor {name!r}")
            tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float64)
        meta_raw = fh.read().decode("utf-8")
    metadata: dict[str, str] = {}
    for line in meta_raw.splitlines():
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CheckpointFormatError(f"malformed metadata line {line!r}")
        metadata[key] = value
    return tensors, metadata


def load_into_model(model: Model, path, expected_config_hash: str | None = None) -> dict[str, str]:
    """Load a checkpoint into an existing architecture.

    Name/shape mismatches raise; a config-hash mismatch only logs a warning
    (override by passing expected_config_hash=None).
    """
    tensors, metadata = load_checkpoint(path)
    expected = model.expected_shapes()
    for name in expected:
        if name not in tensors:
            raise CheckpointFormatError(f"checkpoint is missing tensor {name!r}")
    for name in tensors:
        if name not in expected:
            raise CheckpointFormatError(f"checkpoint has unexpected tensor {name!r}")
        if tensors[name].shape != expected[name]:
            raise CheckpointFormatError(
                f"tensor {name!r} has shape {tensors[name].shape}, expected {expected[name]}"
            )
    stored = metadata.get("config_hash")
    if expected_config_hash is not None and stored is not None and stored != expected_config_hash:
        logger.warning(
            "checkpoint %s was produced under a different config (hash %s, current %s)",
            Path(path).name,
            stored,
            expected_config_hash,
        )
    model.set_parameters(tensors)
    return metadata
