"""Adapter data model: per-layer low-rank factors, dense-update
materialization, flattening, and the on-disk ``.kmrg`` format.

Stored tensors are float32; all arithmetic on materialized updates is
done in float64.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from .errors import FormatError, KeyNotFound, ShapeError

PROJECTIONS = ("key", "query", "value", "output")
_PROJ_ORDER = {p: i for i, p in enumerate(PROJECTIONS)}

FORMAT_MAGIC = b"KMRG"
FORMAT_VERSION = 1


@dataclass(frozen=True, order=False)
class LayerKey:
    """Identifies one adapted projection matrix inside the model."""

    layer: int
    proj: str

    def __post_init__(self):
        if self.layer < 0:
            raise ShapeError(f"layer index must be >= 0, got {self.layer}")
        if self.proj not in _PROJ_ORDER:
            raise ShapeError(f"unknown projection {self.proj!r}; expected one of {PROJECTIONS}")

    def sort_key(self) -> tuple[int, int]:
        return (self.layer, _PROJ_ORDER[self.proj])

    def __lt__(self, other: "LayerKey") -> bool:
        return self.sort_key() < other.sort_key()

    def __str__(self) -> str:
        return f"{self.layer}.{self.proj}"


@dataclass(frozen=True)
class FactorPair:
    """Low-rank factors for one layer: ``a`` is r x d_in, ``b`` is d_out x r."""

    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.a, dtype=np.float32)
        b = np.asarray(self.b, dtype=np.float32)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        if a.ndim != 2 or b.ndim != 2:
            raise ShapeError("factor matrices must be 2-dimensional")
        if a.shape[0] != b.shape[1]:
            raise ShapeError(
                f"inner dimensions disagree: a is {a.shape}, b is {b.shape}"
            )
        if not (np.isfinite(a).all() and np.isfinite(b).all()):
            raise ShapeError("factor matrices must be finite")

    @property
    def rank(self) -> int:
        return self.a.shape[0]

    @property
    def d_in(self) -> int:
        return self.a.shape[1]

    @property
    def d_out(self) -> int:
        return self.b.shape[0]


@dataclass
class LoraAdapter:
    """A task-tagged collection of per-layer factor pairs.

    ``scale_numerator`` is the LoRA scaling numerator; the update applied
    for a layer is ``(scale_numerator / rank) * b @ a``.
    """

    task_id: str
    problem_type: str
    language: str
    rank: int
    scale_numerator: float
    layers: dict[LayerKey, FactorPair] = field(default_factory=dict)

    def __post_init__(self):
        if self.rank < 1:
            raise ShapeError(f"rank must be >= 1, got {self.rank}")
        if not self.layers:
            raise ShapeError("adapter must have at least one layer")
        for key, fp in self.layers.items():
            if fp.rank != self.rank:
                raise ShapeError(
                    f"layer {key} has rank {fp.rank}, adapter declares {self.rank}"
                )

    @property
    def scaling(self) -> float:
        return self.scale_numerator / self.rank

    def sorted_keys(self) -> list[LayerKey]:
        return sorted(self.layers, key=LayerKey.sort_key)

    def key_set(self) -> frozenset[LayerKey]:
        return frozenset(self.layers)


def materialize_delta(adapter: LoraAdapter, key: LayerKey) -> np.ndarray:
    """Dense update for one layer: ``scaling * b @ a`` in float64."""
    try:
        fp = adapter.layers[key]
    except KeyError:
        raise KeyNotFound(f"adapter {adapter.task_id!r} has no layer {key}") from None
    return adapter.scaling * (fp.b.astype(np.float64) @ fp.a.astype(np.float64))


def delta_map(adapter: LoraAdapter) -> dict[LayerKey, np.ndarray]:
    """Materialize every layer's dense update."""
    return {key: materialize_delta(adapter, key) for key in adapter.layers}


def flatten(delta: np.ndarray) -> np.ndarray:
    """Row-major vectorization of a dense update matrix."""
    delta = np.asarray(delta)
    if not np.isfinite(delta).all():
        raise ShapeError("cannot flatten a non-finite matrix")
    return delta.reshape(-1)


def zero_adapter_like(adapter: LoraAdapter, task_id: str = "zero") -> LoraAdapter:
    """An all-zero adapter with the same layer geometry (zero-shot stand-in)."""
    layers = {
        key: FactorPair(
            a=np.zeros_like(fp.a),
            b=np.zeros_like(fp.b),
        )
        for key, fp in adapter.layers.items()
    }
    return LoraAdapter(
        task_id=task_id,
        problem_type="none",
        language="none",
        rank=adapter.rank,
        scale_numerator=adapter.scale_numerator,
        layers=layers,
    )


# --------------------------------------------------------------------------
# Binary file format
#
# magic "KMRG" | version u16 | header_len u32 | UTF-8 JSON header |
# per header layer entry, in (layer, proj) order: A then B, float32
# row-major, little-endian, no padding.
# --------------------------------------------------------------------------

_HEAD = struct.Struct("<4sHI")


def _header_dict(adapter: LoraAdapter) -> dict:
    layers = []
    for key in adapter.sorted_keys():
        fp = adapter.layers[key]
        layers.append(
            {"layer": key.layer, "proj": key.proj, "d_in": fp.d_in, "d_out": fp.d_out}
        )
    return {
        "task_id": adapter.task_id,
        "problem_type": adapter.problem_type,
        "language": adapter.language,
        "rank": adapter.rank,
        "scale_numerator": adapter.scale_numerator,
        "layers": layers,
    }


def write_adapter(adapter: LoraAdapter, path: str | Path) -> None:
    """Serialize an adapter to ``path``; round-trips bit-exactly."""
    header = json.dumps(_header_dict(adapter)).encode("utf-8")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_HEAD.pack(FORMAT_MAGIC, FORMAT_VERSION, len(header)))
        fh.write(header)
        for key in adapter.sorted_keys():
            fp = adapter.layers[key]
            fh.write(np.ascontiguousarray(fp.a, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(fp.b, dtype="<f4").tobytes())
    tmp.replace(path)


def _read_exact(fh, n: int, what: str) -> bytes:
    offset = fh.tell()
    data = fh.read(n)
    if len(data) != n:
        raise FormatError(f"truncated payload while reading {what}", offset)
    return data


def read_adapter(path: str | Path) -> LoraAdapter:
    """Parse a ``.kmrg`` file, validating magic, version, and payload size."""
    with open(path, "rb") as fh:
        head = _read_exact(fh, _HEAD.size, "file header")
        magic, version, header_len = _HEAD.unpack(head)
        if magic != FORMAT_MAGIC:
            raise FormatError(f"bad magic bytes {magic!r}", 0)
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported format version {version}", 4)
        raw = _read_exact(fh, header_len, "JSON header")
        try:
            header = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"unparseable JSON header: {exc}", _HEAD.size) from None
        for field_name in ("task_id", "problem_type", "language", "rank",
                           "scale_numerator", "layers"):
            if field_name not in header:
                raise FormatError(f"header missing field {field_name!r}", _HEAD.size)
        rank = int(header["rank"])
        layers: dict[LayerKey, FactorPair] = {}
        for entry in header["layers"]:
            key = LayerKey(int(entry["layer"]), str(entry["proj"]))
            d_in, d_out = int(entry["d_in"]), int(entry["d_out"])
            a = np.frombuffer(
                _read_exact(fh, 4 * rank * d_in, f"A tensor of layer {key}"), dtype="<f4"
            ).reshape(rank, d_in)
            b = np.frombuffer(
                _read_exact(fh, 4 * d_out * rank, f"B tensor of layer {key}"), dtype="<f4"
            ).reshape(d_out, rank)
            try:
                layers[key] = FactorPair(a=a.copy(), b=b.copy())
            except ShapeError as exc:
                raise FormatError(f"invalid tensors for layer {key}: {exc}") from None
        trailing = fh.read(1)
        if trailing:
            raise FormatError("trailing bytes after declared payload", fh.tell() - 1)
    try:
        return LoraAdapter(
            task_id=str(header["task_id"]),
            problem_type=str(header["problem_type"]),
            language=str(header["language"]),
            rank=rank,
            scale_numerator=float(header["scale_numerator"]),
            layers=layers,
        )
    except ShapeError as exc:
        raise FormatError(f"header/tensor disagreement: {exc}") from None


def iter_adapter_files(directory: str | Path) -> Iterator[Path]:
    """Adapter files in a directory, sorted by name for determinism."""
    yield from sorted(Path(directory).glob("*.kmrg"))
