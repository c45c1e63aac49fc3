"""Seeded weight generation and the little-endian weight file format.

Generator
---------
Scalars come from one splitmix64 stream seeded with ``config.seed``. Output
``i`` (1-based) is the standard splitmix64 finaliser applied to
``seed + i * 0x9E3779B97F4A7C15 (mod 2**64)``. Each 64-bit output ``z`` becomes
``u = (z >> 11) * 2**-53`` in [0, 1) and then ``(2u - 1) * s`` with
``s = 1 / sqrt(d_hidden)``, rounded to float32. Norm scales are
``1 + (2u - 1) * s``. Arrays draw consecutively from the stream, row-major, in
the order listed by :func:`weight_order`.

File format (all little-endian)
-------------------------------
====================  ==========================================================
bytes 0-7             magic ``b"KVDWGT\\0\\0"``
int64                 format version (1)
int64 x 7             n_layers, d_hidden, n_q_heads, n_kv_heads, d_head, d_mlp,
                      vocab_size
uint64                seed
int64 x 2             bytes_per_elem, max_positions
int64 x n_layers      layer kinds: 0 for global, window size for sliding
float64 x 2           rope_base, rms_eps
float32 arrays        row-major, in :func:`weight_order` order
====================  ==========================================================
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import LayerKind, ModelConfig

MAGIC = b"KVDWGT\0\0"
FORMAT_VERSION = 1

_MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def splitmix64(seed: int, count: int, offset: int = 0) -> np.ndarray:
    """Outputs ``offset+1 .. offset+count`` of the splitmix64 stream for ``seed``."""
    idx = np.arange(offset + 1, offset + count + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = np.uint64(seed & _MASK64) + idx * np.uint64(GOLDEN_GAMMA)
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


class UniformStream:
    """Sequential reader over the splitmix64 stream, yielding values in [-1, 1)."""

    def __init__(self, seed: int):
        self.seed = seed
        self.position = 0

    def draw(self, count: int) -> np.ndarray:
        z = splitmix64(self.seed, count, self.position)
        self.position += count
        u = (z >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return 2.0 * u - 1.0


@dataclass(frozen=True)
class LayerWeights:
    gamma_attn: np.ndarray
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    gamma_mlp: np.ndarray
    w_gate: np.ndarray
    w_up: np.ndarray
    w_down: np.ndarray


@dataclass(frozen=True)
class Weights:
    embedding: np.ndarray
    layers: tuple[LayerWeights, ...]
    gamma_final: np.ndarray
    w_vocab: np.ndarray

    def arrays(self):
        """(name, array) pairs in file order."""
        yield "embedding", self.embedding
        for i, lw in enumerate(self.layers):
            for name in LAYER_FIELDS:
                yield f"layers.{i}.{name}", getattr(lw, name)
        yield "gamma_final", self.gamma_final
        yield "w_vocab", self.w_vocab

    def checksum(self) -> str:
        h = hashlib.sha256()
        for _, arr in self.arrays():
            h.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        return h.hexdigest()

    def equals(self, other: "Weights") -> bool:
        return all(np.array_equal(a, b) for (_, a), (_, b) in zip(self.arrays(), other.arrays()))


LAYER_FIELDS = ("gamma_attn", "w_q", "w_k", "w_v", "w_o", "gamma_mlp", "w_gate", "w_up", "w_down")


def weight_order(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Names and shapes of every array, in generation and file order."""
    d, dh = config.d_hidden, config.d_head
    q_dim, kv_dim = config.n_q_heads * dh, config.n_kv_heads * dh
    layer_shapes = {
        "gamma_attn": (d,),
        "w_q": (d, q_dim),
        "w_k": (d, kv_dim),
        "w_v": (d, kv_dim),
        "w_o": (q_dim, d),
        "gamma_mlp": (d,),
        "w_gate": (d, config.d_mlp),
        "w_up": (d, config.d_mlp),
        "w_down": (config.d_mlp, d),
    }
    order = [("embedding", (config.vocab_size, d))]
    for i in range(config.n_layers):
        order += [(f"layers.{i}.{name}", layer_shapes[name]) for name in LAYER_FIELDS]
    order += [("gamma_final", (d,)), ("w_vocab", (d, config.vocab_size))]
    return order


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    arr.setflags(write=False)
    return arr


def _assemble(config: ModelConfig, arrays: dict[str, np.ndarray]) -> Weights:
    layers = tuple(
        LayerWeights(**{name: _freeze(arrays[f"layers.{i}.{name}"]) for name in LAYER_FIELDS})
        for i in range(config.n_layers)
    )
    return Weights(
        embedding=_freeze(arrays["embedding"]),
        layers=layers,
        gamma_final=_freeze(arrays["gamma_final"]),
        w_vocab=_freeze(arrays["w_vocab"]),
    )


def init_weights(config: ModelConfig) -> Weights:
    """Deterministic weights for ``config``; identical for identical (config, seed)."""
    stream = UniformStream(config.seed)
    scale = 1.0 / np.sqrt(config.d_hidden)
    arrays = {}
    for name, shape in weight_order(config):
        u = stream.draw(int(np.prod(shape))).reshape(shape)
        if name.endswith("gamma_attn") or name.endswith("gamma_mlp") or name == "gamma_final":
            arrays[name] = 1.0 + u * scale
        else:
            arrays[name] = u * scale
    return _assemble(config, arrays)


def save_weights(path: str | Path, config: ModelConfig, weights: Weights) -> None:
    header = [MAGIC, struct.pack("<q", FORMAT_VERSION)]
    header.append(struct.pack(
        "<7q", config.n_layers, config.d_hidden, config.n_q_heads, config.n_kv_heads,
        config.d_head, config.d_mlp, config.vocab_size))
    header.append(struct.pack("<Q", config.seed))
    header.append(struct.pack("<2q", config.bytes_per_elem, config.max_positions))
    header.append(struct.pack(f"<{config.n_layers}q",
                              *[k.window or 0 for k in config.layer_kinds]))
    header.append(struct.pack("<2d", config.rope_base, config.rms_eps))
    with open(path, "wb") as f:
        for chunk in header:
            f.write(chunk)
        for (name, shape), (_, arr) in zip(weight_order(config), weights.arrays()):
            if arr.shape != shape:
                raise ValueError(f"{name}: shape {arr.shape} does not match config {shape}")
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_weights(path: str | Path) -> tuple[ModelConfig, Weights]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not a weight file (bad magic)")
    offset = 8

    def take(fmt):
        nonlocal offset
        size = struct.calcsize(fmt)
        if offset + size > len(data):
            raise ValueError(f"{path}: truncated header")
        values = struct.unpack_from(fmt, data, offset)
        offset += size
        return values

    (version,) = take("<q")
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    n_layers, d_hidden, n_q, n_kv, d_head, d_mlp, vocab = take("<7q")
    (seed,) = take("<Q")
    bytes_per_elem, max_positions = take("<2q")
    windows = take(f"<{n_layers}q")
    rope_base, rms_eps = take("<2d")
    config = ModelConfig(
        n_layers=n_layers, d_hidden=d_hidden, n_q_heads=n_q, n_kv_heads=n_kv, d_head=d_head,
        d_mlp=d_mlp, vocab_size=vocab, rope_base=rope_base,
        layer_kinds=tuple(LayerKind(w or None) for w in windows), seed=seed,
        bytes_per_elem=bytes_per_elem, max_positions=max_positions, rms_eps=rms_eps)
    arrays = {}
    for name, shape in weight_order(config):
        count = int(np.prod(shape))
        end = offset + 4 * count
        if end > len(data):
            raise ValueError(f"{path}: truncated while reading {name}")
        arrays[name] = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(shape)
        offset = end
    if offset != len(data):
        raise ValueError(f"{path}: {len(data) - offset} trailing bytes")
    return config, _assemble(config, arrays)
