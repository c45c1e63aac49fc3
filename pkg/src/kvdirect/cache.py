"""Pluggable KV-cache strategies.

A strategy is handed to :meth:`Transformer.forward`, which calls, per forward
pass::

    cache.begin(model, positions)
    for each layer:
        kv = cache.step(layer, new_block, h)   # keys/values attention will see
        ...attention...
        cache.observe(layer, kv, probs)        # bookkeeping and eviction
    cache.end(positions)

``step`` always returns entries in ascending position order, so the
attention kernels see the same key order whatever the strategy.

The five eviction baselines (window, H2O, StreamingLLM, SnapKV, TOVA) follow
their usual published definitions and lose information. KV-Direct keeps the
``B`` most recent entries per layer and a residual checkpoint for every
evicted token, and recomputes the evicted K/V exactly when attention needs
them.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:
    from .model import Transformer


@dataclass(frozen=True)
class KvBlock:
    """Keys and values of a run of tokens at one layer."""

    keys: np.ndarray            # (n, n_kv, d_head), after RoPE
    values: np.ndarray          # (n, n_kv, d_head)
    positions: np.ndarray       # (n,) absolute positions
    rope_positions: np.ndarray  # (n,) position the key was rotated by

    def __len__(self) -> int:
        return len(self.positions)

    @classmethod
    def empty(cls, n_kv: int, d_head: int) -> "KvBlock":
        z = np.zeros((0, n_kv, d_head), dtype=np.float32)
        i = np.zeros(0, dtype=np.int64)
        return cls(z, z, i, i)

    @classmethod
    def concat(cls, blocks: Sequence["KvBlock"]) -> "KvBlock":
        blocks = [b for b in blocks if b is not None]
        return cls(
            np.concatenate([b.keys for b in blocks]),
            np.concatenate([b.values for b in blocks]),
            np.concatenate([b.positions for b in blocks]),
            np.concatenate([b.rope_positions for b in blocks]),
        )

    def take(self, idx) -> "KvBlock":
        return KvBlock(self.keys[idx], self.values[idx], self.positions[idx],
                       self.rope_positions[idx])


@dataclass(frozen=True)
class ResidualCheckpoint:
    """Residuals entering ``layer`` for a set of tokens: the only retained state."""

    layer: int
    positions: np.ndarray       # (n,)
    residuals: np.ndarray       # (n, d_hidden)
    rope_positions: np.ndarray | None = None  # stored local positions (sliding layers)

    def __len__(self) -> int:
        return len(self.positions)


def recompute_kv(model: "Transformer", checkpoints: ResidualCheckpoint, layer: int,
                 use_local_positions: bool = True) -> KvBlock:
    """Rebuild K/V at ``layer`` from the residuals entering it.

    Uses the same kernels in the same order as the forward pass, so on global
    layers the result is bit-identical to what a cache would hold. On sliding
    layers the keys match only if they are rotated by the stored local
    position; ``use_local_positions=False`` rotates by the absolute position
    instead.
    """
    if checkpoints.layer != layer:
        raise ValueError(
            f"checkpoints hold residuals entering layer {checkpoints.layer}, not layer {layer}")
    positions = np.asarray(checkpoints.positions, dtype=np.int64)
    if not use_local_positions:
        rope_pos = positions
    elif checkpoints.rope_positions is not None:
        rope_pos = np.asarray(checkpoints.rope_positions, dtype=np.int64)
    else:
        rope_pos = model.rope_positions(layer, positions)
    if len(positions) == 0:
        cfg = model.config
        return KvBlock.empty(cfg.n_kv_heads, cfg.d_head)
    k, v = model.project_kv(layer, checkpoints.residuals, rope_pos)
    return KvBlock(k, v, positions, rope_pos)


# ---------------------------------------------------------------------------
# strategies


class CacheStrategy:
    """Base class; subclasses override ``step``/``observe``."""

    kind = "base"

    def __init__(self):
        self.length = 0          # next absolute position
        self.n_layers: int | None = None

    def begin(self, model: "Transformer", positions: np.ndarray) -> None:
        if positions[0] != self.length or np.any(np.diff(positions) != 1):
            raise ValueError(
                f"position regression: cache expects position {self.length}, got {positions[0]}")
        if self.n_layers is None:
            self.n_layers = model.config.n_layers
            self._setup(model)

    def _setup(self, model: "Transformer") -> None:
        pass

    def step(self, layer: int, new: KvBlock, h: np.ndarray) -> KvBlock:
        raise NotImplementedError

    def observe(self, layer: int, kv: KvBlock, probs: np.ndarray) -> None:
        pass

    def end(self, positions: np.ndarray) -> None:
        self.length = int(positions[-1]) + 1

    def resident(self, layer: int) -> KvBlock:
        raise NotImplementedError

    def memory_bytes(self, config) -> int:
        """Bytes of retained state (K/V entries plus checkpoints)."""
        per_entry = 2 * config.n_kv_heads * config.d_head * config.bytes_per_elem
        return sum(len(self.resident(i)) for i in range(self.n_layers or 0)) * per_entry


class FullCache(CacheStrategy):
    kind = "full"

    def _setup(self, model):
        cfg = model.config
        self._blocks = [KvBlock.empty(cfg.n_kv_heads, cfg.d_head) for _ in range(cfg.n_layers)]

    def step(self, layer, new, h):
        return KvBlock.concat([self._blocks[layer], new])

    def observe(self, layer, kv, probs):
        self._blocks[layer] = kv

    def resident(self, layer):
        return self._blocks[layer]


BASELINE_POLICIES = ("window", "h2o", "streaming", "snapkv", "tova")


def baseline_evict(policy: str, positions, history: np.ndarray | None, budget: int,
                   n_sinks: int = 1, obs_window: int = 8) -> np.ndarray:
    """Positions a lossy policy keeps out of ``positions`` (ascending).

    ``history`` holds head-averaged attention weights, one row per past query
    and one column per entry of ``positions`` (zero where the query could not
    see the key).

    * window: the last ``budget`` positions.
    * streaming: the first ``n_sinks`` positions plus the most recent rest.
    * h2o: top ``budget`` by attention summed over all queries.
    * snapkv: top ``budget`` by attention summed over the last ``obs_window`` queries.
    * tova: top ``budget`` by the most recent query's attention.

    Equal scores evict the oldest position first.
    """
    positions = np.asarray(positions, dtype=np.int64)
    if budget < 1:
        raise ValueError("eviction budget must be >= 1")
    if policy not in BASELINE_POLICIES:
        raise ValueError(f"unknown eviction policy {policy!r}")
    n = len(positions)
    if budget >= n:
        return positions.copy()
    if policy == "window":
        return positions[n - budget:].copy()
    if policy == "streaming":
        sinks = min(n_sinks, budget)
        return np.concatenate([positions[:sinks], positions[n - (budget - sinks):]])
    history = np.asarray(history, dtype=np.float64)
    if history.ndim != 2 or history.shape[1] != n or history.shape[0] == 0:
        raise ValueError(f"attention history of shape {history.shape} does not cover {n} positions")
    if policy == "h2o":
        scores = history.sum(axis=0)
    elif policy == "snapkv":
        scores = history[-obs_window:].sum(axis=0)
    else:
        scores = history[-1]
    # primary key: score descending; ties: newer position first
    order = np.lexsort((-positions, -scores))
    return np.sort(positions[order[:budget]])


class EvictionCache(CacheStrategy):
    """Fixed-budget cache whose evicted entries are gone for good."""

    def __init__(self, policy: str, budget: int, n_sinks: int = 1, obs_window: int = 8):
        super().__init__()
        if policy not in BASELINE_POLICIES:
            raise ValueError(f"unknown eviction policy {policy!r}")
        if budget < 1:
            raise ValueError(f"{policy} budget must be >= 1, got {budget}")
        if n_sinks < 1 or obs_window < 1:
            raise ValueError("n_sinks and obs_window must be >= 1")
        self.kind = policy
        self.policy = policy
        self.budget = budget
        self.n_sinks = n_sinks
        self.obs_window = obs_window

    def _setup(self, model):
        cfg = model.config
        self._blocks = [KvBlock.empty(cfg.n_kv_heads, cfg.d_head) for _ in range(cfg.n_layers)]
        self._history = [np.zeros((0, 0)) for _ in range(cfg.n_layers)]

    def step(self, layer, new, h):
        return KvBlock.concat([self._blocks[layer], new])

    def observe(self, layer, kv, probs):
        rows = probs.astype(np.float64).mean(axis=0)   # (n_new, n_keys)
        old = self._history[layer]
        pad = np.zeros((old.shape[0], len(kv) - old.shape[1]))
        history = np.vstack([np.hstack([old, pad]), rows])
        if len(kv) > self.budget:
            keep_pos = baseline_evict(self.policy, kv.positions, history, self.budget,
                                      self.n_sinks, self.obs_window)
            idx = np.searchsorted(kv.positions, keep_pos)
            kv, history = kv.take(idx), history[:, idx]
        self._blocks[layer] = kv
        self._history[layer] = history

    def resident(self, layer):
        return self._blocks[layer]


class KVDirectCache(CacheStrategy):
    """Bounded cache that recomputes evicted K/V from residual checkpoints.

    ``mode="replay"`` keeps one vector per evicted token: the residual entering
    layer 0. Before each forward pass the evicted prefix is replayed through
    the layers to regenerate the residual entering every layer, and K/V are
    recomputed from those. ``mode="per_layer"`` stores the residual entering
    each layer at eviction time and recomputes directly from it.
    """

    kind = "kvdirect"

    def __init__(self, budget: int, mode: str = "replay"):
        super().__init__()
        if budget < 0:
            raise ValueError(f"kvdirect budget must be >= 0, got {budget}")
        if mode not in ("replay", "per_layer"):
            raise ValueError(f"unknown kvdirect mode {mode!r}")
        self.budget = budget
        self.mode = mode
        self.recomputed_tokens = 0

    def _setup(self, model):
        cfg = model.config
        L = cfg.n_layers
        self._model = model
        self._blocks = [KvBlock.empty(cfg.n_kv_heads, cfg.d_head) for _ in range(L)]
        self._resident_h = [np.zeros((0, cfg.d_hidden), np.float32) for _ in range(L)]
        self._ckpt_pos = np.zeros(0, dtype=np.int64)
        n_store = L if self.mode == "per_layer" else 1
        self._ckpt_h = [np.zeros((0, cfg.d_hidden), np.float32) for _ in range(n_store)]
        self._recomputed: list[KvBlock | None] = [None] * L
        self._pending: list[tuple[KvBlock, np.ndarray] | None] = [None] * L

    @property
    def n_checkpoints(self) -> int:
        return len(self._ckpt_pos) if self.n_layers is not None else 0

    def checkpoints(self, layer: int = 0) -> ResidualCheckpoint:
        """Stored residuals (replay mode stores layer 0 only)."""
        slot = layer if self.mode == "per_layer" else 0
        if self.mode == "replay" and layer != 0:
            raise ValueError("replay mode stores only residuals entering layer 0")
        return ResidualCheckpoint(layer, self._ckpt_pos, self._ckpt_h[slot])

    def begin(self, model, positions):
        super().begin(model, positions)
        n = len(self._ckpt_pos)
        if n == 0:
            self._recomputed = [None] * self.n_layers
            return
        if self.mode == "replay":
            # evicted tokens always form a prefix, so their replay is self-contained
            assert self._ckpt_pos[-1] == n - 1
            _, trace = model.run_layers(self._ckpt_h[0], self._ckpt_pos, capture=True)
            sources = [ResidualCheckpoint(l, self._ckpt_pos, trace[l]) for l in range(self.n_layers)]
        else:
            sources = [ResidualCheckpoint(l, self._ckpt_pos, self._ckpt_h[l])
                       for l in range(self.n_layers)]
        self._recomputed = [recompute_kv(model, src, l) for l, src in enumerate(sources)]
        self.recomputed_tokens += n * self.n_layers

    def step(self, layer, new, h):
        self._pending[layer] = (new, h)
        return KvBlock.concat([self._recomputed[layer], self._blocks[layer], new])

    def observe(self, layer, kv, probs):
        new, h = self._pending[layer]
        self._pending[layer] = None
        block = KvBlock.concat([self._blocks[layer], new])
        res_h = np.concatenate([self._resident_h[layer], h])
        excess = len(block) - self.budget
        if excess > 0:
            evicted_h = res_h[:excess]
            if self.mode == "per_layer":
                self._ckpt_h[layer] = np.concatenate([self._ckpt_h[layer], evicted_h])
            elif layer == 0:
                self._ckpt_h[0] = np.concatenate([self._ckpt_h[0], evicted_h])
            if layer == 0:
                self._ckpt_pos = np.concatenate([self._ckpt_pos, block.positions[:excess]])
            block = block.take(slice(excess, None))
            res_h = res_h[excess:]
        self._blocks[layer] = block
        # only layer 0's residuals are ever checkpointed in replay mode
        keep_h = self.mode == "per_layer" or layer == 0
        self._resident_h[layer] = res_h if keep_h else res_h[:0]

    def end(self, positions):
        super().end(positions)
        self._recomputed = [None] * self.n_layers

    def resident(self, layer):
        return self._blocks[layer]

    def memory_bytes(self, config):
        per_ckpt = config.d_hidden * config.bytes_per_elem * len(self._ckpt_h)
        return super().memory_bytes(config) + self.n_checkpoints * per_ckpt


STRATEGY_KINDS = ("full", "kvdirect") + BASELINE_POLICIES


@dataclass(frozen=True)
class StrategySpec:
    """Declarative strategy choice: ``kind`` plus its parameters."""

    kind: str
    budget: int | None = None
    n_sinks: int = 1
    obs_window: int = 8
    mode: str = "replay"

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ValueError(f"unknown strategy {self.kind!r}; choose from {', '.join(STRATEGY_KINDS)}")
        if self.n_sinks < 1 or self.obs_window < 1:
            raise ValueError("n_sinks and obs_window must be >= 1")
        if self.budget is not None and self.budget < 0:
            raise ValueError("budget must be >= 0")

    def with_budget(self, budget: int) -> "StrategySpec":
        return replace(self, budget=budget)

    def build(self) -> CacheStrategy:
        if self.kind == "full":
            return FullCache()
        if self.budget is None:
            raise ValueError(f"strategy {self.kind} needs a budget")
        if self.kind == "kvdirect":
            return KVDirectCache(self.budget, self.mode)
        return EvictionCache(self.kind, self.budget, self.n_sinks, self.obs_window)

    @property
    def label(self) -> str:
        return self.kind if self.budget is None else f"{self.kind}:{self.budget}"

    @classmethod
    def parse(cls, text: str) -> "StrategySpec":
        """``kind[:budget]``, e.g. ``full``, ``h2o``, ``kvdirect:0``."""
        name, _, budget = text.strip().lower().partition(":")
        aliases = {"streamingllm": "streaming", "window_only": "window", "windowonly": "window",
                   "kv-direct": "kvdirect", "kv_direct": "kvdirect"}
        name = aliases.get(name, name)
        return cls(name, int(budget) if budget else None)


# ---------------------------------------------------------------------------
# accounting


@dataclass(frozen=True)
class MemoryReport:
    kv_bytes_per_token: int
    residual_bytes_per_token: int
    rho: float
    tokens: int
    budget: int
    total_bytes: int          # retained bytes under the chosen strategy
    full_cache_bytes: int     # T * kv_bytes_per_token
    strategy: str = "kvdirect"
    extra: dict = field(default_factory=dict)


def memory_report(shape, tokens: int, budget: int, strategy: str = "kvdirect") -> MemoryReport:
    """Per-token and total bytes for a model ``shape`` (ModelConfig or ArchShape).

    KV per token is ``2*L*n_kv*d_head*b``; a residual checkpoint is
    ``d_hidden*b``; KV-Direct holds ``B`` KV entries per layer plus ``T-B``
    checkpoints. Eviction baselines hold ``min(T, B)`` entries and nothing else.
    """
    if not tokens >= budget >= 0:
        raise ValueError(f"need T >= B >= 0, got T={tokens}, B={budget}")
    L, n_kv, dh, d, b = (shape.n_layers, shape.n_kv_heads, shape.d_head, shape.d_hidden,
                         shape.bytes_per_elem)
    kv = 2 * L * n_kv * dh * b
    res = d * b
    rho = 2 * L * n_kv * dh / d
    full = tokens * kv
    if strategy == "kvdirect":
        total = budget * kv + (tokens - budget) * res
    elif strategy == "full":
        total = full
    elif strategy in BASELINE_POLICIES:
        total = min(tokens, budget) * kv
    else:
        raise ValueError(f"unknown strategy {strategy!r}")
    return MemoryReport(kv, res, rho, tokens, budget, total, full, strategy)


@dataclass(frozen=True)
class CostModel:
    n_tokens: int
    recompute_flops: int   # 4 * N * n_kv * d_hidden * d_head
    read_bytes: int        # 2 * N * n_kv * d_head * b


def cost_model(config, n_tokens: int) -> CostModel:
    """FLOPs to recompute K/V for ``n_tokens`` at one layer vs. bytes to read them."""
    if n_tokens < 0:
        raise ValueError("token count must be >= 0")
    flops = 4 * n_tokens * config.n_kv_heads * config.d_hidden * config.d_head
    read = 2 * n_tokens * config.n_kv_heads * config.d_head * config.bytes_per_elem
    return CostModel(n_tokens, flops, read)
