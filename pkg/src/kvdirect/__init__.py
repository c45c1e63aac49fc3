"""Transformer inference with residual-stream checkpointing instead of a KV cache."""

from .cache import (
    EvictionCache,
    FullCache,
    KvBlock,
    KVDirectCache,
    ResidualCheckpoint,
    StrategySpec,
    baseline_evict,
    cost_model,
    memory_report,
    recompute_kv,
)
from .config import LayerKind, ModelConfig, toy_config, toy_sliding_config
from .model import Transformer, apply_rope, encode, greedy_decode
from .weights import init_weights, load_weights, save_weights

__version__ = "0.1.0"
