"""Model hyperparameters and the two toy presets used by the experiments."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace


@dataclass(frozen=True)
class LayerKind:
    """Attention kind of one layer: global when ``window`` is None, else sliding."""

    window: int | None = None

    def __post_init__(self):
        if self.window is not None and self.window < 1:
            raise ValueError(f"sliding window must be >= 1, got {self.window}")

    @property
    def is_sliding(self) -> bool:
        return self.window is not None

    def __str__(self) -> str:
        return "G" if self.window is None else f"S{self.window}"

    @classmethod
    def parse(cls, text: str) -> "LayerKind":
        text = text.strip().upper()
        if text in ("G", "GLOBAL"):
            return cls()
        if text.startswith("S"):
            return cls(int(text[1:]))
        raise ValueError(f"unknown layer kind {text!r} (expected G or S<window>)")


GLOBAL = LayerKind()


def sliding(window: int) -> LayerKind:
    return LayerKind(window)


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    d_hidden: int
    n_q_heads: int
    n_kv_heads: int
    d_head: int
    d_mlp: int
    vocab_size: int = 256
    rope_base: float = 10000.0
    layer_kinds: tuple[LayerKind, ...] = ()
    seed: int = 42
    bytes_per_elem: int = 4
    max_positions: int = 4096
    rms_eps: float = 1e-6

    def __post_init__(self):
        for name in ("n_layers", "d_hidden", "n_q_heads", "n_kv_heads", "d_head",
                     "d_mlp", "vocab_size", "bytes_per_elem", "max_positions"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.n_q_heads % self.n_kv_heads:
            raise ValueError(
                f"n_q_heads ({self.n_q_heads}) must be divisible by n_kv_heads ({self.n_kv_heads})")
        if self.d_head % 2:
            raise ValueError(f"d_head must be even for rotary embeddings, got {self.d_head}")
        if self.rope_base <= 0:
            raise ValueError("rope_base must be positive")
        if self.rms_eps < 0:
            raise ValueError("rms_eps must be non-negative")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in 64 unsigned bits")
        kinds = tuple(self.layer_kinds) or (GLOBAL,) * self.n_layers
        if len(kinds) != self.n_layers:
            raise ValueError(f"layer_kinds has {len(kinds)} entries for {self.n_layers} layers")
        object.__setattr__(self, "layer_kinds", kinds)

    @property
    def group_size(self) -> int:
        return self.n_q_heads // self.n_kv_heads

    def with_seed(self, seed: int) -> "ModelConfig":
        return replace(self, seed=seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layer_kinds"] = ",".join(str(k) for k in self.layer_kinds)
        return d


def toy_config(**overrides) -> ModelConfig:
    """All-global 4-layer model used by every experiment by default."""
    base = dict(n_layers=4, d_hidden=64, n_q_heads=4, n_kv_heads=2, d_head=16,
                d_mlp=128, vocab_size=256, seed=42)
    base.update(overrides)
    return ModelConfig(**base)


def toy_sliding_config(window: int = 8, layer: int = 1, **overrides) -> ModelConfig:
    """Toy model with one sliding-window layer, for the boundary experiments."""
    kinds = [GLOBAL] * 4
    kinds[layer] = sliding(window)
    return toy_config(layer_kinds=tuple(kinds), **overrides)


PRESETS = {
    "toy": toy_config,
    "toy-sliding": toy_sliding_config,
}


@dataclass(frozen=True)
class ArchShape:
    """Architecture numbers needed by the memory formulas only."""

    name: str
    n_layers: int
    n_kv_heads: int
    d_head: int
    d_hidden: int
    bytes_per_elem: int = 2
    notes: str = field(default="", compare=False)


# Published per-token footprints (bf16) for six open models.
REFERENCE_SHAPES: tuple[ArchShape, ...] = (
    ArchShape("SmolLM2-135M", 30, 3, 64, 576),
    ArchShape("Qwen2.5-0.5B", 24, 2, 64, 896),
    ArchShape("Qwen3-0.6B", 28, 8, 128, 1024),
    ArchShape("DS-R1-Distill-1.5B", 28, 2, 128, 1536),
    ArchShape("Qwen2.5-1.5B", 28, 2, 128, 1536),
    ArchShape("Gemma3-4B-IT", 34, 4, 256, 2560, notes="5 global / 29 sliding"),
)

# (KV KB/token, residual KB/token, compression ratio) as published, one decimal.
REFERENCE_FOOTPRINTS: dict[str, tuple[float, float, float]] = {
    "SmolLM2-135M": (22.5, 1.1, 20.0),
    "Qwen2.5-0.5B": (12.0, 1.8, 6.9),
    "Qwen3-0.6B": (112.0, 2.0, 56.0),
    "DS-R1-Distill-1.5B": (28.0, 3.0, 9.3),
    "Qwen2.5-1.5B": (28.0, 3.0, 9.3),
    "Gemma3-4B-IT": (136.0, 5.0, 27.2),
}
