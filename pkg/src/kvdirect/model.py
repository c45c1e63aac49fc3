"""Toy decoder-only pre-norm transformer.

Layer ``l`` maps the residual ``h`` entering it to::

    n     = rmsnorm(h, gamma_attn)
    q, k  = rope(n @ W_q), rope(n @ W_k)      (rope at the layer's rope position)
    v     = n @ W_v
    h_hat = h + attention(q, K_all, V_all) @ W_o
    h'    = h_hat + W_down(silu(W_gate m) * W_up m),  m = rmsnorm(h_hat, gamma_mlp)

Key/value heads are shared by ``n_q_heads / n_kv_heads`` query heads. On a
sliding layer with window ``w`` a query at position ``p`` sees keys in
``[max(0, p - w + 1), p]``, and queries and keys are rotated by the local
position ``p - w`` instead of ``p``.

Tokens are bytes: token id == byte value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import numerics as nx
from .cache import KvBlock
from .config import ModelConfig
from .weights import Weights, init_weights


@lru_cache(maxsize=8192)
def _rope_angles(position: float, d_head: int, base: float) -> tuple[np.ndarray, np.ndarray]:
    # Scalar libm calls: the table for one position never depends on batch shape.
    cos, sin = [], []
    for i in range(d_head // 2):
        theta = position * base ** (-2.0 * i / d_head)
        cos.append(math.cos(theta))
        sin.append(math.sin(theta))
    c = np.array(cos, dtype=np.float32)
    s = np.array(sin, dtype=np.float32)
    c.setflags(write=False)
    s.setflags(write=False)
    return c, s


def rope_tables(positions, d_head: int, base: float) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin tables of shape (len(positions), d_head // 2)."""
    pairs = [_rope_angles(float(p), d_head, float(base)) for p in np.asarray(positions).ravel()]
    if not pairs:
        empty = np.zeros((0, d_head // 2), dtype=np.float32)
        return empty, empty
    return np.stack([c for c, _ in pairs]), np.stack([s for _, s in pairs])


def _rotate(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    even, odd = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def apply_rope(x: np.ndarray, position: float, base: float = 10000.0) -> np.ndarray:
    """Rotate consecutive pairs of ``x`` (last axis) by ``position * base**(-2i/d)``."""
    x = np.asarray(x, dtype=np.float32)
    d = x.shape[-1]
    if d % 2:
        raise ValueError(f"rotary embedding needs an even head dimension, got {d}")
    cos, sin = _rope_angles(float(position), d, float(base))
    return _rotate(x, cos, sin)


def rope_matrix(position: float, d_head: int, base: float = 10000.0) -> np.ndarray:
    """Dense block-diagonal rotation R_p in float64, so that ``apply_rope(x, p) ~= R_p @ x``."""
    r = np.zeros((d_head, d_head))
    for i in range(d_head // 2):
        theta = position * base ** (-2.0 * i / d_head)
        c, s = math.cos(theta), math.sin(theta)
        r[2 * i:2 * i + 2, 2 * i:2 * i + 2] = [[c, -s], [s, c]]
    return r


def apply_rope_rows(x: np.ndarray, positions: np.ndarray, base: float) -> np.ndarray:
    """Rotate ``x`` of shape (n, heads, d_head) with one position per row."""
    cos, sin = rope_tables(positions, x.shape[-1], base)
    return _rotate(x, cos[:, None, :], sin[:, None, :])


@dataclass
class ForwardResult:
    logits: np.ndarray                    # (n, vocab)
    trace: list[np.ndarray] | None = None  # residual entering layer l, l = 0..L

    @property
    def last_logits(self) -> np.ndarray:
        return self.logits[-1]


class Transformer:
    """Inference engine over immutable weights.

    The instance holds no per-sequence state; every decode session passes its
    own cache strategy.
    """

    def __init__(self, config: ModelConfig, weights: Weights | None = None):
        self.config = config
        self.weights = weights if weights is not None else init_weights(config)
        self._head_map = np.arange(config.n_q_heads) // config.group_size
        self._scale = np.float32(1.0 / math.sqrt(config.d_head))

    # -- projections ------------------------------------------------------

    def rope_positions(self, layer: int, positions) -> np.ndarray:
        positions = np.asarray(positions, dtype=np.int64)
        kind = self.config.layer_kinds[layer]
        return positions - kind.window if kind.is_sliding else positions

    def attn_norm(self, layer: int, h: np.ndarray) -> np.ndarray:
        return nx.rmsnorm(h, self.weights.layers[layer].gamma_attn, self.config.rms_eps)

    def kv_from_normed(self, layer: int, normed: np.ndarray, rope_positions) -> tuple[np.ndarray, np.ndarray]:
        cfg, lw = self.config, self.weights.layers[layer]
        n = normed.shape[0]
        k = nx.matmul(normed, lw.w_k).reshape(n, cfg.n_kv_heads, cfg.d_head)
        v = nx.matmul(normed, lw.w_v).reshape(n, cfg.n_kv_heads, cfg.d_head)
        return apply_rope_rows(k, rope_positions, cfg.rope_base), v

    def project_kv(self, layer: int, h: np.ndarray, rope_positions) -> tuple[np.ndarray, np.ndarray]:
        """K and V for residuals ``h`` entering ``layer``, exactly as the forward pass makes them."""
        return self.kv_from_normed(layer, self.attn_norm(layer, h), rope_positions)

    def q_from_normed(self, layer: int, normed: np.ndarray, rope_positions,
                      w_q: np.ndarray | None = None) -> np.ndarray:
        cfg = self.config
        q = nx.matmul(normed, self.weights.layers[layer].w_q if w_q is None else w_q)
        q = q.reshape(normed.shape[0], cfg.n_q_heads, cfg.d_head)
        return apply_rope_rows(q, rope_positions, cfg.rope_base)

    # -- attention --------------------------------------------------------

    def visibility(self, layer: int, q_positions, k_positions) -> np.ndarray:
        qp = np.asarray(q_positions)[:, None]
        kp = np.asarray(k_positions)[None, :]
        mask = kp <= qp
        kind = self.config.layer_kinds[layer]
        if kind.is_sliding:
            mask &= kp >= qp - kind.window + 1
        return mask

    def attend(self, layer: int, q: np.ndarray, q_positions, kv: KvBlock) -> tuple[np.ndarray, np.ndarray]:
        """Attention output (n, n_q*d_head) and weights (n_q_heads, n, n_keys)."""
        qh = np.transpose(q, (1, 0, 2))                       # (Hq, n, d)
        keys = np.transpose(kv.keys, (1, 2, 0))[self._head_map]  # (Hq, d, m)
        vals = np.transpose(kv.values, (1, 0, 2))[self._head_map]  # (Hq, m, d)
        scores = nx.matmul(qh, keys) * self._scale
        probs = nx.masked_softmax(scores, self.visibility(layer, q_positions, kv.positions))
        out = nx.matmul(probs, vals)                           # (Hq, n, d)
        n = q.shape[0]
        return np.transpose(out, (1, 0, 2)).reshape(n, -1), probs

    def mlp(self, layer: int, h_hat: np.ndarray) -> np.ndarray:
        lw = self.weights.layers[layer]
        m = nx.rmsnorm(h_hat, lw.gamma_mlp, self.config.rms_eps)
        gated = nx.silu(nx.matmul(m, lw.w_gate)) * nx.matmul(m, lw.w_up)
        return nx.matmul(gated, lw.w_down)

    def block(self, layer: int, h: np.ndarray, positions: np.ndarray, cache=None,
              q_weights: np.ndarray | None = None) -> np.ndarray:
        rpos = self.rope_positions(layer, positions)
        normed = self.attn_norm(layer, h)
        q = self.q_from_normed(layer, normed, rpos, q_weights)
        k, v = self.kv_from_normed(layer, normed, rpos)
        new = KvBlock(k, v, positions, rpos)
        kv = new if cache is None else cache.step(layer, new, h)
        attn, probs = self.attend(layer, q, positions, kv)
        if cache is not None:
            cache.observe(layer, kv, probs)
        h_hat = h + nx.matmul(attn, self.weights.layers[layer].w_o)
        return h_hat + self.mlp(layer, h_hat)

    # -- full passes ------------------------------------------------------

    def embed(self, tokens) -> np.ndarray:
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 1:
            raise ValueError("tokens must be a 1-D id sequence")
        if np.any(tokens < 0) or np.any(tokens >= self.config.vocab_size):
            raise ValueError(f"token id outside vocabulary of size {self.config.vocab_size}")
        return self.weights.embedding[tokens].copy()

    def unembed(self, h_final: np.ndarray) -> np.ndarray:
        normed = nx.rmsnorm(h_final, self.weights.gamma_final, self.config.rms_eps)
        return nx.matmul(normed, self.weights.w_vocab)

    def run_layers(self, h: np.ndarray, positions, start: int = 0, cache=None,
                   capture: bool = False, patch: dict[int, np.ndarray] | None = None,
                   q_override: dict[int, np.ndarray] | None = None):
        """Run layers ``start..L-1`` on residuals ``h`` entering layer ``start``.

        ``patch`` maps a layer index (0..L) to residuals that replace the ones
        entering that layer (index L: the final residual). Returns the final
        residual and, with ``capture``, the list of residuals entering every
        layer from ``start`` to L (earlier entries are None).
        """
        positions = np.asarray(positions, dtype=np.int64)
        L = self.config.n_layers
        trace: list[np.ndarray | None] = [None] * (L + 1)
        patch = patch or {}
        for layer in range(start, L):
            if layer in patch:
                h = self._patched(h, patch[layer])
            if capture:
                trace[layer] = h
            qw = q_override.get(layer) if q_override else None
            h = self.block(layer, h, positions, cache, qw)
        if L in patch:
            h = self._patched(h, patch[L])
        if capture:
            trace[L] = h
        return h, (trace if capture else None)

    @staticmethod
    def _patched(h: np.ndarray, replacement: np.ndarray) -> np.ndarray:
        replacement = np.asarray(replacement, dtype=np.float32)
        if replacement.shape != h.shape:
            raise ValueError(f"patch shape {replacement.shape} does not match residual {h.shape}")
        return replacement.copy()

    def forward(self, tokens, cache=None, capture: bool = False,
                patch: dict[int, np.ndarray] | None = None,
                q_override: dict[int, np.ndarray] | None = None) -> ForwardResult:
        """Process ``tokens`` appended after whatever ``cache`` already holds.

        Without a cache the tokens form a complete sequence starting at
        position 0 and attend only to each other.
        """
        tokens = np.asarray(tokens, dtype=np.int64)
        start = 0 if cache is None else cache.length
        positions = np.arange(start, start + len(tokens), dtype=np.int64)
        if len(tokens) == 0:
            raise ValueError("forward needs at least one token")
        if positions[-1] >= self.config.max_positions:
            raise ValueError(
                f"position {positions[-1]} exceeds max_positions={self.config.max_positions}")
        h = self.embed(tokens)
        if cache is not None:
            cache.begin(self, positions)
        h, trace = self.run_layers(h, positions, cache=cache, capture=capture, patch=patch,
                                   q_override=q_override)
        if cache is not None:
            cache.end(positions)
        return ForwardResult(self.unembed(h), trace)

    def logits_from_residuals(self, h: np.ndarray, positions, layer: int) -> np.ndarray:
        """Restart the cache-free computation from residuals entering ``layer``."""
        h_final, _ = self.run_layers(np.asarray(h, dtype=np.float32), positions, start=layer)
        return self.unembed(h_final)


def argmax_token(logits: np.ndarray) -> int:
    """Greedy choice; ``np.argmax`` returns the lowest id among ties."""
    return int(np.argmax(logits))


def greedy_decode_with_logits(model: Transformer, prompt, n_new: int, cache=None,
                              q_override=None) -> tuple[list[int], list[np.ndarray]]:
    """Greedy decoding; ``cache=None`` recomputes the whole sequence every step."""
    if n_new < 1:
        raise ValueError("n_new must be >= 1")
    tokens = [int(t) for t in prompt]
    if not tokens:
        raise ValueError("prompt must contain at least one token")
    out: list[int] = []
    step_logits: list[np.ndarray] = []
    feed = tokens
    for _ in range(n_new):
        if cache is None:
            logits = model.forward(tokens + out, q_override=q_override).last_logits
        else:
            logits = model.forward(feed, cache, q_override=q_override).last_logits
        step_logits.append(logits)
        out.append(argmax_token(logits))
        feed = out[-1:]
    return out, step_logits


def greedy_decode(model: Transformer, prompt, n_new: int, cache=None) -> list[int]:
    return greedy_decode_with_logits(model, prompt, n_new, cache)[0]


def encode(text: str | bytes) -> list[int]:
    """Byte-level tokenizer."""
    if isinstance(text, str):
        text = text.encode("utf-8")
    return list(text)
