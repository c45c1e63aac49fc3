"""Verification experiments run on the toy models.

* :func:`reconstruction_errors`: cached vs. recomputed K/V, per layer.
* :func:`patch_and_continue`: residual patching between two prompts.
* :func:`bilinear_spectrum`, :func:`truncation_bound_check`,
  :func:`rank_truncated_generate`: spectral structure of ``W_q W_k^T``.
* :func:`budget_sweep`: strategies x budgets against a full-cache reference.

Fidelity metrics are teacher-forced. The reference (full cache, greedy)
produces a continuation, the strategy under test reads the same tokens, and
the two next-token distributions are compared at every step.
"""

from __future__ import annotations

from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .cache import FullCache, ResidualCheckpoint, StrategySpec, recompute_kv
from .model import Transformer, argmax_token, encode, greedy_decode_with_logits

PAD_BYTE = 0x20

DEFAULT_TAUS = (0.5, 0.9, 0.99)


# ---------------------------------------------------------------------------
# reconstruction


@dataclass
class LayerReconstruction:
    layer: int
    kind: str
    max_dk_local: float      # keys rotated by the stored (local) position
    max_dk_absolute: float   # keys rotated by the absolute position
    max_dv: float


def reconstruction_errors(model: Transformer, tokens) -> list[LayerReconstruction]:
    """Fill a full cache with ``tokens``, then rebuild every layer's K/V from residuals."""
    cache = FullCache()
    result = model.forward(tokens, cache, capture=True)
    positions = np.arange(len(tokens), dtype=np.int64)
    rows = []
    for layer in range(model.config.n_layers):
        cached = cache.resident(layer)
        ckpt = ResidualCheckpoint(layer, positions, result.trace[layer])
        local = recompute_kv(model, ckpt, layer, use_local_positions=True)
        absolute = recompute_kv(model, ckpt, layer, use_local_positions=False)
        rows.append(LayerReconstruction(
            layer=layer,
            kind=str(model.config.layer_kinds[layer]),
            max_dk_local=_max_abs(local.keys, cached.keys),
            max_dk_absolute=_max_abs(absolute.keys, cached.keys),
            max_dv=_max_abs(local.values, cached.values),
        ))
    return rows


def _max_abs(a, b) -> float:
    return float(np.max(np.abs(np.asarray(a, np.float64) - np.asarray(b, np.float64))))


# ---------------------------------------------------------------------------
# patching


@dataclass(frozen=True)
class PatchSpec:
    donor: bytes
    recipient: bytes
    layers: tuple[int, ...] | None = None   # None: every layer 0..L


@dataclass
class PatchResult:
    donor_tokens: list[int]
    recipient_tokens: list[int]
    kl_per_layer: dict[int, float]
    donor_continuation: list[int]
    patched_continuation: dict[int, list[int]]

    @property
    def all_zero(self) -> bool:
        return all(v == 0.0 for v in self.kl_per_layer.values())

    @property
    def continuations_match(self) -> bool:
        return all(c == self.donor_continuation for c in self.patched_continuation.values())


def pad_pair(a: Sequence[int], b: Sequence[int], pad: int = PAD_BYTE) -> tuple[list[int], list[int]]:
    n = max(len(a), len(b))
    return list(a) + [pad] * (n - len(a)), list(b) + [pad] * (n - len(b))


def patch_and_continue(model: Transformer, spec: PatchSpec, n_new: int = 8,
                       pad: bool = True) -> PatchResult:
    """Overwrite the recipient's residuals with the donor's at one layer and continue.

    Every forward pass of the patched run (the prompt and each generated
    step) replaces the residuals entering layer ``l`` at all positions with
    the donor run's residuals for the same sequence. KL(patched || donor) is
    measured at the last prompt position.
    """
    donor, recipient = encode(spec.donor), encode(spec.recipient)
    if pad:
        donor, recipient = pad_pair(donor, recipient)
    elif len(donor) != len(recipient):
        raise ValueError(f"prompt lengths differ: {len(donor)} vs {len(recipient)}")
    L = model.config.n_layers
    layers = spec.layers if spec.layers is not None else tuple(range(L + 1))
    for layer in layers:
        if not 0 <= layer <= L:
            raise ValueError(f"patch layer {layer} outside 0..{L}")

    donor_cont, _ = greedy_decode_with_logits(model, donor, n_new, FullCache())
    donor_runs: dict[tuple[int, ...], object] = {}

    def donor_run(tail):
        key = tuple(tail)
        if key not in donor_runs:
            donor_runs[key] = model.forward(donor + tail, capture=True)
        return donor_runs[key]

    kls, conts = {}, {}
    for layer in layers:
        tail: list[int] = []
        for step in range(n_new):
            ref = donor_run(tail)
            patched = model.forward(recipient + tail, patch={layer: ref.trace[layer]})
            if step == 0:
                kls[layer] = nx.kl_divergence(nx.softmax(patched.last_logits),
                                              nx.softmax(ref.last_logits))
            tail.append(argmax_token(patched.last_logits))
        conts[layer] = tail
    return PatchResult(donor, recipient, kls, donor_cont, conts)


# ---------------------------------------------------------------------------
# spectra


def bilinear_matrix(model: Transformer, layer: int, head: int) -> np.ndarray:
    """``W_q^(h) W_k^(g)^T`` (d_hidden x d_hidden) for query head ``h`` and its KV head ``g``."""
    cfg, lw = model.config, model.weights.layers[layer]
    dh = cfg.d_head
    g = head // cfg.group_size
    wq = lw.w_q[:, head * dh:(head + 1) * dh]
    wk = lw.w_k[:, g * dh:(g + 1) * dh]
    return nx.matmul(wq, wk.T)


def energy_curve(singular_values, d_head: int | None = None) -> np.ndarray:
    """E(r) for r = 1..d_head: share of squared singular mass in the top r."""
    s = np.asarray(singular_values, dtype=np.float64)
    if d_head is not None:
        s = s[:d_head]
    cum = np.cumsum(s * s)
    if cum[-1] == 0:
        raise ValueError("all singular values are zero")
    return cum / cum[-1]


def effective_rank(singular_values, tau: float, d_head: int | None = None) -> int:
    """Smallest r with E(r) >= tau."""
    if not 0 < tau <= 1:
        raise ValueError("tau must lie in (0, 1]")
    energy = energy_curve(singular_values, d_head)
    return int(np.searchsorted(energy, tau, side="left")) + 1


@dataclass
class HeadSpectrum:
    layer: int
    head: int
    kv_head: int
    singular_values: np.ndarray   # all min(rows, cols) values, descending
    energy: np.ndarray            # E(1..d_head)
    effective_ranks: dict[float, int]
    frobenius_sq: float

    @property
    def sigma_sq_sum(self) -> float:
        return float(np.sum(self.singular_values ** 2))


@dataclass
class SpectralReport:
    layer: int
    heads: list[HeadSpectrum] = field(default_factory=list)

    def mean_rank(self, tau: float = 0.9) -> float:
        return float(np.mean([h.effective_ranks[tau] for h in self.heads]))


def bilinear_spectrum(model: Transformer, layer: int, taus: Iterable[float] = DEFAULT_TAUS,
                      svd=nx.svd_singular_values) -> SpectralReport:
    """Spectrum of every query head's bilinear form at ``layer``.

    Query heads are paired with the KV head they share under grouped-query
    attention.
    """
    cfg = model.config
    report = SpectralReport(layer)
    for head in range(cfg.n_q_heads):
        m = bilinear_matrix(model, layer, head)
        s = np.asarray(svd(m), dtype=np.float64)
        report.heads.append(HeadSpectrum(
            layer=layer,
            head=head,
            kv_head=head // cfg.group_size,
            singular_values=s,
            energy=energy_curve(s, cfg.d_head),
            effective_ranks={t: effective_rank(s, t, cfg.d_head) for t in taus},
            frobenius_sq=float(np.sum(np.asarray(m, np.float64) ** 2)),
        ))
    return report


@dataclass
class BoundCheck:
    layer: int
    head: int
    rank: int
    n_pairs: int
    n_holding: int
    max_ratio: float   # max |a - a~| / bound over the sampled pairs

    @property
    def holds(self) -> bool:
        return self.n_holding == self.n_pairs


def truncation_bound_check(model: Transformer, layer: int, head: int, rank: int,
                           n_pairs: int = 1000, seed: int = 0) -> BoundCheck:
    """Check |a - a~| <= sigma_{r+1} |h_i| |h_j| / sqrt(d_head) on random residual pairs."""
    dh = model.config.d_head
    if not 1 <= rank < dh:
        raise ValueError(f"rank must lie in 1..{dh - 1} for a bound check")
    m = np.asarray(bilinear_matrix(model, layer, head), dtype=np.float64)
    u, s, vt = np.linalg.svd(m)
    m_r = (u[:, :rank] * s[:rank]) @ vt[:rank]
    rng = np.random.default_rng(seed)
    hi = rng.standard_normal((n_pairs, m.shape[0]))
    hj = rng.standard_normal((n_pairs, m.shape[0]))
    scale = np.sqrt(dh)
    a = np.einsum("ni,ij,nj->n", hi, m, hj) / scale
    a_r = np.einsum("ni,ij,nj->n", hi, m_r, hj) / scale
    bound = s[rank] * np.linalg.norm(hi, axis=1) * np.linalg.norm(hj, axis=1) / scale
    err = np.abs(a - a_r)
    return BoundCheck(layer, head, rank, n_pairs, int(np.sum(err <= bound)),
                      float(np.max(err / bound)))


def truncated_query_weights(model: Transformer, rank: int) -> dict[int, np.ndarray]:
    """Per-layer query weights whose bilinear forms are the rank-``rank`` truncations.

    With ``M = W_q W_k^T = U S V^T``, replacing ``W_q`` by ``U_r U_r^T W_q``
    gives ``U_r U_r^T M = M_r`` exactly. Returns an empty dict at full rank.
    """
    cfg = model.config
    if not 1 <= rank <= cfg.d_head:
        raise ValueError(f"rank must lie in 1..{cfg.d_head}, got {rank}")
    if rank == cfg.d_head:
        return {}
    dh = cfg.d_head
    out = {}
    for layer in range(cfg.n_layers):
        wq = np.array(model.weights.layers[layer].w_q, dtype=np.float64)
        for head in range(cfg.n_q_heads):
            m = np.asarray(bilinear_matrix(model, layer, head), dtype=np.float64)
            u = np.linalg.svd(m)[0][:, :rank]
            cols = slice(head * dh, (head + 1) * dh)
            wq[:, cols] = u @ (u.T @ wq[:, cols])
        out[layer] = wq.astype(np.float32)
    return out


# ---------------------------------------------------------------------------
# teacher-forced fidelity


@dataclass
class Fidelity:
    match: float
    kl_mean: float
    kl_max: float
    n_steps: int


def reference_run(model: Transformer, prompt, n_new: int) -> tuple[list[int], list[np.ndarray]]:
    """Greedy continuation and per-step distributions under a full cache."""
    tokens, logits = greedy_decode_with_logits(model, prompt, n_new, FullCache())
    return tokens, [nx.softmax(x) for x in logits]


def teacher_forced_logits(model: Transformer, prompt, continuation, strategy: StrategySpec | None = None,
                          q_override=None) -> list[np.ndarray]:
    """Next-token logits at each step while feeding ``continuation`` through ``strategy``."""
    prompt, continuation = list(prompt), list(continuation)
    if strategy is None:
        # cache-free: one batched pass covers every step
        logits = model.forward(prompt + continuation[:-1], q_override=q_override).logits
        return list(logits[len(prompt) - 1:])
    cache = strategy.build()
    out = [model.forward(prompt, cache, q_override=q_override).last_logits]
    for tok in continuation[:-1]:
        out.append(model.forward([tok], cache, q_override=q_override).last_logits)
    return out


def compare(reference_tokens, reference_dists, logits) -> tuple[int, list[float]]:
    matches, kls = 0, []
    for tok, p, x in zip(reference_tokens, reference_dists, logits):
        matches += int(argmax_token(x) == tok)
        kls.append(nx.kl_divergence(p, nx.softmax(x)))
    return matches, kls


def _fidelity(matches: int, kls: list[float]) -> Fidelity:
    n = len(kls)
    return Fidelity(matches / n, float(np.mean(kls)), float(np.max(kls)), n)


@dataclass
class RankTruncationResult:
    rank: int
    fidelity: Fidelity


def rank_truncated_generate(model: Transformer, rank: int, prompts, n_new: int) -> RankTruncationResult:
    """Fidelity of rank-truncated attention scores against the untruncated model."""
    q_override = truncated_query_weights(model, rank)
    matches, kls = 0, []
    for prompt in prompts:
        prompt = encode(prompt) if isinstance(prompt, (str, bytes)) else list(prompt)
        ref_tokens, ref_dists = reference_run(model, prompt, n_new)
        logits = teacher_forced_logits(model, prompt, ref_tokens, None, q_override or None)
        m, k = compare(ref_tokens, ref_dists, logits)
        matches += m
        kls += k
    return RankTruncationResult(rank, _fidelity(matches, kls))


# ---------------------------------------------------------------------------
# budget sweep


@dataclass
class SweepCell:
    strategy: str
    budget: int
    fidelity: Fidelity


@dataclass
class SweepResult:
    cells: list[SweepCell]
    budgets: list[int]
    strategies: list[str]

    def get(self, strategy: str, budget: int) -> SweepCell:
        for c in self.cells:
            if c.strategy == strategy and c.budget == budget:
                return c
        raise KeyError((strategy, budget))

    def row(self, strategy: str) -> list[SweepCell]:
        return [self.get(strategy, b) for b in self.budgets]


def budget_sweep(model: Transformer, prompts, strategies: Sequence[StrategySpec],
                 budgets: Sequence[int], n_new: int) -> SweepResult:
    """Fidelity of every (strategy, budget) cell against the full-cache reference."""
    refs = []
    for prompt in prompts:
        prompt = encode(prompt) if isinstance(prompt, (str, bytes)) else list(prompt)
        refs.append((prompt, *reference_run(model, prompt, n_new)))
    cells = []
    for spec in strategies:
        for budget in budgets:
            matches, kls = 0, []
            for prompt, ref_tokens, ref_dists in refs:
                logits = teacher_forced_logits(model, prompt, ref_tokens, spec.with_budget(budget))
                m, k = compare(ref_tokens, ref_dists, logits)
                matches += m
                kls += k
            cells.append(SweepCell(spec.kind, budget, _fidelity(matches, kls)))
    return SweepResult(cells, list(budgets), [s.kind for s in strategies])
