"""Command-line harness: one experiment per invocation, JSON or CSV report.

Usage::

    kvdirect <command> [--config PATH|toy|toy-sliding] [--seed N] [--out PATH]
                       [--format json|csv] [--budgets 4,8] [--strategies full,h2o]
                       [--n-new N] [--prompt TEXT ...] [--prompt-file PATH]
                       [--weights PATH]

Commands: reconstruct, generate-match, patch, sweep, rank, memory, bench,
dump-weights, load-weights.

Every flag can also be set through an environment variable ``KVD_<FLAG>``
(``KVD_SEED``, ``KVD_N_NEW``, ...). Flags beat environment variables, which
beat the config file, which beats built-in defaults.

Config file: one ``key = value`` per line, ``#`` starts a comment. Keys are
the :class:`ModelConfig` fields (``layer_kinds`` as e.g. ``G,S8,G,G``), an
optional ``preset`` to start from, and experiment parameters (``budgets``,
``strategies``, ``n_new``, ``prompt`` (repeatable), ``n_sinks``,
``obs_window``, ``kvdirect_mode``, ``seq_lengths``, ``grid``, ``reps``,
``warmup``, ``n_pairs``, ``tokens``, ``budget``).

Exit status: 0 when every verdict passes, 1 when one fails, 2 on usage or
config errors.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import os
import re
import sys
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import analysis, bench
from .cache import STRATEGY_KINDS, StrategySpec, cost_model, memory_report
from .config import PRESETS, REFERENCE_FOOTPRINTS, REFERENCE_SHAPES, LayerKind, ModelConfig
from .model import Transformer, encode, greedy_decode
from .weights import init_weights, load_weights, save_weights

ENV_PREFIX = "KVD_"

COMMANDS = ("reconstruct", "generate-match", "patch", "sweep", "rank", "memory", "bench",
            "dump-weights", "load-weights")

DEFAULT_PROMPTS = (
    b"Explain why the sky is blue in simple terms.",
    b"The residual stream in a transformer is the central information highway.",
    b"All attention and MLP outputs are additive updates to it.",
)

PATCH_PAIRS = (
    (b"What is the capital of Australia?", b"What language is spoken in France?"),
    (b"Name a prime number larger than ten.", b"Which planet lies closest to the sun?"),
)

FILLER = (b"The residual stream in a transformer is the central information highway. "
          b"All attention and MLP outputs are additive updates to it. ")

# Published recompute/read latency ratios, kept as context next to our own curve.
PUBLISHED_RATIO_CONTEXT = {"n=1": 1.1, "n=500": [0.17, 0.3]}

CSV_COLUMNS = {
    "reconstruct": ["seq_len", "layer", "kind", "max_dk_local", "max_dk_absolute", "max_dv"],
    "generate-match": ["prompt", "mode", "matches", "n_new", "tokens"],
    "patch": ["pair", "layer", "kl", "continuation_matches"],
    "sweep": ["strategy", "budget", "match", "kl_mean", "kl_max", "n_steps"],
    "rank": ["layer", "head", "kv_head", "r_50", "r_90", "r_99", "frobenius_sq", "sigma_sq_sum"],
    "memory": ["model", "kv_bytes_per_token", "residual_bytes_per_token", "rho",
               "kv_kb", "residual_kb", "tokens", "budget", "kvdirect_bytes", "full_cache_bytes"],
    "bench": ["n_tokens", "recompute_median_ns", "read_median_ns", "ratio", "recompute_flops",
              "read_bytes"],
    "dump-weights": ["name", "rows", "cols"],
    "load-weights": ["name", "rows", "cols"],
}


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"field {field_name!r}: {message}")
        self.field = field_name


# ---------------------------------------------------------------------------
# configuration


def parse_prompt(text: str) -> bytes:
    """UTF-8 text where ``\\xNN`` escapes stand for raw bytes."""
    return re.sub(rb"\\x([0-9a-fA-F]{2})", lambda m: bytes([int(m[1], 16)]), text.encode("utf-8"))


def _int_list(name: str, text: str) -> list[int]:
    try:
        return [int(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise ConfigError(name, f"expected comma-separated integers, got {text!r}") from None


_MODEL_INT_FIELDS = ("n_layers", "d_hidden", "n_q_heads", "n_kv_heads", "d_head", "d_mlp",
                     "vocab_size", "seed", "bytes_per_elem", "max_positions")
_MODEL_FLOAT_FIELDS = ("rope_base", "rms_eps")


def read_config_file(path: str | Path) -> dict[str, object]:
    """Parse a flat ``key = value`` file; ``prompt`` may repeat."""
    values: dict[str, object] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip() if not raw.lstrip().startswith("prompt") else raw.strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key == "prompt":
            values.setdefault("prompt", []).append(value)
        else:
            values[key] = value
    return values


def build_model_config(values: dict[str, object], base: ModelConfig) -> ModelConfig:
    kwargs = dataclasses.asdict(base)
    kwargs["layer_kinds"] = base.layer_kinds
    for name in _MODEL_INT_FIELDS:
        if name in values:
            try:
                kwargs[name] = int(values[name])
            except ValueError:
                raise ConfigError(name, f"expected an integer, got {values[name]!r}") from None
    for name in _MODEL_FLOAT_FIELDS:
        if name in values:
            try:
                kwargs[name] = float(values[name])
            except ValueError:
                raise ConfigError(name, f"expected a number, got {values[name]!r}") from None
    if "layer_kinds" in values:
        try:
            kwargs["layer_kinds"] = tuple(LayerKind.parse(k) for k in str(values["layer_kinds"]).split(","))
        except ValueError as exc:
            raise ConfigError("layer_kinds", str(exc)) from None
    elif "n_layers" in values and int(values["n_layers"]) != base.n_layers:
        kwargs["layer_kinds"] = ()
    try:
        return ModelConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError("model", str(exc)) from None


@dataclass
class RunConfig:
    experiment: str
    model: ModelConfig
    config_source: str = "toy"
    weights_path: str | None = None
    strategies: list[str] | None = None
    budgets: list[int] | None = None
    prompts: list[bytes] | None = None
    n_new: int | None = None
    out: str | None = None
    format: str = "json"
    params: dict[str, object] = field(default_factory=dict)

    def echo(self) -> dict:
        return {
            "experiment": self.experiment,
            "config_source": self.config_source,
            "model": self.model.to_dict(),
            "weights_path": self.weights_path,
            "strategies": self.strategies,
            "budgets": self.budgets,
            "prompts": [p.decode("latin-1") for p in self.prompts] if self.prompts else None,
            "n_new": self.n_new,
            "format": self.format,
            "params": {k: self.params[k] for k in sorted(self.params)},
        }


_PARAM_KEYS = ("n_sinks", "obs_window", "kvdirect_mode", "seq_lengths", "grid", "reps", "warmup",
               "n_pairs", "tokens", "budget")


def resolve_run(args: argparse.Namespace, env: dict[str, str] | None = None) -> RunConfig:
    env = os.environ if env is None else env

    def pick(name: str):
        flag = getattr(args, name, None)
        if flag is not None:
            return flag
        return env.get(ENV_PREFIX + name.upper())

    source = pick("config") or "toy"
    values: dict[str, object] = {}
    if source in PRESETS:
        base = PRESETS[source]()
    else:
        if not Path(source).exists():
            raise ConfigError("config", f"no such file or preset: {source}")
        values = read_config_file(source)
        preset = str(values.pop("preset", "toy"))
        if preset not in PRESETS:
            raise ConfigError("preset", f"unknown preset {preset!r}")
        base = PRESETS[preset]()
    model = build_model_config(values, base)

    weights_path = pick("weights")
    seed = pick("seed")
    if seed is not None:
        try:
            model = model.with_seed(int(seed))
        except ValueError as exc:
            raise ConfigError("seed", str(exc)) from None

    budgets = pick("budgets") or values.get("budgets")
    strategies = pick("strategies") or values.get("strategies")
    n_new = pick("n_new") or values.get("n_new")
    fmt = pick("format") or values.get("format") or "json"
    if fmt not in ("json", "csv"):
        raise ConfigError("format", f"expected json or csv, got {fmt!r}")

    prompts = None
    if getattr(args, "prompt", None):
        prompts = [parse_prompt(p) for p in args.prompt]
    elif pick("prompt_file"):
        lines = Path(pick("prompt_file")).read_text().splitlines()
        prompts = [parse_prompt(l) for l in lines if l.strip()]
    elif env.get(ENV_PREFIX + "PROMPT"):
        prompts = [parse_prompt(env[ENV_PREFIX + "PROMPT"])]
    elif "prompt" in values:
        prompts = [parse_prompt(p) for p in values["prompt"]]

    strategy_list = None
    if strategies:
        strategy_list = [s.strip().lower() for s in str(strategies).split(",") if s.strip()]
        for s in strategy_list:
            try:
                StrategySpec.parse(s)
            except ValueError as exc:
                raise ConfigError("strategies", str(exc)) from None

    params = {}
    for key in _PARAM_KEYS:
        if key in values:
            params[key] = values[key]
    try:
        n_new_val = int(n_new) if n_new is not None else None
    except ValueError:
        raise ConfigError("n_new", f"expected an integer, got {n_new!r}") from None
    return RunConfig(
        experiment=args.command,
        model=model,
        config_source=str(source),
        weights_path=weights_path,
        strategies=strategy_list,
        budgets=_int_list("budgets", budgets) if budgets else None,
        prompts=prompts,
        n_new=n_new_val,
        out=pick("out"),
        format=fmt,
        params=params,
    )


def _param_ints(run: RunConfig, key: str, default):
    if key not in run.params:
        return list(default)
    return _int_list(key, run.params[key])


def _param_int(run: RunConfig, key: str, default: int) -> int:
    if key not in run.params:
        return default
    try:
        return int(run.params[key])
    except ValueError:
        raise ConfigError(key, f"expected an integer, got {run.params[key]!r}") from None


def build_model(run: RunConfig) -> Transformer:
    if run.weights_path:
        config, weights = load_weights(run.weights_path)
        run.model = config
        return Transformer(config, weights)
    return Transformer(run.model)


def filler_tokens(n: int) -> list[int]:
    reps = FILLER * (n // len(FILLER) + 1)
    return list(reps[:n])


def fixed_length(prompt: bytes, n: int) -> list[int]:
    """``prompt`` truncated, or extended with filler text, to exactly ``n`` bytes."""
    return (list(prompt) + filler_tokens(n))[:n]


# ---------------------------------------------------------------------------
# reports


@dataclass
class Report:
    experiment: str
    config: dict
    result: dict
    verdicts: dict[str, bool]
    rows: list[dict]
    timestamp: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat())

    def __post_init__(self):
        self.verdicts = {k: bool(v) for k, v in self.verdicts.items()}

    @property
    def passed(self) -> bool:
        return all(self.verdicts.values())

    def to_dict(self) -> dict:
        return {
            "experiment": self.experiment,
            "config": self.config,
            "result": self.result,
            "verdicts": self.verdicts,
            "passed": self.passed,
            "timestamp": self.timestamp,
        }

    def to_json(self) -> str:
        return json.dumps(jsonable(self.to_dict()), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS[self.experiment], lineterminator="\n",
                                extrasaction="ignore")
        writer.writeheader()
        for row in self.rows:
            writer.writerow({k: _csv_cell(v) for k, v in row.items()})
        return buf.getvalue()


def _csv_cell(v):
    if isinstance(v, (list, tuple)):
        return " ".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return v


def jsonable(obj):
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return jsonable(dataclasses.asdict(obj))
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else str(v)
    if isinstance(obj, bytes):
        return obj.decode("latin-1")
    return obj


# ---------------------------------------------------------------------------
# commands


def cmd_reconstruct(run: RunConfig) -> Report:
    model = build_model(run)
    seq_lengths = _param_ints(run, "seq_lengths", (16, 32, 64, 128, 256))
    prompt = run.prompts[0] if run.prompts else FILLER
    rows, per_length = [], {}
    for n in seq_lengths:
        layers = analysis.reconstruction_errors(model, fixed_length(prompt, n))
        per_length[n] = layers
        rows += [{"seq_len": n, **dataclasses.asdict(r)} for r in layers]
    glob = [r for r in rows if r["kind"] == "G"]
    slid = [r for r in rows if r["kind"] != "G"]
    verdicts = {
        "global_layers_exact": all(r["max_dk_local"] == 0 and r["max_dv"] == 0
                                   and r["max_dk_absolute"] == 0 for r in glob),
        "sliding_values_exact": all(r["max_dv"] == 0 for r in slid),
        "sliding_keys_exact_with_local_positions": all(r["max_dk_local"] == 0 for r in slid),
    }
    if slid:
        verdicts["sliding_keys_differ_with_absolute_positions"] = all(
            r["max_dk_absolute"] > 0 for r in slid)
    result = {
        "max_dk": max(max(r["max_dk_local"] for r in rows), 0.0),
        "max_dv": max(r["max_dv"] for r in rows),
        "per_length": per_length,
    }
    return Report("reconstruct", run.echo(), result, verdicts, rows)


def cmd_generate_match(run: RunConfig) -> Report:
    model = build_model(run)
    prompts = run.prompts or list(DEFAULT_PROMPTS)
    n_new = run.n_new or 30
    budgets = run.budgets or [0]
    rows, per_prompt = [], []
    identical = True
    for i, prompt in enumerate(prompts):
        ids = encode(prompt)
        outputs = {"full_cache": greedy_decode(model, ids, n_new, StrategySpec("full").build()),
                   "scratch_recompute": greedy_decode(model, ids, n_new, None)}
        for b in budgets:
            outputs[f"kvdirect_b{b}"] = greedy_decode(model, ids, n_new, StrategySpec("kvdirect", b).build())
        ref = outputs["full_cache"]
        for mode, toks in outputs.items():
            matches = sum(a == b for a, b in zip(toks, ref))
            identical &= toks == ref
            rows.append({"prompt": i, "mode": mode, "matches": matches, "n_new": n_new, "tokens": toks})
        per_prompt.append({"prompt": prompt, "outputs": outputs})
    return Report("generate-match", run.echo(), {"prompts": per_prompt},
                  {"all_modes_token_identical": identical}, rows)


def cmd_patch(run: RunConfig) -> Report:
    model = build_model(run)
    n_new = run.n_new or 8
    if run.prompts:
        if len(run.prompts) % 2:
            raise ConfigError("prompt", "patching needs donor/recipient prompts in pairs")
        pairs = list(zip(run.prompts[0::2], run.prompts[1::2]))
    else:
        pairs = list(PATCH_PAIRS)
    rows, results = [], []
    for i, (donor, recipient) in enumerate(pairs):
        res = analysis.patch_and_continue(model, analysis.PatchSpec(donor, recipient), n_new)
        results.append(res)
        for layer, kl in res.kl_per_layer.items():
            rows.append({"pair": i, "layer": layer, "kl": kl,
                         "continuation_matches": res.patched_continuation[layer] == res.donor_continuation})
    verdicts = {
        "kl_zero_at_every_layer": all(r.all_zero for r in results),
        "continuation_equals_donor": all(r.continuations_match for r in results),
    }
    return Report("patch", run.echo(), {"pairs": results}, verdicts, rows)


SWEEP_PROMPTS = (
    b"The residual stream in a transformer is the central information highway of every model.",
    b"All attention and MLP outputs are additive updates to the stream, layer after layer, token by token.",
)


def _strategy_specs(run: RunConfig, default=STRATEGY_KINDS) -> list[StrategySpec]:
    names = run.strategies or list(default)
    n_sinks = _param_int(run, "n_sinks", 1)
    obs = _param_int(run, "obs_window", 8)
    mode = str(run.params.get("kvdirect_mode", "replay"))
    return [dataclasses.replace(StrategySpec.parse(n), n_sinks=n_sinks, obs_window=obs, mode=mode)
            for n in names]


def cmd_sweep(run: RunConfig) -> Report:
    model = build_model(run)
    budgets = run.budgets or [4, 8, 16, 32, 64]
    specs = _strategy_specs(run)
    prompts = [fixed_length(p, 64) for p in (run.prompts or SWEEP_PROMPTS)]
    n_new = run.n_new or 50
    sweep = analysis.budget_sweep(model, prompts, specs, budgets, n_new)
    rows = [{"strategy": c.strategy, "budget": c.budget, **dataclasses.asdict(c.fidelity)}
            for c in sweep.cells]
    kinds = [s.kind for s in specs]
    verdicts = {}
    if "kvdirect" in kinds:
        kvd = sweep.row("kvdirect")
        verdicts["kvdirect_lossless"] = all(c.fidelity.match == 1.0 and c.fidelity.kl_mean <= 1e-9
                                            for c in kvd)
        verdicts["kvdirect_dominates"] = all(
            sweep.get("kvdirect", b).fidelity.match >= sweep.get(k, b).fidelity.match
            for k in kinds for b in budgets)
    if "full" in kinds:
        verdicts["full_self_consistent"] = all(c.fidelity.match == 1.0 and c.fidelity.kl_max == 0.0
                                               for c in sweep.row("full"))
    baselines = [k for k in kinds if k not in ("full", "kvdirect")]
    if baselines:
        verdicts["baselines_lossy_at_smallest_budget"] = all(
            sweep.get(k, min(budgets)).fidelity.match < 1.0 for k in baselines)
    return Report("sweep", run.echo(), {"cells": sweep.cells, "n_new": n_new}, verdicts, rows)


def cmd_rank(run: RunConfig) -> Report:
    model = build_model(run)
    cfg = model.config
    dh = cfg.d_head
    n_pairs = _param_int(run, "n_pairs", 1000)
    rows, spectra = [], []
    energy_ok = frob_ok = one_ok = True
    for layer in range(cfg.n_layers):
        rep = analysis.bilinear_spectrum(model, layer)
        spectra.append(rep)
        for h in rep.heads:
            energy_ok &= bool(np.all(np.diff(h.energy) >= 0))
            one_ok &= abs(h.energy[-1] - 1.0) <= 1e-6
            frob_ok &= abs(h.sigma_sq_sum - h.frobenius_sq) <= 1e-4 * h.frobenius_sq
            rows.append({"layer": layer, "head": h.head, "kv_head": h.kv_head,
                         "r_50": h.effective_ranks[0.5], "r_90": h.effective_ranks[0.9],
                         "r_99": h.effective_ranks[0.99], "frobenius_sq": h.frobenius_sq,
                         "sigma_sq_sum": h.sigma_sq_sum})
    bound_ranks = sorted({1, dh // 2, dh - 1})
    bounds = [analysis.truncation_bound_check(model, layer, head, r, n_pairs, seed=layer * 1000 + head)
              for layer in range(cfg.n_layers) for head in range(cfg.n_q_heads) for r in bound_ranks]
    trunc_ranks = [dh, dh // 2, max(1, dh // 4)]
    prompts = run.prompts or list(DEFAULT_PROMPTS)
    n_new = run.n_new or 30
    truncation = [analysis.rank_truncated_generate(model, r, prompts, n_new) for r in trunc_ranks]
    matches = [t.fidelity.match for t in truncation]
    verdicts = {
        "energy_monotone": energy_ok,
        "energy_reaches_one": one_ok,
        "sigma_sq_equals_frobenius": frob_ok,
        "truncation_bound_holds": all(b.holds for b in bounds),
        "full_rank_exact": truncation[0].fidelity.match == 1.0 and truncation[0].fidelity.kl_max < 1e-6,
        "match_non_increasing_as_rank_drops": all(a >= b for a, b in zip(matches, matches[1:])),
    }
    result = {
        "mean_effective_rank_90": float(np.mean([r["r_90"] for r in rows])),
        "spectra": [{"layer": s.layer, "heads": [
            {"head": h.head, "kv_head": h.kv_head, "singular_values": h.singular_values[:dh],
             "energy": h.energy, "effective_ranks": h.effective_ranks} for h in s.heads]}
            for s in spectra],
        "bound_checks": bounds,
        "truncation": truncation,
    }
    return Report("rank", run.echo(), result, verdicts, rows)


def _kb(n: int) -> float:
    return round(n / 1024, 1)


def cmd_memory(run: RunConfig) -> Report:
    cfg = build_model(run).config if run.weights_path else run.model
    tokens = _param_int(run, "tokens", 1024)
    budget = _param_int(run, "budget", 64)
    rows = []
    published_ok = True
    for shape in REFERENCE_SHAPES:
        rep = memory_report(shape, tokens, budget)
        kv_kb, res_kb, rho = _kb(rep.kv_bytes_per_token), _kb(rep.residual_bytes_per_token), round(rep.rho, 1)
        published_ok &= (kv_kb, res_kb, rho) == REFERENCE_FOOTPRINTS[shape.name]
        rows.append({"model": shape.name, "kv_bytes_per_token": rep.kv_bytes_per_token,
                     "residual_bytes_per_token": rep.residual_bytes_per_token, "rho": rep.rho,
                     "kv_kb": kv_kb, "residual_kb": res_kb, "tokens": tokens, "budget": budget,
                     "kvdirect_bytes": rep.total_bytes, "full_cache_bytes": rep.full_cache_bytes})
    toy = memory_report(cfg, tokens, budget)
    rows.append({"model": "configured", "kv_bytes_per_token": toy.kv_bytes_per_token,
                 "residual_bytes_per_token": toy.residual_bytes_per_token, "rho": toy.rho,
                 "kv_kb": _kb(toy.kv_bytes_per_token), "residual_kb": _kb(toy.residual_bytes_per_token),
                 "tokens": tokens, "budget": budget, "kvdirect_bytes": toy.total_bytes,
                 "full_cache_bytes": toy.full_cache_bytes})
    growth = [memory_report(cfg, t, budget).total_bytes for t in range(budget, budget + 8)]
    verdicts = {
        "published_footprints_reproduced": published_ok,
        "growth_rate_is_residual_size": all(b - a == toy.residual_bytes_per_token
                                            for a, b in zip(growth, growth[1:])),
        "no_checkpoints_when_budget_covers_sequence":
            memory_report(cfg, budget, budget).total_bytes == budget * toy.kv_bytes_per_token,
    }
    return Report("memory", run.echo(), {"rows": rows, "reference": REFERENCE_FOOTPRINTS}, verdicts, rows)


def cmd_bench(run: RunConfig) -> Report:
    model = build_model(run)
    cfg = model.config
    grid = _param_ints(run, "grid", bench.DEFAULT_GRID)
    reps = _param_int(run, "reps", 30)
    warmup = _param_int(run, "warmup", 5)
    points = bench.bench_recompute_vs_read(model, grid, reps, warmup)
    rows = [{"n_tokens": p.n_tokens, "recompute_median_ns": p.recompute.median_ns,
             "read_median_ns": p.read.median_ns, "ratio": p.ratio,
             "recompute_flops": p.recompute_flops, "read_bytes": p.read_bytes} for p in points]
    prompt = encode(run.prompts[0] if run.prompts else DEFAULT_PROMPTS[0])
    n_new = max(run.n_new or 30, 10)
    budget = (run.budgets or [0])[0]
    decode_ok = True
    try:
        decode = bench.bench_decode(model, prompt, n_new, budget)
    except bench.TokenMismatchError as exc:
        decode, decode_ok = {"error": str(exc)}, False
    verdicts = {
        "cost_columns_match_formulas": all(
            p.recompute_flops == 4 * p.n_tokens * cfg.n_kv_heads * cfg.d_hidden * cfg.d_head
            and p.read_bytes == 2 * p.n_tokens * cfg.n_kv_heads * cfg.d_head * cfg.bytes_per_elem
            and (p.recompute_flops, p.read_bytes) == (cost_model(cfg, p.n_tokens).recompute_flops,
                                                      cost_model(cfg, p.n_tokens).read_bytes)
            for p in points),
        "decode_modes_token_identical": decode_ok,
    }
    if decode_ok:
        verdicts["scratch_slower_than_full_cache"] = (
            decode["scratch_recompute"].median_s > decode["full_cache"].median_s)
    result = {"ratio_curve": points, "decode": decode,
              "published_ratio_context": PUBLISHED_RATIO_CONTEXT}
    return Report("bench", run.echo(), result, verdicts, rows)


def _weight_rows(weights) -> list[dict]:
    rows = []
    for name, arr in weights.arrays():
        rows.append({"name": name, "rows": arr.shape[0], "cols": arr.shape[1] if arr.ndim > 1 else 1})
    return rows


def cmd_dump_weights(run: RunConfig) -> Report:
    if not run.out:
        raise ConfigError("out", "dump-weights needs --out PATH for the weight file")
    weights = init_weights(run.model)
    save_weights(run.out, run.model, weights)
    _, reloaded = load_weights(run.out)
    result = {"path": run.out, "checksum": weights.checksum(), "bytes": Path(run.out).stat().st_size}
    run.out = None   # the report itself goes to stdout
    return Report("dump-weights", run.echo(), result,
                  {"round_trip_identical": reloaded.equals(weights)}, _weight_rows(weights))


def cmd_load_weights(run: RunConfig) -> Report:
    if not run.weights_path:
        raise ConfigError("weights", "load-weights needs --weights PATH")
    config, weights = load_weights(run.weights_path)
    run.model = config
    result = {"checksum": weights.checksum(),
              "matches_seeded_init": init_weights(config).equals(weights)}
    finite = all(np.all(np.isfinite(a)) for _, a in weights.arrays())
    return Report("load-weights", run.echo(), result, {"weights_finite": finite}, _weight_rows(weights))


HANDLERS = {
    "reconstruct": cmd_reconstruct,
    "generate-match": cmd_generate_match,
    "patch": cmd_patch,
    "sweep": cmd_sweep,
    "rank": cmd_rank,
    "memory": cmd_memory,
    "bench": cmd_bench,
    "dump-weights": cmd_dump_weights,
    "load-weights": cmd_load_weights,
}


def run_experiment(run: RunConfig) -> Report:
    return HANDLERS[run.experiment](run)


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="config file or preset name (toy, toy-sliding)")
    common.add_argument("--seed", help="override the weight seed")
    common.add_argument("--out", help="output path (default: stdout)")
    common.add_argument("--format", choices=("json", "csv"))
    common.add_argument("--budgets", help="comma-separated cache budgets")
    common.add_argument("--strategies", help=f"comma-separated from {','.join(STRATEGY_KINDS)}")
    common.add_argument("--n-new", dest="n_new", help="tokens to generate")
    common.add_argument("--prompt", action="append", help="prompt text; \\xNN escapes allowed")
    common.add_argument("--prompt-file", dest="prompt_file", help="one prompt per line")
    common.add_argument("--weights", help="load model weights from this file")
    parser = argparse.ArgumentParser(prog="kvdirect", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", metavar="command")
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=HANDLERS[name].__name__.replace("cmd_", ""))
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command not in COMMANDS:
        parser.print_usage(sys.stderr)
        print("error: choose a command: " + ", ".join(COMMANDS), file=sys.stderr)
        return 2
    try:
        run = resolve_run(args)
        report = run_experiment(run)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    text = report.to_csv() if run.format == "csv" else report.to_json()
    if run.out:
        Path(run.out).write_text(text)
    else:
        sys.stdout.write(text)
    for name, ok in report.verdicts.items():
        print(f"{'PASS' if ok else 'FAIL'} {report.experiment}: {name}", file=sys.stderr)
    return 0 if report.passed else 1


if __name__ == "__main__":
    sys.exit(main())
