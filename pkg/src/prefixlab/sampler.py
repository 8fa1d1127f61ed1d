"""Turn guided logits into token maps and full rollouts.

Truncation order is fixed and documented: temperature first, then top-k,
then top-p. Top-p keeps the smallest descending-probability prefix whose
cumulative mass reaches the threshold (boundary token included); ties are
broken toward the lower token id throughout.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from itertools import product

import numpy as np

from .errors import DegenerateDistributionError, IllDefinedLawError, InvalidInputError
from .guidance import GuidanceConfig, GuidedStep, guided_step
from .model import Condition, TokenMap
from .oracle import Distribution, softmax
from .tokenizer import AffineDecoder, Codebook, ScaleSchedule, decode, decode_maps


@dataclass(frozen=True)
class SamplerConfig:
    temperature: float = 1.0
    top_k: int | None = None
    top_p: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.temperature <= 0:
            raise InvalidInputError("temperature must be > 0")
        if self.top_k is not None and self.top_k < 1:
            raise InvalidInputError("top_k must be >= 1")
        if not 0 < self.top_p <= 1:
            raise InvalidInputError("top_p must lie in (0, 1]")


def truncated_site_law(logits: np.ndarray, config: SamplerConfig) -> np.ndarray:
    """Distribution over one site's vocabulary after truncation, shape (V,)."""
    logits = np.asarray(logits, dtype=float)
    if not np.any(logits > -np.inf):
        raise DegenerateDistributionError("all logits are -inf")
    vocab = logits.shape[0]
    scaled = logits / config.temperature
    # Descending probability with ties broken toward the lower token id.
    order = np.lexsort((np.arange(vocab), -scaled))
    keep = vocab if config.top_k is None else min(config.top_k, vocab)
    kept = order[:keep]
    probs = np.zeros(vocab)
    kept_probs = softmax(scaled[kept])
    cum = np.cumsum(kept_probs)
    cutoff = int(np.searchsorted(cum, config.top_p - 1e-15)) + 1
    support = kept[:cutoff]
    probs[support] = kept_probs[:cutoff] / kept_probs[:cutoff].sum()
    return probs


def truncated_law(logits: np.ndarray, config: SamplerConfig) -> np.ndarray:
    """Per-site truncated distributions for a whole (h, w, V) logit grid."""
    h, w, vocab = logits.shape
    out = np.empty_like(logits, dtype=float)
    for i in range(h):
        for j in range(w):
            out[i, j] = truncated_site_law(logits[i, j], config)
    return out


def truncate_and_sample(
    logits: np.ndarray, config: SamplerConfig, rng: np.random.Generator
) -> np.ndarray:
    """One token id per site; deterministic per rng state."""
    laws = truncated_law(logits, config)
    h, w, vocab = laws.shape
    ids = np.empty((h, w), dtype=np.int64)
    for i in range(h):
        for j in range(w):
            ids[i, j] = rng.choice(vocab, p=laws[i, j])
    return ids


@dataclass(frozen=True)
class StepRecord:
    step: GuidedStep
    token_map: TokenMap


@dataclass(frozen=True)
class RolloutResult:
    maps: tuple[TokenMap, ...]
    latent: np.ndarray
    image: np.ndarray
    trace: tuple[StepRecord, ...]
    condition: Condition
    seed: int


def rollout(
    model,
    condition: Condition,
    gconfig: GuidanceConfig,
    sconfig: SamplerConfig,
    book: Codebook,
    schedule: ScaleSchedule,
    *,
    decoder: AffineDecoder | None = None,
) -> RolloutResult:
    """Full guided generation loop; deterministic given the sampler seed."""
    rng = np.random.default_rng(sconfig.seed)
    maps: list[TokenMap] = []
    trace = []
    for k in range(1, schedule.num_scales + 1):
        plan_seed = int(rng.integers(2**32))
        step = guided_step(
            model, condition, maps, gconfig, book=book, plan_seed=plan_seed
        )
        ids = truncate_and_sample(step.logits, sconfig, rng)
        tmap = TokenMap(k, ids)
        maps.append(tmap)
        trace.append(StepRecord(step, tmap))
    latent = decode_maps(maps, schedule, book)
    return RolloutResult(
        tuple(maps), latent, decode(latent, decoder), tuple(trace), condition,
        sconfig.seed,
    )


def replay_trace(
    model,
    result: RolloutResult,
    gconfig: GuidanceConfig,
    book: Codebook,
) -> list[np.ndarray]:
    """Recompute every step's guided logits from the recorded prefixes/plans.

    Returns the recomputed logits per step; bit-identical to the recorded
    ones for a faithful trace.
    """
    logits = []
    for idx, record in enumerate(result.trace):
        step = guided_step(
            model,
            result.condition,
            list(result.maps[:idx]),
            gconfig,
            book=book,
            plan=record.step.plan,
        )
        logits.append(step.logits)
    return logits


def trace_to_csv(result: RolloutResult, path) -> None:
    """One row per (step, site): sampled id plus the guided logits."""
    vocab = result.trace[0].step.logits.shape[-1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["step", "site", "sampled_id"] + [f"logit_{v}" for v in range(vocab)]
        )
        for record in result.trace:
            flat_ids = record.token_map.ids.ravel()
            flat_logits = record.step.logits.reshape(-1, vocab)
            for u in range(flat_ids.shape[0]):
                writer.writerow(
                    [record.step.k, u, int(flat_ids[u])]
                    + [repr(float(x)) for x in flat_logits[u]]
                )


def trace_from_csv(path) -> dict[int, dict[int, tuple[int, np.ndarray]]]:
    """Read a trace CSV back as {step: {site: (sampled_id, logits)}}."""
    out: dict[int, dict[int, tuple[int, np.ndarray]]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        vocab = len(header) - 3
        for row in reader:
            k, u, sampled = int(row[0]), int(row[1]), int(row[2])
            logits = np.asarray([float(x) for x in row[3 : 3 + vocab]])
            out.setdefault(k, {})[u] = (sampled, logits)
    return out


def rollout_distribution(
    model,
    condition: Condition,
    gconfig: GuidanceConfig,
    sconfig: SamplerConfig,
    book: Codebook,
    schedule: ScaleSchedule,
    *,
    fixed_plans: dict[int, "CorruptionPlan"] | None = None,
) -> Distribution:
    """Exact law over full token-map sequences under the guided sampler.

    The guided law must be deterministic: either the exact-marginal
    reference, lam = 0, or a fixed corruption plan per guided scale.
    """
    if (
        gconfig.lam > 0
        and gconfig.reference == "corrupted"
        and fixed_plans is None
    ):
        raise IllDefinedLawError(
            "stochastic corruption has no single rollout law; pass fixed_plans"
        )

    sequences: list[tuple[tuple, float]] = [((), 1.0)]
    for k in range(1, schedule.num_scales + 1):
        h, w = schedule.grid(k)
        extended = []
        law_cache: dict[tuple, np.ndarray] = {}
        for seq, p in sequences:
            if seq not in law_cache:
                maps = [
                    TokenMap(j + 1, np.asarray(ids).reshape(schedule.grid(j + 1)))
                    for j, ids in enumerate(seq)
                ]
                plan = fixed_plans.get(k) if fixed_plans else None
                step = guided_step(
                    model, condition, maps, gconfig, book=book, plan=plan
                )
                law_cache[seq] = truncated_law(step.logits, sconfig).reshape(
                    -1, step.logits.shape[-1]
                )
            laws = law_cache[seq]
            vocab = laws.shape[-1]
            for combo in product(range(vocab), repeat=h * w):
                q = float(np.prod(laws[np.arange(len(combo)), combo]))
                if q > 0.0:
                    extended.append((seq + (combo,), p * q))
        sequences = extended
    outcomes = tuple(seq for seq, _ in sequences)
    probs = np.asarray([p for _, p in sequences])
    return Distribution(outcomes, probs / probs.sum())
