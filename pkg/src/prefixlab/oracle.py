"""Brute-force ground truth on enumerable models.

Everything here is exact: prefix laws are chained from CPT rows, marginals
are sums over the full prefix space, and the augmented distributions are the
normalized ratio forms the guidance algebra is supposed to reproduce.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from itertools import product

import numpy as np

from .errors import InvalidInputError
from .model import (
    Condition,
    NULL_CONDITION,
    PrefixKey,
    TabularModel,
    ScaleSchedule,
    enumerate_prefix_keys,
    prefix_key,
    tabular_from_rows,
)


@dataclass(frozen=True)
class Distribution:
    """Finite distribution over hashable outcomes."""

    outcomes: tuple
    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        if len(self.outcomes) != p.shape[0]:
            raise InvalidInputError("outcome/probability length mismatch")
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
            raise InvalidInputError("probabilities must be non-negative and sum to 1")
        object.__setattr__(self, "probs", p)

    def prob(self, outcome) -> float:
        return float(self.probs[self.outcomes.index(outcome)])

    def as_dict(self) -> dict:
        return dict(zip(self.outcomes, self.probs))


def fixture_m1() -> TabularModel:
    """Two single-site scales, V=2, C=1, with hand-checkable round numbers."""
    schedule = ScaleSchedule(((1, 1), (1, 1)))
    rows = {
        (0, 1, ()): [0.75, 0.25],
        (0, 2, ((0,),)): [0.6, 0.4],
        (0, 2, ((1,),)): [0.2, 0.8],
    }
    return tabular_from_rows(schedule, 2, 1, rows)


def step_map_distribution(model: TabularModel, condition: Condition, key: PrefixKey, k: int) -> Distribution:
    """Joint distribution over whole scale-k token maps given one prefix."""
    row = model.row(condition, k, key).reshape(-1, model.vocab)
    outcomes = []
    probs = []
    for combo in product(range(model.vocab), repeat=row.shape[0]):
        outcomes.append(combo)
        probs.append(float(np.prod(row[np.arange(len(combo)), combo])))
    return Distribution(tuple(outcomes), np.asarray(probs))


def enumerate_prefixes(model: TabularModel, condition: Condition, k: int) -> list[tuple[PrefixKey, float]]:
    """All (prefix, p(prefix | c)) pairs for the step at scale k."""
    result = [((), 1.0)]
    for j in range(1, k):
        extended = []
        for key, p in result:
            dist = step_map_distribution(model, condition, key, j)
            for combo, q in zip(dist.outcomes, dist.probs):
                extended.append((key + (combo,), p * float(q)))
        result = extended
    return result


def prefix_marginal(model: TabularModel, condition: Condition, k: int) -> Distribution:
    """p(r_k | c) over whole token maps, summed over the prefix space."""
    outcomes = None
    total = None
    for key, p in enumerate_prefixes(model, condition, k):
        dist = step_map_distribution(model, condition, key, k)
        if outcomes is None:
            outcomes = dist.outcomes
            total = p * dist.probs
        else:
            total = total + p * dist.probs
    return Distribution(outcomes, total)


def prefix_marginal_sites(model: TabularModel, condition: Condition, k: int) -> np.ndarray:
    """Per-site marginal probabilities, shape (h_k, w_k, V)."""
    h, w = model.schedule.grid(k)
    total = np.zeros((h, w, model.vocab))
    for key, p in enumerate_prefixes(model, condition, k):
        total += p * model.row(condition, k, key)
    return total


def prefix_posterior(model: TabularModel, condition: Condition, outcome, k: int) -> Distribution:
    """p(r_{<k} | r_k, c) by Bayes over the enumerated prefix space."""
    prefixes = enumerate_prefixes(model, condition, k)
    weights = []
    for key, p in prefixes:
        weights.append(p * step_map_distribution(model, condition, key, k).prob(outcome))
    weights = np.asarray(weights)
    return Distribution(tuple(key for key, _ in prefixes), weights / weights.sum())


def condition_marginal_row(model: TabularModel, k: int, key: PrefixKey) -> np.ndarray:
    """p(r_k | prefix) under a uniform prior over class conditions."""
    return model.row(NULL_CONDITION, k, key)


def _normalized_power_ratio(base: np.ndarray, reference: np.ndarray, strength: float) -> np.ndarray:
    weights = base * (base / reference) ** strength
    return weights / weights.sum()


def augmented_vpg(model: TabularModel, condition: Condition, prefix, strength: float, k: int) -> Distribution:
    """Normalized p(r_k|prefix,c) (p(r_k|prefix,c) / p(r_k|c))^lambda over maps."""
    key = prefix_key(prefix)
    base = step_map_distribution(model, condition, key, k)
    marg = prefix_marginal(model, condition, k)
    return Distribution(
        base.outcomes, _normalized_power_ratio(base.probs, marg.probs, strength)
    )


def augmented_cfg(model: TabularModel, condition: int, prefix, strength: float, k: int) -> Distribution:
    """Normalized p(r_k|prefix,c) (p(r_k|prefix,c) / p(r_k|prefix))^gamma over maps."""
    key = prefix_key(prefix)
    base = step_map_distribution(model, condition, key, k)
    row = condition_marginal_row(model, k, key).reshape(-1, model.vocab)
    ref = np.asarray(
        [
            float(np.prod(row[np.arange(len(combo)), combo]))
            for combo in base.outcomes
        ]
    )
    return Distribution(
        base.outcomes, _normalized_power_ratio(base.probs, ref, strength)
    )


def kl_divergence(observed: np.ndarray, oracle: np.ndarray) -> float:
    """KL(observed || oracle), natural log; both strictly positive here."""
    observed = np.asarray(observed, dtype=float)
    oracle = np.asarray(oracle, dtype=float)
    mask = observed > 0
    return float(np.sum(observed[mask] * np.log(observed[mask] / oracle[mask])))


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


@dataclass(frozen=True)
class IdentityRow:
    kind: str
    condition: int
    scale: int
    prefix: PrefixKey
    gamma: float
    lam: float
    max_abs_diff: float
    kl: float


@dataclass(frozen=True)
class IdentityReport:
    rows: tuple[IdentityRow, ...]
    tolerance: float

    @property
    def max_kl(self) -> float:
        return max((r.kl for r in self.rows), default=0.0)

    @property
    def passed(self) -> bool:
        return all(r.kl <= self.tolerance for r in self.rows)

    def failures(self) -> list[IdentityRow]:
        return [r for r in self.rows if r.kl > self.tolerance]


def verify_identities(
    model: TabularModel,
    tolerance: float = 1e-9,
    gammas=(0.0, 0.5, 1.0, 1.5, 3.0),
    lams=(0.0, 0.5, 1.0, 1.3, 1.8, 2.4, 3.0),
) -> IdentityReport:
    """Check the guidance logit rules against the exact augmented laws.

    For every (condition, scale, prefix) and every strength on the grid:
    the CFG extrapolation with the exact uniform-prior condition marginal as
    the null branch must reproduce the augmented-CFG law, the VPG
    extrapolation with the exact prefix marginal as reference must reproduce
    the augmented-VPG law, and the sequential CFG+VPG composition must match
    its four-term closed form. Joint-map laws are checked on single-site
    scales; multi-site scales use the per-site analogue with per-site
    marginals.
    """
    rows = []
    sched = model.schedule
    for c in range(model.num_conditions):
        for k in range(1, sched.num_scales + 1):
            marg_sites_c = prefix_marginal_sites(model, c, k)
            marg_sites_null = prefix_marginal_sites(model, NULL_CONDITION, k)
            single_site = sched.sites(k) == 1
            for key in enumerate_prefix_keys(sched, model.vocab, k):
                cond_row = model.row(c, k, key)
                null_row = condition_marginal_row(model, k, key)
                for gamma in gammas:
                    guided = softmax(
                        (1 + gamma) * np.log(cond_row) - gamma * np.log(null_row)
                    )
                    if single_site:
                        oracle_p = augmented_cfg(model, c, key, gamma, k).probs
                        observed = guided.reshape(-1)
                    else:
                        oracle_p = np.stack(
                            [
                                _normalized_power_ratio(
                                    cond_row[i, j], null_row[i, j], gamma
                                )
                                for i in range(cond_row.shape[0])
                                for j in range(cond_row.shape[1])
                            ]
                        ).reshape(-1)
                        observed = guided.reshape(-1)
                    rows.append(
                        IdentityRow(
                            "cfg", c, k, key, gamma, 0.0,
                            float(np.max(np.abs(observed - oracle_p))),
                            kl_divergence(
                                observed.reshape(-1, model.vocab),
                                np.asarray(oracle_p).reshape(-1, model.vocab),
                            ),
                        )
                    )
                for lam in lams:
                    guided = softmax(
                        (1 + lam) * np.log(cond_row) - lam * np.log(marg_sites_c)
                    )
                    if single_site:
                        oracle_p = augmented_vpg(model, c, key, lam, k).probs
                    else:
                        oracle_p = np.stack(
                            [
                                _normalized_power_ratio(
                                    cond_row[i, j], marg_sites_c[i, j], lam
                                )
                                for i in range(cond_row.shape[0])
                                for j in range(cond_row.shape[1])
                            ]
                        ).reshape(-1)
                    rows.append(
                        IdentityRow(
                            "vpg", c, k, key, 0.0, lam,
                            float(np.max(np.abs(guided.reshape(-1) - np.asarray(oracle_p).reshape(-1)))),
                            kl_divergence(
                                guided.reshape(-1, model.vocab),
                                np.asarray(oracle_p).reshape(-1, model.vocab),
                            ),
                        )
                    )
                # Sequential composition vs. its closed-form expansion, with
                # the exact marginals standing in for the corrupted branches.
                for gamma in gammas:
                    for lam in lams:
                        l_cg = np.log(cond_row)
                        l_ng = np.log(null_row)
                        l_cc = np.log(marg_sites_c)
                        l_nc = np.log(marg_sites_null)
                        g_gen = (1 + gamma) * l_cg - gamma * l_ng
                        g_corr = (1 + gamma) * l_cc - gamma * l_nc
                        sequential = (1 + lam) * g_gen - lam * g_corr
                        closed = (
                            (1 + lam) * (1 + gamma) * l_cg
                            - (1 + lam) * gamma * l_ng
                            - lam * (1 + gamma) * l_cc
                            + lam * gamma * l_nc
                        )
                        seq_p = softmax(sequential)
                        closed_p = softmax(closed)
                        rows.append(
                            IdentityRow(
                                "composition", c, k, key, gamma, lam,
                                float(np.max(np.abs(sequential - closed))),
                                kl_divergence(seq_p, closed_p),
                            )
                        )
    return IdentityReport(tuple(rows), tolerance)


def write_report_csv(report: IdentityReport, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["kind", "condition", "scale", "prefix", "gamma", "lambda",
             "max_abs_diff", "kl"]
        )
        for r in report.rows:
            writer.writerow(
                [r.kind, r.condition, r.scale, repr(r.prefix), r.gamma, r.lam,
                 repr(r.max_abs_diff), repr(r.kl)]
            )
