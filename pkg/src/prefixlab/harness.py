"""Experiments and metrics.

Desk-scale quality metrics: exact sequence KL where the rollout law is
enumerable, and a Fréchet distance between Gaussian fits of decoded-image
pixels otherwise. Sweeps emit a fixed-schema CSV and one self-contained SVG
line plot per metric; every cell's seed is derived from (base seed, cell
index, replicate) so rows are reproducible bit-for-bit.
"""

from __future__ import annotations

import csv
import hashlib
import time
from dataclasses import dataclass, replace

import numpy as np

from .errors import InvalidInputError, SupportViolationError
from .corruption import CorruptionVariant
from .guidance import GuidanceConfig
from .model import Condition, CountModel, TokenMap, predict_logits
from .oracle import Distribution, kl_divergence
from .sampler import SamplerConfig, rollout, rollout_distribution
from .tokenizer import AffineDecoder, Codebook, ScaleSchedule


def exact_kl(rollout_law: Distribution, data_law: Distribution) -> float:
    """Sum p log(p/q) over sequences; support violations raise, never hide."""
    q = data_law.as_dict()
    total = 0.0
    for outcome, p in zip(rollout_law.outcomes, rollout_law.probs):
        if p == 0.0:
            continue
        qv = q.get(outcome, 0.0)
        if qv == 0.0:
            raise SupportViolationError(
                f"outcome {outcome!r} has rollout mass {p} but zero data mass"
            )
        total += float(p) * float(np.log(p / qv))
    return max(total, 0.0)


def _sqrtm_psd(matrix: np.ndarray) -> np.ndarray:
    """Symmetric square root via eigendecomposition, eigenvalues clamped at 0."""
    sym = (matrix + matrix.T) / 2.0
    vals, vecs = np.linalg.eigh(sym)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def toy_frechet(images_a, images_b) -> float:
    """Fréchet distance between Gaussian fits of flattened pixel vectors."""
    a = np.stack([np.asarray(img, dtype=float).ravel() for img in images_a])
    b = np.stack([np.asarray(img, dtype=float).ravel() for img in images_b])
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise InvalidInputError("each image set needs at least 2 members")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    cov_a = np.atleast_2d(np.cov(a, rowvar=False))
    cov_b = np.atleast_2d(np.cov(b, rowvar=False))
    if not (np.all(np.isfinite(cov_a)) and np.all(np.isfinite(cov_b))):
        raise InvalidInputError("non-finite image statistics")
    root_a = _sqrtm_psd(cov_a)
    cross = _sqrtm_psd(root_a @ cov_b @ root_a)
    value = float(
        np.sum((mu_a - mu_b) ** 2)
        + np.trace(cov_a + cov_b - 2.0 * cross)
    )
    return max(value, 0.0)


def count_model_prefix_marginal_sites(
    model: CountModel, book: Codebook, condition: Condition, k: int
) -> np.ndarray:
    """Exact per-site p(r_k | c) under the count model's own prefix law."""
    from .model import enumerate_prefix_keys, prefix_maps

    schedule = model.schedule
    h, w = schedule.grid(k)
    total = np.zeros((h, w, model.vocab))
    for key in enumerate_prefix_keys(schedule, model.vocab, k):
        # Chain the model's own per-site predictions to get p(prefix | c).
        p = 1.0
        for j in range(1, k):
            maps = prefix_maps(key[: j - 1], schedule)
            probs = np.exp(
                predict_logits(model, condition, maps, book=book).values
            ).reshape(-1, model.vocab)
            ids = np.asarray(key[j - 1])
            p *= float(np.prod(probs[np.arange(ids.size), ids]))
        maps = prefix_maps(key, schedule)
        total += p * np.exp(predict_logits(model, condition, maps, book=book).values)
    return total


@dataclass(frozen=True)
class SurrogateRow:
    variant: CorruptionVariant
    fraction: float
    mean_kl: float
    clean_kl: float


def surrogate_gap(
    model: CountModel,
    book: Codebook,
    condition: Condition,
    prefix: list[TokenMap],
    variants,
    fractions,
    plan_samples: int = 8,
    base_seed: int = 0,
) -> list[SurrogateRow]:
    """How far each corrupted branch sits from the exact prefix marginal.

    Per (variant, fraction): Monte Carlo mean over corruption plans of
    KL(corrupted-branch law || exact per-site marginal), summed over sites,
    next to the clean-branch KL as the zero-corruption baseline.
    """
    from .corruption import apply_corruption, plan_corruption
    from .model import embed_prefix

    k = len(prefix) + 1
    schedule = model.schedule
    marginal = count_model_prefix_marginal_sites(model, book, condition, k)
    embedding = embed_prefix(prefix, book, schedule, model.embed_seed, model.embed_dim)
    clean = np.exp(predict_logits(model, condition, prefix, book=book).values)
    clean_kl = kl_divergence(clean.reshape(-1), marginal.reshape(-1))
    rows = []
    for variant in variants:
        for fraction in fractions:
            kls = []
            for s in range(plan_samples):
                plan = plan_corruption(
                    schedule, k, fraction, variant,
                    seed=base_seed + 7919 * s, book=book,
                )
                corrupted = apply_corruption(
                    embedding, plan, book, schedule, model.embed_seed
                )
                probs = np.exp(
                    predict_logits(
                        model, condition, prefix, book=book, embedding=corrupted
                    ).values
                )
                kls.append(kl_divergence(probs.reshape(-1), marginal.reshape(-1)))
            rows.append(SurrogateRow(variant, fraction, float(np.mean(kls)), clean_kl))
    return rows


def exposure_gap(
    model,
    corpus,
    gconfig: GuidanceConfig,
    sconfig: SamplerConfig,
    book: Codebook,
    schedule: ScaleSchedule,
    n_rollouts: int = 100,
    seed: int = 0,
) -> dict[int, float]:
    """Per-scale free-running vs teacher-forced negative log-likelihood gap.

    Delta_k = E_rollout[-log p(r_k | rollout prefix, c)]
            - E_data[-log p(r_k | ground-truth prefix, c)].
    Rollout conditions cycle through the corpus conditions.
    """
    if len(corpus) == 0:
        raise InvalidInputError("exposure-gap corpus must be non-empty")

    def step_nll(condition, maps, k):
        probs = np.exp(
            predict_logits(model, condition, maps[: k - 1], book=book).values
        ).reshape(-1, model.vocab)
        ids = maps[k - 1].ids.ravel()
        return -float(np.sum(np.log(probs[np.arange(ids.size), ids])))

    data_nll = {k: [] for k in range(1, schedule.num_scales + 1)}
    for condition, maps in corpus:
        for k in data_nll:
            data_nll[k].append(step_nll(condition, list(maps), k))

    roll_nll = {k: [] for k in data_nll}
    for i in range(n_rollouts):
        condition = corpus[i % len(corpus)][0]
        result = rollout(
            model, condition, gconfig, replace(sconfig, seed=seed + i),
            book, schedule,
        )
        for k in roll_nll:
            roll_nll[k].append(step_nll(condition, list(result.maps), k))

    return {
        k: float(np.mean(roll_nll[k]) - np.mean(data_nll[k])) for k in data_nll
    }


SWEEP_CSV_HEADER = [
    "lambda", "n_p", "variant", "scale_mask", "gamma", "metric", "value",
    "replicate", "seed", "runtime_ms", "error",
]


@dataclass(frozen=True)
class SweepGrid:
    lambdas: tuple[float, ...]
    fractions: tuple[float, ...] = (0.0,)
    variants: tuple[CorruptionVariant, ...] = (
        CorruptionVariant.SAME_SCALE_FULL_EMBEDDING,
    )
    scale_masks: tuple[frozenset[int] | None, ...] = (None,)
    replicates: int = 1
    seed: int = 0

    def __post_init__(self):
        if not (self.lambdas and self.fractions and self.variants and self.scale_masks):
            raise InvalidInputError("sweep grid axes must be non-empty")
        if self.replicates < 1:
            raise InvalidInputError("replicate count must be >= 1")

    def cells(self):
        idx = 0
        for lam in self.lambdas:
            for fraction in self.fractions:
                for variant in self.variants:
                    for mask in self.scale_masks:
                        yield idx, lam, fraction, variant, mask
                        idx += 1

    def grid_hash(self) -> str:
        text = repr(
            (self.lambdas, self.fractions,
             tuple(v.value for v in self.variants),
             tuple(sorted(m) if m is not None else None for m in self.scale_masks),
             self.replicates, self.seed)
        )
        return hashlib.blake2s(text.encode(), digest_size=6).hexdigest()


def cell_seed(base_seed: int, cell_index: int, replicate: int) -> int:
    digest = hashlib.blake2s(
        f"{base_seed}:{cell_index}:{replicate}".encode(), digest_size=8
    ).digest()
    return int.from_bytes(digest, "little") % (2**32)


@dataclass(frozen=True)
class ExperimentSpec:
    """What each sweep cell runs.

    metric "exact_kl": exact KL between the guided rollout law and the
    model's own unguided, untruncated joint (tabular models with the
    exact-marginal reference). metric "toy_frechet": Fréchet distance
    between decoded guided rollouts and reference images.
    """

    model: object
    book: Codebook
    schedule: ScaleSchedule
    condition: Condition
    gamma: float = 0.0
    metric: str = "exact_kl"
    sampler: SamplerConfig = SamplerConfig()
    reference: str = "exact-marginal"
    n_samples: int = 16
    reference_images: tuple = ()
    decoder: AffineDecoder | None = None


@dataclass(frozen=True)
class MetricRow:
    lam: float
    fraction: float
    variant: CorruptionVariant
    scale_mask: frozenset[int] | None
    gamma: float
    metric: str
    value: float | None
    replicate: int
    seed: int
    runtime_ms: float
    error: str = ""


def _cell_metric(spec: ExperimentSpec, gconfig: GuidanceConfig, seed: int) -> float:
    if spec.metric == "exact_kl":
        guided = rollout_distribution(
            spec.model, spec.condition, gconfig, spec.sampler,
            spec.book, spec.schedule,
        )
        baseline = rollout_distribution(
            spec.model, spec.condition, GuidanceConfig(), SamplerConfig(),
            spec.book, spec.schedule,
        )
        return exact_kl(guided, baseline)
    if spec.metric == "toy_frechet":
        images = []
        for i in range(spec.n_samples):
            result = rollout(
                spec.model, spec.condition, gconfig,
                replace(spec.sampler, seed=seed + i),
                spec.book, spec.schedule, decoder=spec.decoder,
            )
            images.append(result.image)
        return toy_frechet(images, spec.reference_images)
    raise InvalidInputError(f"unknown sweep metric {spec.metric!r}")


def run_sweep(grid: SweepGrid, spec: ExperimentSpec) -> list[MetricRow]:
    """One row per (cell, replicate); failures land in the error column."""
    rows = []
    for idx, lam, fraction, variant, mask in grid.cells():
        for rep in range(grid.replicates):
            seed = cell_seed(grid.seed, idx, rep)
            gconfig = GuidanceConfig(
                gamma=spec.gamma, lam=lam, fraction=fraction, variant=variant,
                scale_mask=mask, reference=spec.reference,
            )
            start = time.perf_counter()
            try:
                value = _cell_metric(spec, gconfig, seed)
                error = ""
            except Exception as exc:  # recorded, sweep continues
                value = None
                error = f"{type(exc).__name__}: {exc}"
            runtime_ms = (time.perf_counter() - start) * 1000.0
            rows.append(
                MetricRow(lam, fraction, variant, mask, spec.gamma, spec.metric,
                          value, rep, seed, runtime_ms, error)
            )
    return rows


def _mask_label(mask: frozenset[int] | None) -> str:
    return "all" if mask is None else "+".join(str(k) for k in sorted(mask))


def write_sweep_csv(rows: list[MetricRow], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SWEEP_CSV_HEADER)
        for r in rows:
            writer.writerow(
                [r.lam, r.fraction, r.variant.value, _mask_label(r.scale_mask),
                 r.gamma, r.metric,
                 "" if r.value is None else repr(r.value),
                 r.replicate, r.seed, f"{r.runtime_ms:.3f}", r.error]
            )


def svg_line_plot(series: dict[str, list[tuple[float, float]]],
                  title: str, xlabel: str, ylabel: str,
                  width: int = 640, height: int = 420) -> str:
    """Minimal self-contained SVG line plot, one polyline per series."""
    margin = 60
    points = [p for pts in series.values() for p in pts]
    if not points:
        return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
                f'height="{height}"><text x="20" y="20">{title} (no data)</text></svg>')
    xs = [p[0] for p in points]
    ys = [p[1] for p in points]
    x_lo, x_hi = min(xs), max(xs)
    y_lo, y_hi = min(ys), max(ys)
    x_span = (x_hi - x_lo) or 1.0
    y_span = (y_hi - y_lo) or 1.0

    def sx(x):
        return margin + (x - x_lo) / x_span * (width - 2 * margin)

    def sy(y):
        return height - margin - (y - y_lo) / y_span * (height - 2 * margin)

    palette = ["#1f6fb2", "#d1495b", "#4f9d69", "#8a5ab8", "#c98a2b", "#3aa6a6"]
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'font-family="monospace" font-size="12">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="20" text-anchor="middle">{title}</text>',
        f'<text x="{width / 2:.1f}" y="{height - 12}" text-anchor="middle">{xlabel}</text>',
        f'<text x="16" y="{height / 2:.1f}" text-anchor="middle" '
        f'transform="rotate(-90 16 {height / 2:.1f})">{ylabel}</text>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
        f'y2="{height - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" '
        f'y2="{height - margin}" stroke="black"/>',
        f'<text x="{margin}" y="{height - margin + 16}">{x_lo:.3g}</text>',
        f'<text x="{width - margin}" y="{height - margin + 16}" '
        f'text-anchor="end">{x_hi:.3g}</text>',
        f'<text x="{margin - 6}" y="{height - margin}" text-anchor="end">{y_lo:.3g}</text>',
        f'<text x="{margin - 6}" y="{margin + 4}" text-anchor="end">{y_hi:.3g}</text>',
    ]
    for i, (label, pts) in enumerate(sorted(series.items())):
        color = palette[i % len(palette)]
        coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in sorted(pts))
        parts.append(
            f'<polyline fill="none" stroke="{color}" stroke-width="1.5" '
            f'points="{coords}"/>'
        )
        parts.append(
            f'<text x="{width - margin + 4}" y="{margin + 14 * i + 4}" '
            f'fill="{color}" text-anchor="start" font-size="10">{label}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts)


def write_sweep_svg(rows: list[MetricRow], grid: SweepGrid, out_dir) -> list[str]:
    """One SVG per metric; series keyed by (n_p, variant, mask); x = lambda."""
    import os

    paths = []
    metrics = sorted({r.metric for r in rows})
    for metric in metrics:
        series: dict[str, list[tuple[float, float]]] = {}
        for r in rows:
            if r.metric != metric or r.value is None:
                continue
            label = f"np={r.fraction} {r.variant.value} mask={_mask_label(r.scale_mask)}"
            series.setdefault(label, []).append((r.lam, r.value))
        svg = svg_line_plot(
            series, f"{metric} vs lambda", "lambda", metric
        )
        name = f"{metric}_{grid.grid_hash()}.svg"
        path = os.path.join(out_dir, name)
        with open(path, "w") as fh:
            fh.write(svg)
        paths.append(path)
    return paths
