"""Codebook training: multi-stage LBG on residuals, plus an entropy-constrained
variant.

Stages are trained strictly in order. For stage t, the residual sub-vectors of
every codebook-sharing group are pooled and fit with Lloyd iterations seeded
by k-means++; the finalized (float32) stage codebooks then quantize all
residuals and the differences feed stage t+1. In entropy-constrained mode the
assignment rule penalizes improbable codewords (lambda * distortion -
log2 prior) and the prior tracks smoothed empirical selection frequencies.

Every iteration's objective is evaluated at assignment time under the
parameters that produced the assignment. A round that fails to improve the
objective is rejected and the previous parameters are kept, so the recorded
trace is non-increasing and the returned codebook is the best iterate.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import entropy
from .codebook import (
    PRIOR_FLOOR,
    Codebook,
    MsvqModel,
    nearest_batch,
    nearest_rate_penalized_batch,
)
from .errors import ConfigError, DataError
from .layout import SubVectorLayout

_ACCEPT_SLACK = 1e-12  # relative; rejects rounds that worsen the objective


@dataclass(frozen=True)
class TrainConfig:
    """Training knobs; lambdas (one per stage) are required only in EC mode."""

    max_iters: int = 50
    rel_tol: float = 1e-5
    seed: int = 0
    ec: bool = False
    lambdas: Sequence[float] | None = None

    def __post_init__(self):
        if self.max_iters < 1:
            raise ConfigError(f"max_iters must be >= 1, got {self.max_iters}")
        if self.rel_tol <= 0:
            raise ConfigError(f"rel_tol must be positive, got {self.rel_tol}")


@dataclass(frozen=True)
class LloydStats:
    """Assignment statistics of one Lloyd step, measured before the update."""

    indices: np.ndarray
    counts: np.ndarray
    distortion: float
    rate_bits: float | None
    objective: float


@dataclass
class TrainReport:
    """Convergence traces and usage histograms of a training run.

    per_stage_distortion[t] is the mean residual energy per vector after the
    finalized stage t+1 quantized the training data. objective_traces and
    usage are keyed by (group, stage), both 0-based; traces hold mean
    distortion per point (plain mode) or the Lagrangian lambda * distortion +
    mean code bits (EC mode).
    """

    per_stage_distortion: list[float] = field(default_factory=list)
    objective_traces: dict[tuple[int, int], list[float]] = field(default_factory=dict)
    iterations: dict[tuple[int, int], int] = field(default_factory=dict)
    codeword_usage: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)

    def to_dict(self) -> dict:
        n_stages = len(self.per_stage_distortion)
        groups = sorted({g for g, _ in self.objective_traces})
        return {
            "stages": [
                {
                    "stage": t + 1,
                    "distortion": self.per_stage_distortion[t],
                    "groups": [
                        {
                            "group": g,
                            "iterations": self.iterations[(g, t)],
                            "objective_trace": self.objective_traces[(g, t)],
                            "usage": self.codeword_usage[(g, t)].tolist(),
                        }
                        for g in groups
                    ],
                }
                for t in range(n_stages)
            ]
        }


def _kmeanspp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Seed k centers: first uniform, then proportional to squared distance."""
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]), dtype=np.float64)
    centers[0] = points[rng.integers(n)]
    diff = points - centers[0]
    d2 = np.einsum("nd,nd->n", diff, diff)
    for c in range(1, k):
        total = float(d2.sum())
        if total <= 0.0:
            j = int(rng.integers(n))
        else:
            j = int(rng.choice(n, p=d2 / total))
        centers[c] = points[j]
        diff = points - centers[c]
        np.minimum(d2, np.einsum("nd,nd->n", diff, diff), out=d2)
    return centers


def _assign(points, vectors, prior, rd_lambda, ec):
    if ec:
        idx, dist, rate = nearest_rate_penalized_batch(points, vectors, prior, rd_lambda)
        objective = rd_lambda * float(dist.mean()) + float(rate.mean())
        return idx, dist, float(rate.mean()), objective
    idx, dist = nearest_batch(points, vectors)
    return idx, dist, None, float(dist.mean())


def _update_centers(points, idx, dist, vectors):
    """Cell means for non-empty cells; empty cells grab the worst-quantized point."""
    k = vectors.shape[0]
    counts = np.bincount(idx, minlength=k)
    sums = np.zeros_like(vectors, dtype=np.float64)
    np.add.at(sums, idx, points)
    new = vectors.astype(np.float64).copy()
    nonempty = counts > 0
    new[nonempty] = sums[nonempty] / counts[nonempty, None]
    err = dist.copy()
    for cell in np.flatnonzero(~nonempty):
        worst = int(np.argmax(err))
        new[cell] = points[worst]
        err[worst] = 0.0
    return new, counts


def lloyd_step(
    points: np.ndarray,
    codebook: Codebook,
    ec: bool = False,
    rd_lambda: float | None = None,
) -> tuple[Codebook, LloydStats]:
    """One (assign, update, re-prior, reseed) round.

    Returns the updated codebook and the assignment statistics measured under
    the input codebook.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] < 1:
        raise DataError(f"need at least one point, got shape {points.shape}")
    if ec and rd_lambda is None:
        raise ConfigError("entropy-constrained step requires rd_lambda")
    idx, dist, rate, objective = _assign(
        points, codebook.vectors, codebook.prior, rd_lambda if ec else 0.0, ec)
    new_vectors, counts = _update_centers(points, idx, dist, codebook.vectors)
    new_prior = entropy.smoothed_pmf(counts) if ec else codebook.prior
    updated = Codebook(vectors=new_vectors, prior=new_prior,
                       code_lengths=codebook.code_lengths)
    stats = LloydStats(indices=idx, counts=counts, distortion=float(dist.mean()),
                       rate_bits=rate, objective=objective)
    return updated, stats


def _fit_codebook(points, k, rng, ec, rd_lambda, max_iters, rel_tol):
    centers = _kmeanspp(points, k, rng)
    prior = np.full(k, 1.0 / k) if ec else None
    best = (centers, prior)
    trace: list[float] = []
    prev = None
    for _ in range(max_iters):
        idx, dist, _, objective = _assign(points, centers, prior, rd_lambda, ec)
        if prev is not None and objective > prev * (1.0 + _ACCEPT_SLACK):
            centers, prior = best
            break
        trace.append(objective)
        best = (centers, prior)
        if prev is not None and (prev - objective) <= rel_tol * abs(prev):
            break
        prev = objective
        centers, counts = _update_centers(points, idx, dist, centers)
        if ec:
            prior = entropy.smoothed_pmf(counts)
    return centers, prior, trace


def _resolve_lambdas(config: TrainConfig, t_max: int, data_variance: float) -> np.ndarray | None:
    if not config.ec:
        return None
    if config.lambdas is None:
        return np.full(t_max, 2.0 / max(data_variance, 1e-30), dtype=np.float64)
    lambdas = np.asarray(config.lambdas, dtype=np.float64)
    if lambdas.shape != (t_max,):
        raise ConfigError(f"need {t_max} lambda values (one per stage), got {lambdas.shape}")
    if np.any(lambdas <= 0):
        raise ConfigError("lambda values must be positive")
    return lambdas


def _freeze(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


def train(
    data: np.ndarray,
    layout: SubVectorLayout,
    config: TrainConfig,
) -> tuple[MsvqModel, TrainReport]:
    """Train all stage codebooks on a feature matrix.

    Raises DataError when any group/stage has fewer pooled residuals than
    codewords, or when residual propagation produces non-finite values.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[1] != layout.m_dim:
        raise DataError(f"data shape {data.shape} does not match layout M={layout.m_dim}")
    if not np.all(np.isfinite(data)):
        raise DataError("training data contains non-finite values")
    max_k = 1 << int(layout.bits.max())
    if data.shape[0] < max_k:
        raise DataError(f"need at least {max_k} rows (largest codebook size), "
                        f"got {data.shape[0]}")

    t_max = layout.t_max
    n_groups = layout.n_groups
    lambdas = _resolve_lambdas(config, t_max, float(data.var(axis=0).mean()))
    seed = int(config.seed) & 0xFFFFFFFFFFFFFFFF

    sub = data[:, layout.perm].reshape(data.shape[0], layout.n_sub, layout.sub_dim)
    fallback = sub.mean(axis=0)
    residuals = sub.copy()

    report = TrainReport()
    stage_books: list[list[Codebook]] = [[] for _ in range(n_groups)]
    for t in range(t_max):
        for g in range(n_groups):
            members = layout.group_members(g)
            pts = residuals[:, members, :].reshape(-1, layout.sub_dim)
            k = 1 << int(layout.group_bits(g)[t])
            if pts.shape[0] < k:
                raise DataError(f"stage {t + 1} group {g}: {pts.shape[0]} residuals "
                                f"cannot fill {k} codewords")
            rng = np.random.default_rng([seed, t, g])
            rd_lambda = float(lambdas[t]) if config.ec else None
            centers, prior, trace = _fit_codebook(
                pts, k, rng, config.ec, rd_lambda, config.max_iters, config.rel_tol)
            if prior is not None:
                prior = np.maximum(prior, PRIOR_FLOOR)
                prior = prior / prior.sum()
                prior = _freeze(prior)
            stage_books[g].append(Codebook(vectors=_freeze(centers.astype(np.float32)),
                                           prior=prior))
            report.objective_traces[(g, t)] = trace
            report.iterations[(g, t)] = len(trace)
            report.codeword_usage[(g, t)] = np.zeros(k, dtype=np.int64)

        for i in range(layout.n_sub):
            g = int(layout.group_of[i])
            cb = stage_books[g][t]
            if config.ec:
                idx, _, _ = nearest_rate_penalized_batch(
                    residuals[:, i, :], cb.vectors, cb.prior, float(lambdas[t]))
            else:
                idx, _ = nearest_batch(residuals[:, i, :], cb.vectors)
            report.codeword_usage[(g, t)] += np.bincount(idx, minlength=cb.size)
            residuals[:, i, :] -= cb.vectors[idx].astype(np.float64)
            if not np.all(np.isfinite(residuals[:, i, :])):
                raise DataError(f"non-finite residuals after stage {t + 1} "
                                f"(sub-vector {i}, group {g})")
        report.per_stage_distortion.append(
            float(np.einsum("rnd,rnd->", residuals, residuals) / data.shape[0]))

    model = MsvqModel(
        layout=layout,
        codebooks=tuple(tuple(books) for books in stage_books),
        fallback_means=_freeze(fallback.astype(np.float32)),
        ec_enabled=config.ec,
        lambdas=_freeze(lambdas) if lambdas is not None else None,
    )
    if config.ec:
        model = attach_entropy_codes(model, data)
    return model, report


def attach_entropy_codes(model: MsvqModel, data: np.ndarray) -> MsvqModel:
    """Build canonical Huffman codes from measured codeword PMFs.

    The PMFs are measured by a full-depth encoding pass over the data; the
    model's priors (which drive the rate-penalized search) are unchanged.
    """
    pmfs = entropy.measure_group_pmfs(model, data)
    books = tuple(
        tuple(
            Codebook(
                vectors=cb.vectors,
                prior=cb.prior,
                code_lengths=entropy.build_code(pmfs[g][t]).lengths,
            )
            for t, cb in enumerate(group)
        )
        for g, group in enumerate(model.codebooks)
    )
    return MsvqModel(layout=model.layout, codebooks=books,
                     fallback_means=model.fallback_means,
                     ec_enabled=model.ec_enabled, lambdas=model.lambdas)
