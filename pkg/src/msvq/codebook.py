"""Codebook storage, shared-group resolution, and nearest-codeword search.

Search is an exhaustive scan: codebooks hold at most 2^8 codewords, and exact
argmin with a fixed tie rule (lowest index) is required for deterministic,
bit-exact encoding. Batch kernels drop the query-norm term, which is constant
per query and cannot change the argmin; reported distortions are recomputed
from the actual difference so an exact match yields exactly 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, CorruptionError, DataError
from .layout import SubVectorLayout

PRIOR_FLOOR = 2.0 ** -32  # keeps -log2(p) finite for every codeword
_CHUNK = 4096


@dataclass(frozen=True)
class Codebook:
    """One stage codebook: K = 2^B codewords of dimension D.

    prior holds the codeword selection probabilities used by rate-penalized
    search; code_lengths holds canonical Huffman lengths once entropy codes
    have been built. Both are None until their pipeline step has run.
    """

    vectors: np.ndarray
    prior: np.ndarray | None = None
    code_lengths: np.ndarray | None = None

    @property
    def size(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


def validate_codebook(cb: Codebook) -> None:
    k = cb.size
    if k < 1 or (k & (k - 1)) != 0:
        raise ConfigError(f"codebook size {k} is not a power of two")
    if not np.all(np.isfinite(cb.vectors)):
        raise DataError("codebook vectors contain non-finite values")
    if cb.prior is not None:
        if cb.prior.shape != (k,):
            raise ConfigError(f"prior length {cb.prior.shape} != codebook size {k}")
        if np.any(cb.prior <= 0.0):
            raise CorruptionError("codeword prior has non-positive entries")
        if abs(float(cb.prior.sum()) - 1.0) > 1e-9:
            raise CorruptionError(f"codeword prior sums to {cb.prior.sum()!r}, not 1")
    if cb.code_lengths is not None:
        if cb.code_lengths.shape != (k,) or cb.code_lengths.min() < 1:
            raise ConfigError("code lengths must be positive and one per codeword")
        if float(np.sum(2.0 ** -cb.code_lengths.astype(np.float64))) > 1.0 + 1e-12:
            raise CorruptionError("code lengths violate the Kraft inequality")


@dataclass(frozen=True)
class MsvqModel:
    """Immutable trained codec model.

    codebooks[g][t] is the stage-(t+1) codebook shared by every sub-vector in
    group g. fallback_means holds the per-sub-vector training means (layout
    order) used to reconstruct sub-vectors that receive zero stages. lambdas
    holds the per-stage distortion weights of the rate-penalized search and is
    present only on entropy-constrained models.
    """

    layout: SubVectorLayout
    codebooks: tuple[tuple[Codebook, ...], ...]
    fallback_means: np.ndarray
    ec_enabled: bool = False
    lambdas: np.ndarray | None = None

    @property
    def t_max(self) -> int:
        return self.layout.t_max

    @property
    def n_groups(self) -> int:
        return len(self.codebooks)

    @property
    def has_codes(self) -> bool:
        return self.codebooks[0][0].code_lengths is not None


def resolve(model: MsvqModel, sub_index: int, stage: int) -> Codebook:
    """Codebook used by sub-vector sub_index at 0-based stage index."""
    if not 0 <= sub_index < model.layout.n_sub:
        raise IndexError(f"sub-vector index {sub_index} out of range [0, {model.layout.n_sub})")
    if not 0 <= stage < model.t_max:
        raise IndexError(f"stage index {stage} out of range [0, {model.t_max})")
    return model.codebooks[int(model.layout.group_of[sub_index])][stage]


def codeword_param_count(model: MsvqModel) -> int:
    """Total number of stored codeword parameters (sum of K*D over codebooks)."""
    return sum(cb.size * cb.dim for group in model.codebooks for cb in group)


def nearest_batch(points: np.ndarray, vectors: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exhaustive nearest-codeword scan for a batch of queries.

    Returns (indices, distortions); ties go to the lowest index.
    """
    pts = np.ascontiguousarray(points, dtype=np.float64)
    vec = np.ascontiguousarray(vectors, dtype=np.float64)
    v2 = np.einsum("kd,kd->k", vec, vec)
    idx = np.empty(pts.shape[0], dtype=np.int64)
    for start in range(0, pts.shape[0], _CHUNK):
        chunk = pts[start:start + _CHUNK]
        scores = chunk @ vec.T
        scores *= -2.0
        scores += v2
        idx[start:start + _CHUNK] = np.argmin(scores, axis=1)
    diff = pts - vec[idx]
    dist = np.einsum("pd,pd->p", diff, diff)
    return idx, dist


def nearest_rate_penalized_batch(
    points: np.ndarray,
    vectors: np.ndarray,
    prior: np.ndarray,
    rd_lambda: float,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batch scan minimizing rd_lambda * ||r - c_k||^2 - log2(prior_k).

    Returns (indices, distortions, rate_bits). The query-norm term is again
    constant per query and omitted from the score.
    """
    if rd_lambda <= 0.0:
        raise ConfigError(f"rd_lambda must be positive, got {rd_lambda}")
    if prior is None:
        raise CorruptionError("rate-penalized search requires codeword priors")
    if np.any(prior <= 0.0):
        raise CorruptionError("codeword prior has non-positive entries; model is corrupted")
    pts = np.ascontiguousarray(points, dtype=np.float64)
    vec = np.ascontiguousarray(vectors, dtype=np.float64)
    penalty = -np.log2(prior) + rd_lambda * np.einsum("kd,kd->k", vec, vec)
    idx = np.empty(pts.shape[0], dtype=np.int64)
    for start in range(0, pts.shape[0], _CHUNK):
        chunk = pts[start:start + _CHUNK]
        scores = chunk @ vec.T
        scores *= -2.0 * rd_lambda
        scores += penalty
        idx[start:start + _CHUNK] = np.argmin(scores, axis=1)
    diff = pts - vec[idx]
    dist = np.einsum("pd,pd->p", diff, diff)
    return idx, dist, -np.log2(prior[idx])


def _check_query(cb: Codebook, r: np.ndarray) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (cb.dim,):
        raise DataError(f"query shape {r.shape} does not match codebook dim {cb.dim}")
    if not np.all(np.isfinite(r)):
        raise DataError("query vector contains non-finite values")
    return r


def nearest(codebook: Codebook, r: np.ndarray) -> tuple[int, float]:
    """Index and squared Euclidean distortion of the closest codeword."""
    r = _check_query(codebook, r)
    idx, dist = nearest_batch(r[None, :], codebook.vectors)
    return int(idx[0]), float(dist[0])


def nearest_rate_penalized(
    codebook: Codebook, r: np.ndarray, rd_lambda: float
) -> tuple[int, float, float]:
    """Closest codeword under the distortion-plus-rate objective.

    Returns (index, squared distortion, rate in bits = -log2 prior[index]).
    """
    r = _check_query(codebook, r)
    if codebook.prior is None:
        raise CorruptionError("codebook has no prior; train in entropy-constrained mode")
    idx, dist, rate = nearest_rate_penalized_batch(
        r[None, :], codebook.vectors, codebook.prior, rd_lambda)
    return int(idx[0]), float(dist[0]), float(rate[0])
