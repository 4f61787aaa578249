"""Marginal-loss table construction and greedy stage selection under a budget.

The table entry loss(i, T) is the mean squared feature-space error when
sub-vector i is truncated to T stages while every other sub-vector uses all
stages. Squared error decomposes across sub-vectors, so one full-depth
encoding pass yields the whole table; a direct per-entry evaluation lives in
the oracle module for cross-checking.

Selection starts from all-zero stage counts and repeatedly grants one more
stage to the sub-vector with the best loss drop per bit among those whose next
step still fits the budget, stopping when nothing fits. Ties go to the lowest
sub-vector index.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .codebook import MsvqModel, nearest_batch, nearest_rate_penalized_batch
from .errors import ConfigError, DataError, StateError
from .quantizer import SelectionPlan, _check_features

_ROW_CHUNK = 4096  # fixed row chunking keeps results identical for any worker count

MODE_EXACT = "exact"
MODE_AVERAGE = "average"


@dataclass(frozen=True)
class MarginalLossTable:
    """Lookup table driving stage selection.

    loss has shape (N, t_max + 1); step_bits has shape (N, t_max) and holds
    exact bit widths (mode "exact") or measured mean code lengths per module
    (mode "average").
    """

    loss: np.ndarray
    step_bits: np.ndarray
    mode: str

    @property
    def n_sub(self) -> int:
        return self.loss.shape[0]

    @property
    def t_max(self) -> int:
        return self.step_bits.shape[1]


def _table_pass(model: MsvqModel, sub: np.ndarray, want_lengths: bool):
    """Per-chunk sums of cumulative sub-vector distortions and code lengths."""
    lay = model.layout
    n, t_max = lay.n_sub, lay.t_max
    dist_sums = np.empty((n, t_max + 1), dtype=np.float64)
    len_sums = np.zeros((n, t_max), dtype=np.float64) if want_lengths else None
    fallback = model.fallback_means.astype(np.float64)
    for i in range(n):
        g = int(lay.group_of[i])
        diff = sub[:, i, :] - fallback[i]
        dist_sums[i, 0] = np.einsum("rd,rd->", diff, diff)
        r = sub[:, i, :].copy()
        for t in range(t_max):
            cb = model.codebooks[g][t]
            if model.ec_enabled:
                idx, _, _ = nearest_rate_penalized_batch(
                    r, cb.vectors, cb.prior, float(model.lambdas[t]))
            else:
                idx, _ = nearest_batch(r, cb.vectors)
            r -= cb.vectors[idx].astype(np.float64)
            dist_sums[i, t + 1] = np.einsum("rd,rd->", r, r)
            if want_lengths:
                len_sums[i, t] = float(cb.code_lengths[idx].sum())
    return dist_sums, len_sums


def build_table(
    model: MsvqModel,
    data: np.ndarray,
    mode: str | None = None,
    threads: int = 1,
) -> MarginalLossTable:
    """Build the marginal-loss table from a feature matrix.

    mode defaults to "average" for entropy-constrained models and "exact"
    otherwise. Average mode requires entropy codes on the model.
    """
    if mode is None:
        mode = MODE_AVERAGE if model.ec_enabled else MODE_EXACT
    if mode not in (MODE_EXACT, MODE_AVERAGE):
        raise ConfigError(f"unknown table mode {mode!r}")
    if mode == MODE_AVERAGE and not model.has_codes:
        raise StateError("average-bits table requires entropy codes on the model")

    Z = _check_features(model, data)
    if Z.shape[0] < 1:
        raise DataError("cannot build a marginal-loss table from an empty feature matrix")
    lay = model.layout
    sub = Z[:, lay.perm].reshape(Z.shape[0], lay.n_sub, lay.sub_dim)
    want_lengths = mode == MODE_AVERAGE

    chunks = [sub[a:a + _ROW_CHUNK] for a in range(0, sub.shape[0], _ROW_CHUNK)]
    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda c: _table_pass(model, c, want_lengths), chunks))
    else:
        parts = [_table_pass(model, c, want_lengths) for c in chunks]

    rows = sub.shape[0]
    dist = sum(p[0] for p in parts) / rows
    full_loss = float(dist[:, -1].sum())
    loss = full_loss - dist[:, -1:] + dist
    if want_lengths:
        step_bits = sum(p[1] for p in parts) / rows
    else:
        step_bits = lay.bits.astype(np.float64)
    loss.flags.writeable = False
    step_bits = np.ascontiguousarray(step_bits)
    step_bits.flags.writeable = False
    return MarginalLossTable(loss=loss, step_bits=step_bits, mode=mode)


def greedy_order(table: MarginalLossTable, b_cap: float) -> tuple[np.ndarray, float, list[int]]:
    """Greedy increments under the budget; returns (stages, used_bits, order).

    order lists the sub-vector index granted a stage at each pick, in pick
    order, which is also descending priority.
    """
    if b_cap < 0:
        raise ConfigError(f"bit budget must be non-negative, got {b_cap}")
    loss, step_bits = table.loss, table.step_bits
    n, t_max = step_bits.shape
    stages = np.zeros(n, dtype=np.int64)
    used = 0.0
    order: list[int] = []
    while True:
        best_i = -1
        best_ratio = -np.inf
        for i in range(n):
            t = stages[i]
            if t >= t_max:
                continue
            step = step_bits[i, t]
            if used + step > b_cap:
                continue
            ratio = (loss[i, t] - loss[i, t + 1]) / step
            if ratio > best_ratio:
                best_ratio = ratio
                best_i = i
        if best_i < 0:
            return stages, used, order
        used += step_bits[best_i, stages[best_i]]
        stages[best_i] += 1
        order.append(best_i)


def select_stages(table: MarginalLossTable, b_cap: float) -> SelectionPlan:
    """Derive the stage-count plan for a bit budget."""
    stages, used, _ = greedy_order(table, b_cap)
    stages.flags.writeable = False
    if table.mode == MODE_EXACT:
        return SelectionPlan(stages=stages, exact_bits=int(round(used)), avg_bits=None)
    return SelectionPlan(stages=stages, exact_bits=None, avg_bits=used)


def plan_predicted_loss(table: MarginalLossTable, stages: np.ndarray) -> float:
    """Table-predicted total loss of a stage-count vector."""
    return float(table.loss[np.arange(table.n_sub), np.asarray(stages, dtype=np.int64)].sum())


def plan_step_bits(table: MarginalLossTable, stages: np.ndarray) -> float:
    """Cumulative step-bit cost of a stage-count vector under the table."""
    total = 0.0
    for i, t_i in enumerate(np.asarray(stages, dtype=np.int64)):
        total += float(table.step_bits[i, :t_i].sum())
    return total


def validate_convexity(table: MarginalLossTable) -> list[dict[str, bool]]:
    """Per-row report: strictly-decreasing losses and non-increasing drops.

    Greedy selection is provably optimal only when every row passes both
    checks and its step bits are equal; this is a report, not a gate.
    """
    out = []
    for row in table.loss:
        drops = row[:-1] - row[1:]
        out.append({
            "monotone": bool(np.all(drops > 0.0)),
            "convex": bool(np.all(np.diff(drops) <= 0.0)),
        })
    return out


def table_to_dict(table: MarginalLossTable) -> dict:
    return {
        "format": "MLT1",
        "n": table.n_sub,
        "t_max": table.t_max,
        "mode": table.mode,
        "loss": table.loss.tolist(),
        "step_bits": table.step_bits.tolist(),
    }


def table_from_dict(doc: dict) -> MarginalLossTable:
    from .errors import CorruptionError

    try:
        n, t_max, mode = int(doc["n"]), int(doc["t_max"]), str(doc["mode"])
        loss = np.asarray(doc["loss"], dtype=np.float64)
        step_bits = np.asarray(doc["step_bits"], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptionError(f"malformed table document: {exc}") from exc
    if mode not in (MODE_EXACT, MODE_AVERAGE):
        raise CorruptionError(f"table mode {mode!r} is not exact/average")
    if loss.shape != (n, t_max + 1) or step_bits.shape != (n, t_max):
        raise CorruptionError(f"table shapes {loss.shape}/{step_bits.shape} do not match "
                              f"n={n}, t_max={t_max}")
    if not (np.all(np.isfinite(loss)) and np.all(np.isfinite(step_bits))):
        raise CorruptionError("table contains non-finite values")
    if np.any(step_bits <= 0):
        raise CorruptionError("table step bits must be positive")
    full = loss[:, -1]
    scale = max(float(np.abs(full).max()), 1e-30)
    if float(np.abs(full - full[0]).max()) > 1e-9 * scale:
        raise CorruptionError("last loss column must equal the full-model loss in every row")
    loss.flags.writeable = False
    step_bits.flags.writeable = False
    return MarginalLossTable(loss=loss, step_bits=step_bits, mode=mode)
