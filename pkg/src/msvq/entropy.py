"""Codeword PMF estimation, canonical Huffman codes, and bit-level index IO.

Codes are canonical: transmitter and receiver rebuild identical codebooks from
the length arrays alone, which is what the model file stores. All bit packing
is MSB-first; index streams are emitted sub-vector-major, then stage order,
then zero-padded to a byte boundary.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .codebook import PRIOR_FLOOR, MsvqModel
from .errors import CorruptionError, DataError

MAX_CODE_LENGTH = 32


class BitWriter:
    """MSB-first bit accumulator emitting bytes greedily."""

    def __init__(self) -> None:
        self._buf = bytearray()
        self._acc = 0
        self._nacc = 0
        self.bit_count = 0

    def write(self, value: int, nbits: int) -> None:
        if nbits == 0:
            return
        self._acc = (self._acc << nbits) | (value & ((1 << nbits) - 1))
        self._nacc += nbits
        self.bit_count += nbits
        while self._nacc >= 8:
            self._nacc -= 8
            self._buf.append((self._acc >> self._nacc) & 0xFF)
        self._acc &= (1 << self._nacc) - 1

    def align(self) -> None:
        """Zero-pad to the next byte boundary."""
        if self._nacc:
            self.write(0, 8 - self._nacc)

    def getvalue(self) -> bytes:
        self.align()
        return bytes(self._buf)


class BitReader:
    """MSB-first bit reader over a bytes buffer."""

    def __init__(self, data: bytes) -> None:
        self._data = data
        self.bit_offset = 0

    def read(self, nbits: int) -> int:
        end = self.bit_offset + nbits
        if end > 8 * len(self._data):
            raise CorruptionError(
                f"bitstream truncated: need {nbits} bits at bit offset {self.bit_offset}")
        value = 0
        pos = self.bit_offset
        while nbits > 0:
            byte = self._data[pos >> 3]
            avail = 8 - (pos & 7)
            take = min(avail, nbits)
            value = (value << take) | ((byte >> (avail - take)) & ((1 << take) - 1))
            pos += take
            nbits -= take
        self.bit_offset = pos
        return value

    def align(self) -> None:
        self.bit_offset = (self.bit_offset + 7) & ~7


@dataclass(frozen=True)
class HuffmanCode:
    """Canonical prefix code; codes are derived from lengths alone."""

    lengths: np.ndarray
    codes: np.ndarray
    max_length: int

    @property
    def size(self) -> int:
        return self.lengths.shape[0]


def kraft_sum(lengths: np.ndarray) -> float:
    return float(np.sum(2.0 ** -np.asarray(lengths, dtype=np.float64)))


def canonical_code(lengths: Sequence[int]) -> HuffmanCode:
    """Assign canonical codewords to a length array (ties by symbol index)."""
    lengths = np.array(lengths, dtype=np.int64)  # private copy; frozen below
    if lengths.ndim != 1 or lengths.size < 1 or lengths.min() < 1:
        raise DataError("code lengths must be a non-empty array of positive integers")
    if lengths.max() > MAX_CODE_LENGTH:
        raise DataError(f"code length {lengths.max()} exceeds the {MAX_CODE_LENGTH}-bit cap")
    order = np.lexsort((np.arange(lengths.size), lengths))
    codes = np.zeros(lengths.size, dtype=np.int64)
    code = 0
    prev_len = int(lengths[order[0]])
    for sym in order:
        length = int(lengths[sym])
        code <<= length - prev_len
        codes[sym] = code
        code += 1
        prev_len = length
    lengths.flags.writeable = False
    codes.flags.writeable = False
    return HuffmanCode(lengths=lengths, codes=codes, max_length=int(lengths.max()))


def _limit_lengths(counts: list[int], cap: int) -> None:
    # Standard leaf-collapse rebalance; preserves Kraft equality exactly.
    for length in range(len(counts) - 1, cap, -1):
        while counts[length] > 0:
            j = length - 2
            while j > 0 and counts[j] == 0:
                j -= 1
            if j < 1 or counts[j] == 0:
                raise DataError("cannot limit code lengths: no shallower leaf available")
            counts[length] -= 2
            counts[length - 1] += 1
            counts[j + 1] += 2
            counts[j] -= 1


def huffman_lengths(pmf: np.ndarray) -> np.ndarray:
    """Optimal prefix-code lengths for a PMF, capped at MAX_CODE_LENGTH bits.

    Merge ties resolve by symbol index first, then by merge creation order, so
    the result is deterministic. A single-symbol alphabet still costs 1 bit.
    """
    pmf = np.asarray(pmf, dtype=np.float64)
    if pmf.ndim != 1 or pmf.size < 1:
        raise DataError("pmf must be a non-empty 1-D array")
    if np.any(pmf <= 0.0) or not np.all(np.isfinite(pmf)):
        raise DataError("pmf entries must be positive and finite")
    if abs(float(pmf.sum()) - 1.0) > 1e-6:
        raise DataError(f"pmf sums to {pmf.sum()!r}, not 1")
    k = pmf.size
    if k == 1:
        return np.array([1], dtype=np.int64)

    heap: list[tuple[float, int, list[int]]] = [(float(p), sym, [sym]) for sym, p in enumerate(pmf)]
    heapq.heapify(heap)
    lengths = np.zeros(k, dtype=np.int64)
    tie = k
    while len(heap) > 1:
        w1, _, syms1 = heapq.heappop(heap)
        w2, _, syms2 = heapq.heappop(heap)
        merged = syms1 + syms2
        lengths[merged] += 1
        heapq.heappush(heap, (w1 + w2, tie, merged))
        tie += 1

    if lengths.max() > MAX_CODE_LENGTH:
        counts = [0] * (int(lengths.max()) + 1)
        for length in lengths:
            counts[length] += 1
        _limit_lengths(counts, MAX_CODE_LENGTH)
        new_lengths = np.repeat(
            np.arange(len(counts), dtype=np.int64), counts)
        order = np.lexsort((np.arange(k), lengths))
        lengths = np.zeros(k, dtype=np.int64)
        lengths[order] = new_lengths
    return lengths


def build_code(pmf: np.ndarray) -> HuffmanCode:
    """Canonical Huffman code for a PMF."""
    return canonical_code(huffman_lengths(pmf))


def avg_bits(pmf: np.ndarray, code: HuffmanCode) -> tuple[float, float]:
    """Expected code length and entropy of a PMF, both in bits per symbol."""
    pmf = np.asarray(pmf, dtype=np.float64)
    if pmf.shape != code.lengths.shape:
        raise DataError(f"pmf size {pmf.shape} does not match code size {code.lengths.shape}")
    avg = float(np.dot(pmf, code.lengths))
    entropy = float(-np.dot(pmf, np.log2(pmf)))
    return avg, entropy


def smoothed_pmf(counts: np.ndarray) -> np.ndarray:
    """Laplace-smoothed, floored, renormalized PMF from occurrence counts."""
    counts = np.asarray(counts, dtype=np.float64)
    pmf = (counts + 1.0) / (counts.sum() + counts.size)
    pmf = np.maximum(pmf, PRIOR_FLOOR)
    return pmf / pmf.sum()


def measure_group_pmfs(model: MsvqModel, data: np.ndarray) -> list[list[np.ndarray]]:
    """Per-(group, stage) codeword PMFs from one full-depth encoding pass.

    Index occurrences are pooled across all sub-vectors of a group because
    those sub-vectors share the codebook.
    """
    from .quantizer import encode_batch, full_plan  # deferred: avoids import cycle

    lay = model.layout
    indices, _ = encode_batch(model, data, full_plan(lay))
    pmfs: list[list[np.ndarray]] = []
    for g in range(model.n_groups):
        members = lay.group_members(g)
        row: list[np.ndarray] = []
        for t in range(model.t_max):
            k = model.codebooks[g][t].size
            counts = np.zeros(k, dtype=np.int64)
            for i in members:
                counts += np.bincount(indices[i][:, t], minlength=k)
            row.append(smoothed_pmf(counts))
        pmfs.append(row)
    return pmfs


def estimate_pmf(model: MsvqModel, data: np.ndarray, sub_index: int, stage: int) -> np.ndarray:
    """Empirical codeword PMF for one sub-vector's stage (0-based).

    Runs full-depth encoding over the data and counts index selections at the
    given stage, pooled across the sub-vector's codebook-sharing group.
    """
    g = int(model.layout.group_of[sub_index])
    return measure_group_pmfs(model, data)[g][stage]


def encode_indices(
    streams: Sequence[Sequence[int]],
    codes: Sequence[Sequence[HuffmanCode]],
) -> bytes:
    """Concatenate prefix codes for one vector's index streams.

    streams[i] holds the active-stage indices of sub-vector i; codes[i][t] is
    the code for its stage t. Output is zero-padded to a byte boundary.
    """
    writer = BitWriter()
    for i, stream in enumerate(streams):
        for t, sym in enumerate(stream):
            code = codes[i][t]
            writer.write(int(code.codes[sym]), int(code.lengths[sym]))
    return writer.getvalue()


def decode_symbol(reader: BitReader, code: HuffmanCode, table: dict[int, dict[int, int]]) -> int:
    value = 0
    length = 0
    start = reader.bit_offset
    while length < code.max_length:
        value = (value << 1) | reader.read(1)
        length += 1
        row = table.get(length)
        if row is not None:
            sym = row.get(value)
            if sym is not None:
                return sym
    raise CorruptionError(f"invalid prefix code at bit offset {start}")


def decode_table(code: HuffmanCode) -> dict[int, dict[int, int]]:
    table: dict[int, dict[int, int]] = {}
    for sym in range(code.size):
        table.setdefault(int(code.lengths[sym]), {})[int(code.codes[sym])] = sym
    return table


def decode_indices(
    buffer: bytes,
    plan_stages: Sequence[int],
    codes: Sequence[Sequence[HuffmanCode]],
) -> list[list[int]]:
    """Invert encode_indices given the stage counts and the same codes."""
    reader = BitReader(buffer)
    tables = [[decode_table(code) for code in row] for row in codes]
    streams: list[list[int]] = []
    for i, t_i in enumerate(plan_stages):
        stream = [decode_symbol(reader, codes[i][t], tables[i][t]) for t in range(t_i)]
        streams.append(stream)
    return streams
