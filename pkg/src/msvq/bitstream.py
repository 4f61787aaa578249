"""Container formats: FMAT1 features, MLT1 tables, MSVQ models, MSVP payloads.

Byte-level layouts are documented in docs/FORMATS.md. All integers are
little-endian; vectors are IEEE-754 binary32, priors binary64. Model and table
files are bound by 64-bit digests: the table command stamps the table file's
digest into the model file, and every payload carries the digest of the model
file it was encoded with, so a decoder can never silently pair the wrong
artifacts. In plan-derived mode the payload carries only the bit budget and
both sides re-derive the same stage plan from the shared table.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from . import rate
from .codebook import Codebook, MsvqModel, validate_codebook
from .entropy import BitReader, BitWriter, canonical_code, decode_symbol, decode_table
from .errors import ConfigError, CorruptionError, DataError, MsvqError, StateError
from .layout import assemble_layout
from .quantizer import (
    SelectionPlan,
    _check_features,
    decode_batch,
    encode_batch,
    exact_bit_total,
    full_plan,
)

MODEL_MAGIC = b"MSVQ"
PAYLOAD_MAGIC = b"MSVP"
FMAT_MAGIC = b"FMAT"
MODEL_VERSION = 1
PAYLOAD_VERSION = 1
FMAT_VERSION = 1

FLAG_EC = 0x1
FLAG_STRICT = 0x2
FLAG_CODES = 0x4

MODE_DERIVED = 0
MODE_EXPLICIT = 1

_MODEL_HEADER = struct.Struct("<4sHH5IQ")
_DIGEST_OFFSET = 28  # table_digest position inside the model header
_FMAT_HEADER = struct.Struct("<4s3I")
_PAYLOAD_HEAD = struct.Struct("<4sHBBQII")  # fields before the header CRC
_PAYLOAD_CRC = struct.Struct("<I")
PAYLOAD_HEADER_SIZE = _PAYLOAD_HEAD.size + _PAYLOAD_CRC.size


def digest64(data: bytes) -> int:
    """64-bit content digest used for model/table/payload binding."""
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


def file_digest(path: str) -> int:
    with open(path, "rb") as fh:
        return digest64(fh.read())


# --- FMAT1 feature matrices -------------------------------------------------

def write_features(path: str, data: np.ndarray) -> None:
    data = np.asarray(data)
    if data.ndim != 2:
        raise DataError(f"feature matrix must be 2-D, got shape {data.shape}")
    if not np.all(np.isfinite(data)):
        raise DataError("feature matrix contains non-finite values")
    rows, cols = data.shape
    with open(path, "wb") as fh:
        fh.write(_FMAT_HEADER.pack(FMAT_MAGIC, FMAT_VERSION, rows, cols))
        fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def read_features(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _FMAT_HEADER.size:
        raise CorruptionError(f"{path}: too short for an FMAT1 header")
    magic, version, rows, cols = _FMAT_HEADER.unpack_from(blob, 0)
    if magic != FMAT_MAGIC:
        raise CorruptionError(f"{path}: bad magic {magic!r}, expected {FMAT_MAGIC!r}")
    if version != FMAT_VERSION:
        raise CorruptionError(f"{path}: unsupported FMAT version {version}")
    expected = _FMAT_HEADER.size + 4 * rows * cols
    if len(blob) != expected:
        raise CorruptionError(f"{path}: file is {len(blob)} bytes, header implies {expected}")
    data = np.frombuffer(blob, dtype="<f4", offset=_FMAT_HEADER.size).reshape(rows, cols)
    return data


# --- MLT1 marginal-loss tables ----------------------------------------------

def write_table(path: str, table: rate.MarginalLossTable) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(rate.table_to_dict(table), fh)
        fh.write("\n")


def read_table(path: str) -> rate.MarginalLossTable:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise CorruptionError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise CorruptionError(f"{path}: table document must be a JSON object")
    return rate.table_from_dict(doc)


# --- MSVQ model files ---------------------------------------------------------

@dataclass(frozen=True)
class ModelInfo:
    version: int
    flags: int
    table_digest: int
    file_digest: int


class _Cursor:
    def __init__(self, blob: bytes, name: str):
        self.blob = blob
        self.pos = 0
        self.name = name

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CorruptionError(f"{self.name}: truncated at byte {self.pos} "
                                  f"(need {n} more)")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def array(self, dtype: str, count: int) -> np.ndarray:
        item = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(item * count), dtype=dtype)

    def done(self) -> None:
        if self.pos != len(self.blob):
            raise CorruptionError(f"{self.name}: {len(self.blob) - self.pos} "
                                  f"trailing bytes after the last block")


def model_to_bytes(model: MsvqModel, table_digest: int = 0) -> bytes:
    lay = model.layout
    flags = 0
    if model.ec_enabled:
        flags |= FLAG_EC
    if model.has_codes:
        flags |= FLAG_CODES
    parts = [_MODEL_HEADER.pack(MODEL_MAGIC, MODEL_VERSION, flags,
                                lay.m_dim, lay.sub_dim, lay.n_sub,
                                lay.n_groups, lay.t_max, table_digest)]
    parts.append(np.ascontiguousarray(lay.perm, dtype="<u4").tobytes())
    parts.append(np.ascontiguousarray(lay.group_of, dtype="<u4").tobytes())
    parts.append(np.ascontiguousarray(lay.bits, dtype="u1").tobytes())
    parts.append(np.ascontiguousarray(model.fallback_means, dtype="<f4").tobytes())
    if model.ec_enabled:
        parts.append(np.ascontiguousarray(model.lambdas, dtype="<f8").tobytes())
    for group in model.codebooks:
        for cb in group:
            parts.append(np.ascontiguousarray(cb.vectors, dtype="<f4").tobytes())
    if model.ec_enabled:
        for group in model.codebooks:
            for cb in group:
                parts.append(np.ascontiguousarray(cb.prior, dtype="<f8").tobytes())
    if model.has_codes:
        for group in model.codebooks:
            for cb in group:
                parts.append(np.ascontiguousarray(cb.code_lengths, dtype="u1").tobytes())
    return b"".join(parts)


def write_model(path: str, model: MsvqModel, table_digest: int = 0) -> None:
    with open(path, "wb") as fh:
        fh.write(model_to_bytes(model, table_digest))


def model_from_bytes(blob: bytes, name: str = "model") -> tuple[MsvqModel, ModelInfo]:
    if len(blob) < _MODEL_HEADER.size:
        raise CorruptionError(f"{name}: too short for a model header")
    magic, version, flags, m, d, n, g, t_max, table_digest = _MODEL_HEADER.unpack_from(blob, 0)
    if magic != MODEL_MAGIC:
        raise CorruptionError(f"{name}: bad magic {magic!r}, expected {MODEL_MAGIC!r}")
    if version != MODEL_VERSION:
        raise CorruptionError(f"{name}: unsupported model version {version}")
    cur = _Cursor(blob, name)
    cur.pos = _MODEL_HEADER.size
    try:
        perm = cur.array("<u4", m).astype(np.int64)
        group_of = cur.array("<u4", n).astype(np.int64)
        bits = cur.array("u1", n * t_max).astype(np.int64).reshape(n, t_max)
        fallback = cur.array("<f4", n * d).reshape(n, d)
        lay = assemble_layout(m, d, n, perm, group_of, bits)
        if g != lay.n_groups:
            raise CorruptionError(f"{name}: header says {g} groups, group map has "
                                  f"{lay.n_groups}")
        ec = bool(flags & FLAG_EC)
        has_codes = bool(flags & FLAG_CODES)
        lambdas = cur.array("<f8", t_max) if ec else None
        vectors = [[cur.array("<f4", (1 << int(lay.group_bits(gi)[t])) * d).reshape(-1, d)
                    for t in range(t_max)] for gi in range(g)]
        priors = [[cur.array("<f8", vectors[gi][t].shape[0])
                   for t in range(t_max)] for gi in range(g)] if ec else None
        lengths = [[cur.array("u1", vectors[gi][t].shape[0]).astype(np.int64)
                    for t in range(t_max)] for gi in range(g)] if has_codes else None
        cur.done()
    except (ConfigError, DataError) as exc:
        raise CorruptionError(f"{name}: {exc}") from exc

    books = []
    for gi in range(g):
        row = []
        for t in range(t_max):
            cb = Codebook(
                vectors=vectors[gi][t],
                prior=priors[gi][t] if ec else None,
                code_lengths=lengths[gi][t] if has_codes else None,
            )
            try:
                validate_codebook(cb)
            except MsvqError as exc:
                raise CorruptionError(f"{name}: codebook group {gi} stage {t + 1}: "
                                      f"{exc}") from exc
            row.append(cb)
        books.append(tuple(row))

    model = MsvqModel(layout=lay, codebooks=tuple(books), fallback_means=fallback,
                      ec_enabled=ec, lambdas=lambdas)
    info = ModelInfo(version=version, flags=flags, table_digest=table_digest,
                     file_digest=digest64(blob))
    return model, info


def read_model(path: str) -> tuple[MsvqModel, ModelInfo]:
    with open(path, "rb") as fh:
        blob = fh.read()
    return model_from_bytes(blob, name=path)


def stamp_table_digest(model_path: str, table_digest: int) -> None:
    """Bind a model file to a table file by patching the digest field."""
    read_model(model_path)  # refuse to patch something that is not a valid model
    with open(model_path, "r+b") as fh:
        fh.seek(_DIGEST_OFFSET)
        fh.write(struct.pack("<Q", table_digest))


# --- MSVP payload files -------------------------------------------------------

@dataclass(frozen=True)
class PayloadInfo:
    version: int
    mode: int
    b_cap: int
    count: int
    model_digest: int
    plan: SelectionPlan
    bits_per_vector: np.ndarray  # realized code bits, excluding byte padding


def _plan_field_bits(t_max: int) -> int:
    return max(1, int(np.ceil(np.log2(t_max + 1))))


def _finalize_plan(model: MsvqModel, table: rate.MarginalLossTable,
                   stages: np.ndarray) -> SelectionPlan:
    stages = np.asarray(stages, dtype=np.int64)
    stages.flags.writeable = False
    avg = rate.plan_step_bits(table, stages) if table.mode == rate.MODE_AVERAGE else None
    return SelectionPlan(stages=stages, exact_bits=exact_bit_total(model.layout, stages),
                         avg_bits=avg)


def _check_table(model: MsvqModel, table: rate.MarginalLossTable) -> None:
    lay = model.layout
    if table.n_sub != lay.n_sub or table.t_max != lay.t_max:
        raise ConfigError(f"table is {table.n_sub}x{table.t_max}, model expects "
                          f"{lay.n_sub}x{lay.t_max}")
    if table.mode == rate.MODE_AVERAGE and not model.has_codes:
        raise StateError("average-bits table requires entropy codes on the model")


def _code_length_columns(model: MsvqModel, indices: list[np.ndarray]) -> list[np.ndarray]:
    """Per sub-vector: (rows, t_max) realized code lengths of the full-depth indices."""
    lay = model.layout
    cols = []
    for i in range(lay.n_sub):
        g = int(lay.group_of[i])
        if model.has_codes:
            lens = np.stack([model.codebooks[g][t].code_lengths[indices[i][:, t]]
                             for t in range(lay.t_max)], axis=1)
        else:
            lens = np.broadcast_to(lay.bits[i].astype(np.int64),
                                   (indices[i].shape[0], lay.t_max)).copy()
        cols.append(lens)
    return cols


def write_payload(
    path: str,
    model: MsvqModel,
    model_digest: int,
    table: rate.MarginalLossTable,
    data: np.ndarray,
    b_cap: int,
    strict: bool = False,
    threads: int = 1,
) -> PayloadInfo:
    """Derive the plan for b_cap, encode the data, and write an MSVP file.

    With strict=True, greedy increments are undone (lowest priority first)
    until every vector's realized bit count fits b_cap; the adjusted plan is
    then carried explicitly in the header.
    """
    Z = _check_features(model, data)
    _check_table(model, table)
    b_cap = int(b_cap)
    if not 0 <= b_cap < 2 ** 32:
        raise ConfigError(f"b_cap must fit an unsigned 32-bit field, got {b_cap}")
    lay = model.layout

    # Stage choices are prefix-stable: stage t's index depends only on the
    # sub-vector's earlier stages, so one full-depth pass serves every plan.
    indices, _ = encode_batch(model, Z, full_plan(lay), threads=threads)
    stages, _, order = rate.greedy_order(table, float(b_cap))
    lens = _code_length_columns(model, indices)

    bits_rows = np.zeros(Z.shape[0], dtype=np.int64)
    for i in range(lay.n_sub):
        for t in range(int(stages[i])):
            bits_rows += lens[i][:, t]

    mode = MODE_DERIVED
    if strict and bits_rows.max(initial=0) > b_cap:
        for i_undo in reversed(order):
            if bits_rows.max(initial=0) <= b_cap:
                break
            t_removed = int(stages[i_undo]) - 1
            bits_rows -= lens[i_undo][:, t_removed]
            stages[i_undo] = t_removed
        mode = MODE_EXPLICIT
    plan = _finalize_plan(model, table, stages)

    with open(path, "wb") as fh:
        head = _PAYLOAD_HEAD.pack(PAYLOAD_MAGIC, PAYLOAD_VERSION, mode, 0,
                                  model_digest, b_cap, Z.shape[0])
        fh.write(head)
        fh.write(_PAYLOAD_CRC.pack(zlib.crc32(head)))
        if mode == MODE_EXPLICIT:
            writer = BitWriter()
            field = _plan_field_bits(lay.t_max)
            for t_i in plan.stages:
                writer.write(int(t_i), field)
            fh.write(writer.getvalue())
        use_huffman = model.ec_enabled
        codes = None
        if use_huffman:
            codes = [[canonical_code(model.codebooks[g][t].code_lengths)
                      for t in range(lay.t_max)] for g in range(model.n_groups)]
        for r in range(Z.shape[0]):
            writer = BitWriter()
            for i in range(lay.n_sub):
                g = int(lay.group_of[i])
                for t in range(int(plan.stages[i])):
                    sym = int(indices[i][r, t])
                    if use_huffman:
                        code = codes[g][t]
                        writer.write(int(code.codes[sym]), int(code.lengths[sym]))
                    else:
                        writer.write(sym, int(lay.bits[i, t]))
            fh.write(writer.getvalue())

    return PayloadInfo(version=PAYLOAD_VERSION, mode=mode, b_cap=b_cap,
                       count=Z.shape[0], model_digest=model_digest, plan=plan,
                       bits_per_vector=bits_rows)


def read_payload(
    path: str,
    model: MsvqModel,
    model_digest: int,
    table: rate.MarginalLossTable,
) -> tuple[np.ndarray, PayloadInfo]:
    """Read an MSVP file and reconstruct the feature matrix.

    The caller passes the digest of the model file it loaded; a mismatch with
    the payload header is a hard error, never a silent wrong decode.
    """
    _check_table(model, table)
    lay = model.layout
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < PAYLOAD_HEADER_SIZE:
        raise CorruptionError(f"{path}: too short for an MSVP header")
    magic, version, mode, reserved, digest, b_cap, count = _PAYLOAD_HEAD.unpack_from(blob, 0)
    if magic != PAYLOAD_MAGIC:
        raise CorruptionError(f"{path}: bad magic {magic!r}, expected {PAYLOAD_MAGIC!r}")
    (crc,) = _PAYLOAD_CRC.unpack_from(blob, _PAYLOAD_HEAD.size)
    if crc != zlib.crc32(blob[:_PAYLOAD_HEAD.size]):
        raise CorruptionError(f"{path}: header checksum mismatch; the header is corrupted")
    if version != PAYLOAD_VERSION:
        raise CorruptionError(f"{path}: unsupported payload version {version}")
    if mode not in (MODE_DERIVED, MODE_EXPLICIT):
        raise CorruptionError(f"{path}: unknown plan mode {mode}")
    if reserved != 0:
        raise CorruptionError(f"{path}: reserved header byte is {reserved}, expected 0")
    if digest != model_digest:
        raise CorruptionError(f"{path}: payload was encoded with model digest "
                              f"{digest:#018x}, loaded model is {model_digest:#018x}")

    reader = BitReader(blob)
    reader.bit_offset = 8 * PAYLOAD_HEADER_SIZE
    if mode == MODE_EXPLICIT:
        field = _plan_field_bits(lay.t_max)
        stages = np.array([reader.read(field) for _ in range(lay.n_sub)], dtype=np.int64)
        reader.align()
        if stages.max(initial=0) > lay.t_max:
            raise CorruptionError(f"{path}: explicit plan holds a stage count above "
                                  f"{lay.t_max}")
    else:
        stages = rate.select_stages(table, float(b_cap)).stages
    plan = _finalize_plan(model, table, stages)

    use_huffman = model.ec_enabled
    codes = tables = None
    if use_huffman:
        codes = [[canonical_code(model.codebooks[g][t].code_lengths)
                  for t in range(lay.t_max)] for g in range(model.n_groups)]
        tables = [[decode_table(code) for code in row] for row in codes]

    indices = [np.empty((count, int(plan.stages[i])), dtype=np.int64)
               for i in range(lay.n_sub)]
    bits_rows = np.empty(count, dtype=np.int64)
    for r in range(count):
        start = reader.bit_offset
        for i in range(lay.n_sub):
            g = int(lay.group_of[i])
            for t in range(int(plan.stages[i])):
                if use_huffman:
                    indices[i][r, t] = decode_symbol(reader, codes[g][t], tables[g][t])
                else:
                    indices[i][r, t] = reader.read(int(lay.bits[i, t]))
        bits_rows[r] = reader.bit_offset - start
        reader.align()
    if reader.bit_offset != 8 * len(blob):
        raise CorruptionError(f"{path}: {8 * len(blob) - reader.bit_offset} trailing bits "
                              f"after the last vector")

    z_hat = decode_batch(model, indices, plan, rows=count)
    info = PayloadInfo(version=version, mode=mode, b_cap=b_cap, count=count,
                       model_digest=digest, plan=plan, bits_per_vector=bits_rows)
    return z_hat, info
