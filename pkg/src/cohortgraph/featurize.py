"""Per-modality feature blocks and their assembly into the node matrix.

Five blocks, rows aligned to cohort order:

* ``admissions``  — 4 numerics + one-hot demographics, fixed width 78
* ``diagnoses``   — mean embedding of the first 10 codes' titles
* ``procedures``  — mean embedding of the first 5 codes' titles
* ``labevents``   — fraction of abnormal flags per lab item
* ``notes``       — sliding-window mean embedding of the discharge note

Missing modalities are zero rows. Min-max scaling applies to the
admissions and labevents blocks (fit on training rows only), row-wise L2
normalization to the embedding blocks.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from . import schema
from .datagen import CodeRow, RawTables
from .errors import (
    CodeLookupError,
    ConfigError,
    CorruptFileError,
    EncodingError,
    ParseError,
    ShapeError,
)
from .ingest import Cohort

EMBED_BLOCKS = ("diagnoses", "procedures", "notes")
MINMAX_BLOCKS = ("admissions", "labevents")
DIAG_CODE_LIMIT = 10
PROC_CODE_LIMIT = 5
# Column index of days_since_previous inside the admissions block; its
# sentinel value (-1) is excluded when fitting the min-max scaler so that
# clamping maps the sentinel to 0.
DAYS_SINCE_PREV_COL = 3

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _splitmix64(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (x + np.uint64(_GOLDEN)).astype(np.uint64)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


def _fnv1a(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for b in data:
        h = ((h ^ b) * 0x100000001B3) & _MASK64
    return h


class Embedder(Protocol):
    dimension: int
    max_window: int

    def embed_tokens(self, tokens: Sequence[str]) -> np.ndarray: ...


class HashEmbedder:
    """Deterministic stand-in for a text encoder.

    Each token maps to a fixed pseudo-random unit vector derived from a
    splitmix-style hash of (token, seed); a token window embeds to the
    mean of its token vectors.
    """

    def __init__(self, dimension: int = 768, seed: int = 0, max_window: int = 512):
        if dimension <= 0:
            raise ConfigError(f"embedder dimension must be positive, got {dimension}")
        if max_window <= 0:
            raise ConfigError(f"max_window must be positive, got {max_window}")
        self.dimension = dimension
        self.max_window = max_window
        self.seed = seed
        self._seed_mix = int(_splitmix64(np.uint64(seed & _MASK64)))
        self._cache: dict[str, np.ndarray] = {}

    def _token_vector(self, token: str) -> np.ndarray:
        vec = self._cache.get(token)
        if vec is None:
            h = _fnv1a(token.encode("utf-8")) ^ self._seed_mix
            lanes = np.arange(1, self.dimension + 1, dtype=np.uint64)
            with np.errstate(over="ignore"):
                seeds = np.uint64(h) + lanes * np.uint64(_GOLDEN)
            states = _splitmix64(seeds)
            vals = (states >> np.uint64(11)).astype(np.float64) * 2.0 ** -53
            vec = 2.0 * vals - 1.0
            vec /= np.linalg.norm(vec)
            self._cache[token] = vec
        return vec

    def embed_tokens(self, tokens: Sequence[str]) -> np.ndarray:
        if len(tokens) > self.max_window:
            raise ConfigError(
                f"window of {len(tokens)} tokens exceeds max_window={self.max_window}"
            )
        if not tokens:
            return np.zeros(self.dimension)
        out = np.zeros(self.dimension)
        for t in tokens:
            out += self._token_vector(t)
        return out / len(tokens)


def window_offsets(n_tokens: int, window: int, stride: int) -> list[int]:
    """Window start offsets: multiples of `stride` up to and including the
    first offset whose window covers the end of the sequence."""
    offsets = [0]
    while offsets[-1] + window < n_tokens:
        offsets.append(offsets[-1] + stride)
    return offsets


def embed_note(text: str, embedder: Embedder) -> np.ndarray:
    """Sliding-window embedding of whitespace-tokenized text; empty text
    maps to the zero vector."""
    tokens = text.split()
    if not tokens:
        return np.zeros(embedder.dimension)
    window = embedder.max_window
    out = np.zeros(embedder.dimension)
    offsets = window_offsets(len(tokens), window, window // 2)
    for off in offsets:
        out += embedder.embed_tokens(tokens[off : off + window])
    return out / len(offsets)


def select_codes(codes: Sequence[CodeRow], limit: int) -> list[CodeRow]:
    """First `limit` codes by seq_num; equal seq_num breaks ties by code."""
    return sorted(codes, key=lambda c: (c.seq_num, c.icd_code))[:limit]


def embed_code_set(
    codes: Sequence[CodeRow],
    code_text_map: dict[tuple[str, int], str],
    embedder: Embedder,
    _cache: dict | None = None,
) -> np.ndarray:
    """Mean embedding of the codes' titles; no codes -> zero vector."""
    if not codes:
        return np.zeros(embedder.dimension)
    unresolved = [
        f"{c.icd_code}(v{c.icd_version})"
        for c in codes
        if (c.icd_code, c.icd_version) not in code_text_map
    ]
    if unresolved:
        raise CodeLookupError(f"codes missing from code_text_map: {', '.join(unresolved)}")
    out = np.zeros(embedder.dimension)
    for c in codes:
        key = (c.icd_code, c.icd_version)
        vec = _cache.get(key) if _cache is not None else None
        if vec is None:
            vec = embed_note(code_text_map[key], embedder)
            if _cache is not None:
                _cache[key] = vec
        out += vec
    return out / len(codes)


@dataclass
class FeatureBlock:
    name: str
    matrix: np.ndarray  # (n_admissions, width) float64
    missing_mask: np.ndarray  # (n_admissions,) bool; True -> zero-filled row
    meta: dict = field(default_factory=dict)

    @property
    def width(self) -> int:
        return self.matrix.shape[1]


# ---------------------------------------------------------------------------
# Admissions block (fixed width 78; see schema module docstring)

_CATEGORICAL_GROUPS = (
    ("gender", schema.GENDERS, False),
    ("admission_type", schema.ADMISSION_TYPES, True),
    ("admission_location", schema.ADMISSION_LOCATIONS, True),
    ("discharge_location", schema.DISCHARGE_LOCATIONS, True),
    ("insurance", schema.INSURANCES, True),
    ("language", schema.LANGUAGES, True),
    ("ethnicity", schema.ETHNICITIES, True),
    ("marital_status", schema.MARITAL_STATUSES, True),
    ("previous_admission_type", schema.ADMISSION_TYPES, True),
)

_NUMERIC_COLUMNS = (
    "age",
    "month_of_admission",
    "length_of_stay_hours",
    "days_since_previous",
)


def admissions_feature_names() -> list[str]:
    names = list(_NUMERIC_COLUMNS)
    for col, values, has_missing in _CATEGORICAL_GROUPS:
        names.extend(f"{col}={v}" for v in values)
        if has_missing:
            names.append(f"{col}=(missing)")
    return names


def encode_admissions(cohort: Cohort) -> FeatureBlock:
    names = admissions_feature_names()
    width = len(names)
    assert width == schema.ADMISSIONS_BLOCK_WIDTH
    lookup = {}
    offset = len(_NUMERIC_COLUMNS)
    for col, values, has_missing in _CATEGORICAL_GROUPS:
        lookup[col] = ({v: offset + i for i, v in enumerate(values)}, has_missing, offset)
        offset += len(values) + (1 if has_missing else 0)

    mat = np.zeros((len(cohort.records), width))
    for i, r in enumerate(cohort.records):
        mat[i, 0] = r.age
        mat[i, 1] = r.month_of_admission
        mat[i, 2] = r.length_of_stay_hours
        mat[i, 3] = r.days_since_previous
        for col, values, has_missing in _CATEGORICAL_GROUPS:
            value = getattr(r, col)
            index, allow_missing, group_off = lookup[col]
            missing = value == schema.MISSING or (
                col == "previous_admission_type" and value == schema.PREV_TYPE_NONE
            )
            if missing:
                if not allow_missing:
                    raise EncodingError(f"column {col!r} may not be missing")
                mat[i, group_off + len(values)] = 1.0
            elif value in index:
                mat[i, index[value]] = 1.0
            else:
                raise EncodingError(f"unknown value {value!r} in column {col!r}")
    missing_mask = np.zeros(len(cohort.records), dtype=bool)  # always present
    return FeatureBlock("admissions", mat, missing_mask, {"columns": names})


# ---------------------------------------------------------------------------
# Lab events block

def default_item_vocab(n_items: int) -> list[int]:
    """Item ids emitted by the synthetic generator, in index order."""
    return [50_000 + i for i in range(n_items)]


def encode_labevents(
    tables: RawTables, cohort: Cohort, item_vocab: Sequence[int]
) -> FeatureBlock:
    """cell(a, item) = fraction of that item's events flagged abnormal in
    admission a; items never measured and admissions without lab events
    are zero. Events on items outside the vocabulary are dropped and
    counted in meta['dropped_events']."""
    row_of = cohort.row_of()
    col_of = {item: j for j, item in enumerate(item_vocab)}
    n, width = len(cohort.records), len(item_vocab)
    totals = np.zeros((n, width))
    abnormal = np.zeros((n, width))
    dropped = 0
    for ev in tables.labevents:
        i = row_of.get(ev.hadm_id)
        if i is None:
            continue  # admission filtered out of the cohort
        j = col_of.get(ev.itemid)
        if j is None:
            dropped += 1
            continue
        totals[i, j] += 1.0
        if ev.flag == "abnormal":
            abnormal[i, j] += 1.0
    with np.errstate(invalid="ignore", divide="ignore"):
        mat = np.where(totals > 0, abnormal / np.maximum(totals, 1.0), 0.0)
    missing_mask = totals.sum(axis=1) == 0
    return FeatureBlock("labevents", mat, missing_mask, {"dropped_events": dropped})


# ---------------------------------------------------------------------------
# Code-embedding and note-embedding blocks

def _encode_codes(
    name: str,
    rows: Sequence[CodeRow],
    cohort: Cohort,
    code_text_map: dict[tuple[str, int], str],
    embedder: Embedder,
    limit: int,
) -> FeatureBlock:
    row_of = cohort.row_of()
    per_row: dict[int, list[CodeRow]] = {}
    for c in rows:
        i = row_of.get(c.hadm_id)
        if i is not None:
            per_row.setdefault(i, []).append(c)
    n = len(cohort.records)
    mat = np.zeros((n, embedder.dimension))
    missing_mask = np.ones(n, dtype=bool)
    cache: dict[tuple[str, int], np.ndarray] = {}
    for i, codes in per_row.items():
        mat[i] = embed_code_set(select_codes(codes, limit), code_text_map, embedder, cache)
        missing_mask[i] = False
    return FeatureBlock(name, mat, missing_mask)


def encode_diagnoses(tables, cohort, code_text_map, embedder) -> FeatureBlock:
    return _encode_codes(
        "diagnoses", tables.diagnoses_icd, cohort, code_text_map, embedder, DIAG_CODE_LIMIT
    )


def encode_procedures(tables, cohort, code_text_map, embedder) -> FeatureBlock:
    return _encode_codes(
        "procedures", tables.procedures_icd, cohort, code_text_map, embedder, PROC_CODE_LIMIT
    )


def encode_notes(tables: RawTables, cohort: Cohort, embedder: Embedder) -> FeatureBlock:
    row_of = cohort.row_of()
    n = len(cohort.records)
    mat = np.zeros((n, embedder.dimension))
    missing_mask = np.ones(n, dtype=bool)
    for note in tables.discharge_notes:
        i = row_of.get(note.hadm_id)
        if i is None:
            continue
        mat[i] = embed_note(note.note_text, embedder)
        missing_mask[i] = False
    return FeatureBlock("notes", mat, missing_mask)


def compute_blocks(
    tables: RawTables,
    cohort: Cohort,
    code_text_map: dict[tuple[str, int], str],
    embedder: Embedder,
    item_vocab: Sequence[int],
) -> dict[str, FeatureBlock]:
    return {
        "admissions": encode_admissions(cohort),
        "diagnoses": encode_diagnoses(tables, cohort, code_text_map, embedder),
        "procedures": encode_procedures(tables, cohort, code_text_map, embedder),
        "labevents": encode_labevents(tables, cohort, item_vocab),
        "notes": encode_notes(tables, cohort, embedder),
    }


# ---------------------------------------------------------------------------
# Assembly and scaling

@dataclass
class NodeFeatureMatrix:
    matrix: np.ndarray
    block_names: tuple[str, ...]
    block_widths: tuple[int, ...]
    admission_ids: np.ndarray  # int64, row-aligned
    scaled: bool = False

    def block_slice(self, name: str) -> slice:
        off = 0
        for bname, width in zip(self.block_names, self.block_widths):
            if bname == name:
                return slice(off, off + width)
            off += width
        raise KeyError(name)

    @property
    def n_rows(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_cols(self) -> int:
        return self.matrix.shape[1]


def assemble(
    blocks: dict[str, FeatureBlock],
    selection: Sequence[str],
    admission_ids: Sequence[int] | None = None,
) -> NodeFeatureMatrix:
    """Concatenate the selected blocks in canonical order. The admissions
    block must always be part of the selection."""
    chosen = [name for name in schema.BLOCK_ORDER if name in selection]
    unknown = set(selection) - set(schema.BLOCK_ORDER)
    if unknown:
        raise ConfigError(f"unknown blocks in selection: {sorted(unknown)}")
    if "admissions" not in chosen:
        raise ConfigError("selection must include the admissions block")
    rows = {blocks[name].matrix.shape[0] for name in chosen}
    if len(rows) != 1:
        raise ShapeError(
            f"blocks are not row-aligned: {[(n, blocks[n].matrix.shape[0]) for n in chosen]}"
        )
    matrix = np.hstack([blocks[name].matrix for name in chosen])
    n = matrix.shape[0]
    if admission_ids is None:
        ids = np.arange(n, dtype=np.int64)
    else:
        ids = np.asarray(admission_ids, dtype=np.int64)
        if ids.shape[0] != n:
            raise ShapeError(f"{ids.shape[0]} admission ids for {n} rows")
    return NodeFeatureMatrix(
        matrix=matrix,
        block_names=tuple(chosen),
        block_widths=tuple(blocks[name].width for name in chosen),
        admission_ids=ids,
    )


@dataclass
class ScalerSet:
    mins: dict[str, np.ndarray]
    maxs: dict[str, np.ndarray]


def fit_scalers(features: NodeFeatureMatrix, train_rows: np.ndarray) -> ScalerSet:
    """Per-column min/max for the min-max blocks, fit on training rows only.
    The days-since-previous sentinel is excluded from its column's fit."""
    train_rows = np.asarray(train_rows)
    if train_rows.dtype == bool:
        train_rows = np.flatnonzero(train_rows)
    if train_rows.size == 0:
        raise ConfigError("fit_scalers requires a non-empty training split")
    mins: dict[str, np.ndarray] = {}
    maxs: dict[str, np.ndarray] = {}
    for name in MINMAX_BLOCKS:
        if name not in features.block_names:
            continue
        sub = features.matrix[np.ix_(train_rows, np.arange(features.n_cols))][
            :, features.block_slice(name)
        ]
        lo = sub.min(axis=0)
        hi = sub.max(axis=0)
        if name == "admissions":
            col = sub[:, DAYS_SINCE_PREV_COL]
            real = col[col != schema.DAYS_SINCE_PREV_SENTINEL]
            if real.size:
                lo[DAYS_SINCE_PREV_COL] = real.min()
                hi[DAYS_SINCE_PREV_COL] = real.max()
            else:
                lo[DAYS_SINCE_PREV_COL] = 0.0
                hi[DAYS_SINCE_PREV_COL] = 0.0
        mins[name] = lo
        maxs[name] = hi
    return ScalerSet(mins=mins, maxs=maxs)


def apply_scalers(features: NodeFeatureMatrix, scalers: ScalerSet) -> NodeFeatureMatrix:
    """Min-max blocks -> [0,1] with clamping (constant columns -> 0);
    embedding blocks -> unit row L2 norm (zero rows unchanged)."""
    out = features.matrix.copy()
    for name in features.block_names:
        sl = features.block_slice(name)
        if name in MINMAX_BLOCKS:
            if name not in scalers.mins:
                raise ShapeError(f"scaler set has no parameters for block {name!r}")
            lo, hi = scalers.mins[name], scalers.maxs[name]
            if lo.shape[0] != sl.stop - sl.start:
                raise ShapeError(
                    f"scaler width {lo.shape[0]} != block width {sl.stop - sl.start}"
                )
            span = hi - lo
            safe = np.where(span > 0, span, 1.0)
            scaled = (out[:, sl] - lo) / safe
            scaled = np.where(span > 0, scaled, 0.0)
            out[:, sl] = np.clip(scaled, 0.0, 1.0)
        elif name in EMBED_BLOCKS:
            norms = np.linalg.norm(out[:, sl], axis=1, keepdims=True)
            out[:, sl] = np.where(norms > 0, out[:, sl] / np.where(norms > 0, norms, 1.0), 0.0)
    return NodeFeatureMatrix(
        matrix=out,
        block_names=features.block_names,
        block_widths=features.block_widths,
        admission_ids=features.admission_ids,
        scaled=True,
    )


# ---------------------------------------------------------------------------
# Binary matrix format ("CGEMB1"): magic, u64 rows, u64 cols, f32 data (LE)

MATRIX_MAGIC = b"CGEMB1"
_MATRIX_HEADER = struct.Struct("<6sQQ")


def write_matrix(path: str | os.PathLike, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    if arr.ndim != 2:
        raise ShapeError(f"matrix file requires a 2-D array, got shape {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(_MATRIX_HEADER.pack(MATRIX_MAGIC, arr.shape[0], arr.shape[1]))
        fh.write(arr.tobytes())


def read_matrix(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _MATRIX_HEADER.size:
        raise CorruptFileError(f"{path}: truncated header")
    magic, rows, cols = _MATRIX_HEADER.unpack_from(data)
    if magic != MATRIX_MAGIC:
        raise CorruptFileError(f"{path}: bad magic {magic!r}")
    expected = _MATRIX_HEADER.size + 4 * rows * cols
    if len(data) != expected:
        raise CorruptFileError(f"{path}: expected {expected} bytes, found {len(data)}")
    out = np.frombuffer(data, dtype="<f4", offset=_MATRIX_HEADER.size)
    return out.reshape(rows, cols).astype(np.float64)


def write_embedding_file(
    matrix_path: str | os.PathLike,
    ids_path: str | os.PathLike,
    ids: Sequence[int],
    matrix: np.ndarray,
) -> None:
    if len(ids) != matrix.shape[0]:
        raise ShapeError(f"{len(ids)} ids for {matrix.shape[0]} matrix rows")
    write_matrix(matrix_path, matrix)
    with open(ids_path, "w", encoding="utf-8") as fh:
        for i in ids:
            fh.write(f"{int(i)}\n")


def read_embedding_file(
    matrix_path: str | os.PathLike, ids_path: str | os.PathLike
) -> tuple[list[int], np.ndarray]:
    matrix = read_matrix(matrix_path)
    ids: list[int] = []
    with open(ids_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                ids.append(int(line))
            except ValueError:
                raise ParseError(
                    f"bad admission id {line!r}", file=str(ids_path), line=lineno
                ) from None
    if len(ids) != matrix.shape[0]:
        raise ShapeError(f"{len(ids)} ids for {matrix.shape[0]} matrix rows")
    return ids, matrix


def block_from_embedding_file(
    name: str,
    matrix_path: str | os.PathLike,
    ids_path: str | os.PathLike,
    cohort: Cohort,
) -> FeatureBlock:
    """Build an embedding block from precomputed vectors, bypassing the
    embedder. Cohort admissions absent from the file are zero-filled."""
    ids, matrix = read_embedding_file(matrix_path, ids_path)
    by_id = {adm_id: k for k, adm_id in enumerate(ids)}
    n = len(cohort.records)
    out = np.zeros((n, matrix.shape[1]))
    missing_mask = np.ones(n, dtype=bool)
    for i, r in enumerate(cohort.records):
        k = by_id.get(r.admission_id)
        if k is not None:
            out[i] = matrix[k]
            missing_mask[i] = False
    return FeatureBlock(name, out, missing_mask, {"source": str(matrix_path)})


def read_code_text_map(path: str | os.PathLike) -> dict[tuple[str, int], str]:
    import csv as _csv

    if not os.path.exists(path):
        raise ParseError("missing code_text_map file", file=path)
    out: dict[tuple[str, int], str] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = _csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != ("icd_code", "icd_version", "long_title"):
            raise ParseError(
                "code_text_map header must be (icd_code, icd_version, long_title)",
                file=path,
                line=1,
            )
        for r in reader:
            if len(r) != 3:
                raise ParseError(
                    f"expected 3 fields, got {len(r)}", file=path, line=reader.line_num
                )
            try:
                version = int(r[1])
            except ValueError:
                raise ParseError(
                    f"bad icd_version {r[1]!r}",
                    file=path,
                    line=reader.line_num,
                    column="icd_version",
                ) from None
            out[(r[0], version)] = r[2]
    return out


# ---------------------------------------------------------------------------
# Feature-matrix persistence: CGEMB1 binary + JSON manifest

def save_features(
    features: NodeFeatureMatrix,
    scalers: ScalerSet | None,
    directory: str | os.PathLike,
    extra: dict | None = None,
) -> None:
    os.makedirs(directory, exist_ok=True)
    write_matrix(os.path.join(directory, "features.bin"), features.matrix)
    with open(os.path.join(directory, "features.ids.txt"), "w", encoding="utf-8") as fh:
        for i in features.admission_ids:
            fh.write(f"{int(i)}\n")
    manifest = {
        "block_names": list(features.block_names),
        "block_widths": list(features.block_widths),
        "scaled": features.scaled,
        "n_rows": int(features.n_rows),
        "scalers": None
        if scalers is None
        else {
            name: {"min": scalers.mins[name].tolist(), "max": scalers.maxs[name].tolist()}
            for name in scalers.mins
        },
    }
    if extra:
        manifest.update(extra)
    with open(os.path.join(directory, "features.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_features(directory: str | os.PathLike) -> tuple[NodeFeatureMatrix, ScalerSet | None]:
    manifest_path = os.path.join(directory, "features.json")
    if not os.path.exists(manifest_path):
        raise ParseError("missing features manifest", file=manifest_path)
    with open(manifest_path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    matrix = read_matrix(os.path.join(directory, "features.bin"))
    ids = []
    with open(os.path.join(directory, "features.ids.txt"), encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                ids.append(int(line))
    features = NodeFeatureMatrix(
        matrix=matrix,
        block_names=tuple(manifest["block_names"]),
        block_widths=tuple(manifest["block_widths"]),
        admission_ids=np.asarray(ids, dtype=np.int64),
        scaled=bool(manifest["scaled"]),
    )
    scalers = None
    if manifest.get("scalers"):
        scalers = ScalerSet(
            mins={k: np.asarray(v["min"]) for k, v in manifest["scalers"].items()},
            maxs={k: np.asarray(v["max"]) for k, v in manifest["scalers"].items()},
        )
    return features, scalers
