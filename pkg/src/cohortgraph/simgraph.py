"""Exact cosine range search over node feature rows -> CSR similarity graph.

Edges connect distinct rows whose cosine similarity is >= tau (ties
included); zero rows have similarity 0 with everything by convention, so
they only receive the self-loop that every node gets. The kernel is
blocked: rows are L2-normalized once, then tile-pair dot products are
thresholded, keeping memory at O(tile^2) beyond the output. Tiles are
independent; results merge in fixed tile order, so the edge set does not
depend on the number of workers.
"""

from __future__ import annotations

import os
import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, CorruptFileError, UnsupportedVersionError

DEFAULT_TILE = 1024


@dataclass
class SimilarityGraph:
    n_nodes: int
    indptr: np.ndarray  # int64, len n_nodes + 1
    indices: np.ndarray  # int64, ascending within each row, self-loops present
    tau: float
    _agg_cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def nnz(self) -> int:
        return int(self.indices.shape[0])

    def neighbors(self, i: int) -> np.ndarray:
        return self.indices[self.indptr[i] : self.indptr[i + 1]]

    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)


@dataclass(frozen=True)
class GraphStats:
    edge_count: int  # directed adjacency entries, self-loops included
    average_degree: float


def _normalized_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return np.where(norms > 0, x / np.where(norms > 0, norms, 1.0), 0.0)


def _tile_pairs(n: int, tile: int) -> list[tuple[int, int]]:
    starts = list(range(0, n, tile))
    return [(a, b) for a in starts for b in starts if b >= a]


def range_search(
    features,
    tau: float,
    tile_size: int = DEFAULT_TILE,
    threads: int = 1,
) -> SimilarityGraph:
    """Build the exact similarity graph at threshold tau.

    `features` is a NodeFeatureMatrix or a 2-D array. The result is
    identical to the O(n^2) pairwise definition: undirected edges stored
    in both directions, plus one self-loop per node.
    """
    if not 0.0 < tau <= 1.0:
        raise ConfigError(f"tau must be in (0, 1], got {tau}")
    if tile_size <= 0:
        raise ConfigError(f"tile_size must be positive, got {tile_size}")
    x = getattr(features, "matrix", features)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ConfigError(f"features must be a non-empty 2-D matrix, got shape {x.shape}")
    n = x.shape[0]
    u = _normalized_rows(x)

    def scan_tile(pair):
        a, b = pair
        ua = u[a : a + tile_size]
        ub = u[b : b + tile_size]
        sims = ua @ ub.T
        ii, jj = np.nonzero(sims >= tau)
        gi = ii.astype(np.int64) + a
        gj = jj.astype(np.int64) + b
        if a == b:
            keep = gj > gi
            gi, gj = gi[keep], gj[keep]
        return gi, gj

    pairs = _tile_pairs(n, tile_size)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(scan_tile, pairs))
    else:
        results = [scan_tile(p) for p in pairs]

    src = [r[0] for r in results] + [r[1] for r in results]
    dst = [r[1] for r in results] + [r[0] for r in results]
    loops = np.arange(n, dtype=np.int64)
    all_i = np.concatenate(src + [loops])
    all_j = np.concatenate(dst + [loops])

    order = np.lexsort((all_j, all_i))
    all_i = all_i[order]
    all_j = all_j[order]
    counts = np.bincount(all_i, minlength=n)
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])
    return SimilarityGraph(n_nodes=n, indptr=indptr, indices=all_j, tau=float(tau))


def graph_stats(g: SimilarityGraph) -> GraphStats:
    return GraphStats(edge_count=g.nnz, average_degree=g.nnz / g.n_nodes)


# ---------------------------------------------------------------------------
# Binary graph format ("CGGRF1"):
#   magic(6) | version u8 | index_width u8 (4|8) | n_nodes u64 | nnz u64
#   | indptr u64[n+1] | indices u32/u64[nnz] | tau f64 | crc32 u32
# All little-endian; the CRC covers every preceding byte.

GRAPH_MAGIC = b"CGGRF1"
GRAPH_VERSION = 1
_GRAPH_HEADER = struct.Struct("<6sBBQQ")


def save_graph(g: SimilarityGraph, path: str | os.PathLike) -> None:
    wide = g.n_nodes > 0xFFFFFFFF
    idx_dtype = "<u8" if wide else "<u4"
    payload = b"".join(
        (
            _GRAPH_HEADER.pack(GRAPH_MAGIC, GRAPH_VERSION, 8 if wide else 4, g.n_nodes, g.nnz),
            np.ascontiguousarray(g.indptr, dtype="<u8").tobytes(),
            np.ascontiguousarray(g.indices, dtype=idx_dtype).tobytes(),
            struct.pack("<d", g.tau),
        )
    )
    with open(path, "wb") as fh:
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload)))


def load_graph(path: str | os.PathLike) -> SimilarityGraph:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _GRAPH_HEADER.size + 4:
        raise CorruptFileError(f"{path}: truncated graph file")
    magic, version, idx_width, n_nodes, nnz = _GRAPH_HEADER.unpack_from(data)
    if magic != GRAPH_MAGIC:
        raise CorruptFileError(f"{path}: bad magic {magic!r}")
    if version != GRAPH_VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported graph version {version}")
    if idx_width not in (4, 8):
        raise CorruptFileError(f"{path}: bad index width {idx_width}")
    expected = _GRAPH_HEADER.size + 8 * (n_nodes + 1) + idx_width * nnz + 8 + 4
    if len(data) != expected:
        raise CorruptFileError(f"{path}: expected {expected} bytes, found {len(data)}")
    (crc_stored,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc_stored:
        raise CorruptFileError(f"{path}: checksum mismatch")
    off = _GRAPH_HEADER.size
    indptr = np.frombuffer(data, dtype="<u8", count=n_nodes + 1, offset=off).astype(np.int64)
    off += 8 * (n_nodes + 1)
    idx_dtype = "<u8" if idx_width == 8 else "<u4"
    indices = np.frombuffer(data, dtype=idx_dtype, count=nnz, offset=off).astype(np.int64)
    off += idx_width * nnz
    (tau,) = struct.unpack_from("<d", data, off)
    return SimilarityGraph(n_nodes=int(n_nodes), indptr=indptr, indices=indices, tau=tau)


def graphs_equal(a: SimilarityGraph, b: SimilarityGraph) -> bool:
    return (
        a.n_nodes == b.n_nodes
        and a.tau == b.tau
        and np.array_equal(a.indptr, b.indptr)
        and np.array_equal(a.indices, b.indices)
    )
