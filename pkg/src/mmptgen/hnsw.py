"""Hierarchical navigable small-world graph over packed bit vectors.

Vectors are rows of little-endian uint64 words; the navigation distance is
``1 - cosine`` over the bit sets. Level assignment comes from a seeded
``random.Random`` and insertion is sequential, so a given input and seed
always produce the same graph.

Storage: every node owns a level-0 adjacency row; nodes above level 0 own one
extra row per upper level, addressed through ``upper_offset``. All rows are
``max_neighbors0`` wide and padded with -1.
"""

from __future__ import annotations

import io
import json
import math
import random
import struct
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np
from numba import njit, prange

MAGIC = b"MMPTIDX1"
FILE_VERSION = 1
MAX_LEVEL = 16

_M1 = np.uint64(0x5555555555555555)
_M2 = np.uint64(0x3333333333333333)
_M4 = np.uint64(0x0F0F0F0F0F0F0F0F)
_H01 = np.uint64(0x0101010101010101)
_S1 = np.uint64(1)
_S2 = np.uint64(2)
_S4 = np.uint64(4)
_S56 = np.uint64(56)


@njit(cache=True, inline="always")
def _popcount64(x):
    x = x - ((x >> _S1) & _M1)
    x = (x & _M2) + ((x >> _S2) & _M2)
    x = (x + (x >> _S4)) & _M4
    return (x * _H01) >> _S56


@njit(cache=True)
def _cos_dist(a, pa, b, pb):
    if pa == 0 or pb == 0:
        return 1.0
    inter = 0
    for w in range(a.shape[0]):
        inter += _popcount64(a[w] & b[w])
    return 1.0 - inter / math.sqrt(pa * pb)


# Binary heap on parallel (key, id) arrays ordered lexicographically; ``sign``
# = -1 turns it into a max-heap.

@njit(cache=True, inline="always")
def _less(k1, i1, k2, i2):
    return k1 < k2 or (k1 == k2 and i1 < i2)


@njit(cache=True)
def _heap_push(keys, ids, size, key, idx):
    pos = size
    keys[pos] = key
    ids[pos] = idx
    while pos > 0:
        parent = (pos - 1) >> 1
        if _less(keys[pos], ids[pos], keys[parent], ids[parent]):
            keys[pos], keys[parent] = keys[parent], keys[pos]
            ids[pos], ids[parent] = ids[parent], ids[pos]
            pos = parent
        else:
            break
    return size + 1


@njit(cache=True)
def _heap_pop(keys, ids, size):
    key, idx = keys[0], ids[0]
    size -= 1
    keys[0] = keys[size]
    ids[0] = ids[size]
    pos = 0
    while True:
        left = 2 * pos + 1
        if left >= size:
            break
        child = left
        if left + 1 < size and _less(keys[left + 1], ids[left + 1], keys[left], ids[left]):
            child = left + 1
        if _less(keys[child], ids[child], keys[pos], ids[pos]):
            keys[pos], keys[child] = keys[child], keys[pos]
            ids[pos], ids[child] = ids[child], ids[pos]
            pos = child
        else:
            break
    return key, idx, size


@njit(cache=True, inline="always")
def _row(node, level, n, upper_offset):
    if level == 0:
        return node
    return n + upper_offset[node] + level - 1


@njit(cache=True)
def _search_layer(data, pcs, q, qpc, entries, ef, level, adj, counts, upper_offset, visited, epoch):
    """Best ``ef`` nodes of one layer reachable from ``entries``; sorted ascending."""
    n = data.shape[0]
    cap = n + 1
    cand_k = np.empty(cap, np.float64)
    cand_i = np.empty(cap, np.int64)
    res_k = np.empty(ef + 1, np.float64)
    res_i = np.empty(ef + 1, np.int64)
    nc = 0
    nr = 0
    for e in entries:
        if visited[e] == epoch:
            continue
        visited[e] = epoch
        d = _cos_dist(data[e], pcs[e], q, qpc)
        nc = _heap_push(cand_k, cand_i, nc, d, e)
        nr = _heap_push(res_k, res_i, nr, -d, -e)
        if nr > ef:
            _, _, nr = _heap_pop(res_k, res_i, nr)
    while nc > 0:
        d, c, nc = _heap_pop(cand_k, cand_i, nc)
        worst_d = -res_k[0]
        worst_i = -res_i[0]
        if nr >= ef and _less(worst_d, worst_i, d, c):
            break
        row = _row(c, level, n, upper_offset)
        for j in range(counts[row]):
            nb = adj[row, j]
            if visited[nb] == epoch:
                continue
            visited[nb] = epoch
            dn = _cos_dist(data[nb], pcs[nb], q, qpc)
            worst_d = -res_k[0]
            worst_i = -res_i[0]
            if nr < ef or _less(dn, nb, worst_d, worst_i):
                nc = _heap_push(cand_k, cand_i, nc, dn, nb)
                nr = _heap_push(res_k, res_i, nr, -dn, -nb)
                if nr > ef:
                    _, _, nr = _heap_pop(res_k, res_i, nr)
    out_d = np.empty(nr, np.float64)
    out_i = np.empty(nr, np.int64)
    for p in range(nr - 1, -1, -1):
        k, i, nr = _heap_pop(res_k, res_i, nr)
        out_d[p] = -k
        out_i[p] = -i
    return out_d, out_i


@njit(cache=True)
def _select(data, pcs, cand_d, cand_i, m):
    """Diversity heuristic: keep a candidate unless an already kept one is closer to it."""
    keep = np.empty(m, np.int64)
    nk = 0
    for a in range(cand_i.shape[0]):
        if nk == m:
            break
        c = cand_i[a]
        good = True
        for b in range(nk):
            r = keep[b]
            if _cos_dist(data[c], pcs[c], data[r], pcs[r]) < cand_d[a]:
                good = False
                break
        if good:
            keep[nk] = c
            nk += 1
    return keep[:nk]


@njit(cache=True)
def _link(data, pcs, node, nbr, level, m_max, adj, counts, upper_offset):
    n = data.shape[0]
    row = _row(nbr, level, n, upper_offset)
    cnt = counts[row]
    for j in range(cnt):
        if adj[row, j] == node:
            return
    if cnt < m_max:
        adj[row, cnt] = node
        counts[row] = cnt + 1
        return
    cand_d = np.empty(cnt + 1, np.float64)
    cand_i = np.empty(cnt + 1, np.int64)
    for j in range(cnt):
        x = adj[row, j]
        cand_d[j] = _cos_dist(data[x], pcs[x], data[nbr], pcs[nbr])
        cand_i[j] = x
    cand_d[cnt] = _cos_dist(data[node], pcs[node], data[nbr], pcs[nbr])
    cand_i[cnt] = node
    order = np.argsort(cand_d, kind="mergesort")
    sd = cand_d[order]
    si = cand_i[order]
    kept = _select(data, pcs, sd, si, m_max)
    for j in range(kept.shape[0]):
        adj[row, j] = kept[j]
    for j in range(kept.shape[0], adj.shape[1]):
        adj[row, j] = -1
    counts[row] = kept.shape[0]


@njit(cache=True)
def _build(data, pcs, levels, upper_offset, m, m0, ef_construction, adj, counts):
    n = data.shape[0]
    visited = np.zeros(n, np.int64)
    epoch = 0
    entry = 0
    top = levels[0]
    for q in range(1, n):
        lq = levels[q]
        ep = np.empty(1, np.int64)
        ep[0] = entry
        for level in range(top, lq, -1):
            epoch += 1
            d, i = _search_layer(data, pcs, data[q], pcs[q], ep, 1, level, adj, counts, upper_offset, visited, epoch)
            ep[0] = i[0]
        for level in range(min(lq, top), -1, -1):
            epoch += 1
            d, i = _search_layer(data, pcs, data[q], pcs[q], ep, ef_construction, level,
                                 adj, counts, upper_offset, visited, epoch)
            m_level = m0 if level == 0 else m
            chosen = _select(data, pcs, d, i, m)
            row = _row(q, level, n, upper_offset)
            for j in range(chosen.shape[0]):
                adj[row, j] = chosen[j]
            counts[row] = chosen.shape[0]
            for j in range(chosen.shape[0]):
                _link(data, pcs, q, chosen[j], level, m_level, adj, counts, upper_offset)
            ep = i[:1].copy()
        if lq > top:
            top = lq
            entry = q
    return entry, top


@njit(cache=True)
def _query_one(data, pcs, q, qpc, k, ef, entry, top, adj, counts, upper_offset):
    n = data.shape[0]
    visited = np.zeros(n, np.int64)
    ep = np.empty(1, np.int64)
    ep[0] = entry
    epoch = 0
    for level in range(top, 0, -1):
        epoch += 1
        d, i = _search_layer(data, pcs, q, qpc, ep, 1, level, adj, counts, upper_offset, visited, epoch)
        ep[0] = i[0]
    epoch += 1
    d, i = _search_layer(data, pcs, q, qpc, ep, max(ef, k), 0, adj, counts, upper_offset, visited, epoch)
    return d[:k], i[:k]


@njit(cache=True, parallel=True)
def _query_many(data, pcs, queries, qpcs, k, ef, entry, top, adj, counts, upper_offset):
    nq = queries.shape[0]
    kk = min(k, data.shape[0])
    out_d = np.full((nq, kk), np.inf)
    out_i = np.full((nq, kk), -1, np.int64)
    for r in prange(nq):
        d, i = _query_one(data, pcs, queries[r], qpcs[r], kk, ef, entry, top, adj, counts, upper_offset)
        out_d[r, : d.shape[0]] = d
        out_i[r, : i.shape[0]] = i
    return out_d, out_i


@njit(cache=True, parallel=True)
def _exact_many(data, pcs, queries, qpcs, k):
    nq = queries.shape[0]
    n = data.shape[0]
    kk = min(k, n)
    out_d = np.empty((nq, kk))
    out_i = np.empty((nq, kk), np.int64)
    for r in prange(nq):
        d = np.empty(n)
        for j in range(n):
            d[j] = _cos_dist(data[j], pcs[j], queries[r], qpcs[r])
        order = np.argsort(d, kind="mergesort")[:kk]
        out_d[r] = d[order]
        out_i[r] = order
    return out_d, out_i


def popcounts(words: np.ndarray) -> np.ndarray:
    bits = np.unpackbits(np.ascontiguousarray(words).view(np.uint8), axis=-1)
    return bits.sum(axis=-1).astype(np.int64)


def pack_bits(bits: np.ndarray) -> np.ndarray:
    """Pack a 0/1 matrix (rows x nbits) into little-endian uint64 words."""
    bits = np.asarray(bits, dtype=np.uint8)
    if bits.ndim == 1:
        bits = bits[None, :]
    packed = np.packbits(bits, axis=1, bitorder="little")
    pad = (-packed.shape[1]) % 8
    if pad:
        packed = np.pad(packed, ((0, 0), (0, pad)))
    return np.ascontiguousarray(packed).view("<u8").astype(np.uint64)


def draw_levels(n: int, m: int, seed: int) -> np.ndarray:
    rng = random.Random(seed)
    ml = 1.0 / math.log(m)
    return np.array([min(MAX_LEVEL, int(-math.log(1.0 - rng.random()) * ml)) for _ in range(n)], dtype=np.int64)


@dataclass
class HnswIndex:
    words: np.ndarray          # (n, n_words) uint64
    pcs: np.ndarray            # (n,) popcounts
    levels: np.ndarray         # (n,)
    upper_offset: np.ndarray   # (n,) first upper row per node, relative to n
    adj: np.ndarray            # (rows, max_neighbors0) int64, -1 padded
    counts: np.ndarray         # (rows,)
    entry: int
    top: int
    m: int = 16
    ef_construction: int = 200
    ef_search: int = 100
    seed: int = 0

    @classmethod
    def build(cls, words: np.ndarray, m: int = 16, ef_construction: int = 200,
              ef_search: int = 100, seed: int = 0) -> "HnswIndex":
        if m < 2 or ef_construction < 1 or ef_search < 1:
            raise ValueError("need m >= 2 and positive ef values")
        words = np.ascontiguousarray(words, dtype=np.uint64)
        if words.ndim != 2 or words.shape[0] == 0:
            raise ValueError("words must be a non-empty 2-D array")
        n = words.shape[0]
        pcs = popcounts(words)
        levels = draw_levels(n, m, seed)
        upper_offset = np.zeros(n, np.int64)
        upper_offset[1:] = np.cumsum(levels)[:-1]
        rows = n + int(levels.sum())
        m0 = 2 * m
        adj = np.full((rows, m0), -1, np.int64)
        counts = np.zeros(rows, np.int64)
        entry, top = _build(words, pcs, levels, upper_offset, m, m0, ef_construction, adj, counts)
        return cls(words, pcs, levels, upper_offset, adj, counts, int(entry), int(top),
                   m, ef_construction, ef_search, seed)

    def __len__(self) -> int:
        return self.words.shape[0]

    def neighbors(self, node: int, level: int) -> np.ndarray:
        if level > self.levels[node]:
            raise ValueError(f"node {node} is not on level {level}")
        row = node if level == 0 else len(self) + self.upper_offset[node] + level - 1
        return self.adj[row, : self.counts[row]].copy()

    def search(self, queries: np.ndarray, k: int, ef: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Approximate ``k`` nearest rows per query: (cosine distances, row ids), ascending."""
        queries = np.ascontiguousarray(np.atleast_2d(queries), dtype=np.uint64)
        if queries.shape[1] != self.words.shape[1]:
            raise ValueError("query width does not match the index")
        ef = self.ef_search if ef is None else ef
        return _query_many(self.words, self.pcs, queries, popcounts(queries), k, ef,
                           self.entry, self.top, self.adj, self.counts, self.upper_offset)

    def exact_search(self, queries: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
        queries = np.ascontiguousarray(np.atleast_2d(queries), dtype=np.uint64)
        return _exact_many(self.words, self.pcs, queries, popcounts(queries), k)

    def structure_digest(self) -> tuple:
        return (self.entry, self.top, self.levels.tobytes(), self.adj.tobytes(), self.counts.tobytes())

    def to_bytes(self, header: dict | None = None) -> bytes:
        meta = dict(header or {})
        meta.update({
            "version": FILE_VERSION, "m": self.m, "ef_construction": self.ef_construction,
            "ef_search": self.ef_search, "seed": self.seed, "entry": self.entry, "top": self.top,
            "n": len(self), "n_words": self.words.shape[1], "rows": self.adj.shape[0],
            "width": self.adj.shape[1],
        })
        blob = json.dumps(meta, sort_keys=True).encode("utf-8")
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<I", len(blob)))
        buf.write(blob)
        for arr, dtype in ((self.words, "<u8"), (self.pcs, "<i8"), (self.levels, "<i8"),
                           (self.upper_offset, "<i8"), (self.adj, "<i8"), (self.counts, "<i8")):
            buf.write(np.ascontiguousarray(arr).astype(dtype).tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> tuple["HnswIndex", dict]:
        if data[:8] != MAGIC:
            raise ValueError("not an index file (bad magic)")
        (size,) = struct.unpack_from("<I", data, 8)
        meta = json.loads(data[12:12 + size].decode("utf-8"))
        if meta.get("version") != FILE_VERSION:
            raise ValueError(f"unsupported index version {meta.get('version')}")
        n, w, rows, width = meta["n"], meta["n_words"], meta["rows"], meta["width"]
        pos = 12 + size

        def take(count: int, dtype: str, shape) -> np.ndarray:
            nonlocal pos
            nbytes = count * 8
            if pos + nbytes > len(data):
                raise ValueError("truncated index file")
            arr = np.frombuffer(data, dtype=dtype, count=count, offset=pos).reshape(shape)
            pos += nbytes
            return arr.astype(np.uint64 if dtype == "<u8" else np.int64)

        words = take(n * w, "<u8", (n, w))
        pcs = take(n, "<i8", (n,))
        levels = take(n, "<i8", (n,))
        upper = take(n, "<i8", (n,))
        adj = take(rows * width, "<i8", (rows, width))
        counts = take(rows, "<i8", (rows,))
        if pos != len(data):
            raise ValueError("trailing bytes in index file")
        index = cls(words, pcs, levels, upper, adj, counts, meta["entry"], meta["top"],
                    meta["m"], meta["ef_construction"], meta["ef_search"], meta["seed"])
        return index, meta

    def save(self, path: str | Path, header: dict | None = None) -> None:
        with open(path, "xb") as fh:
            fh.write(self.to_bytes(header))

    @classmethod
    def load(cls, path: str | Path) -> tuple["HnswIndex", dict]:
        return cls.from_bytes(Path(path).read_bytes())


def set_threads(n: int | None) -> None:
    if n:
        numba.set_num_threads(max(1, min(n, numba.config.NUMBA_NUM_THREADS)))
