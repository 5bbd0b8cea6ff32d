"""Additive codebook model: reconstruction, beam-search encoding, and ADC.

A codebook holds M dictionaries of K codewords over the full d dimensions;
a vector's code picks one codeword per dictionary and reconstructs as their
sum. Encoding is a beam search over dictionaries in variance-descending
order, scoring every extension from cached tables only:

    ||x - a - c||^2 = ||x - a||^2 + (||x - c||^2 - ||x||^2) + 2 c.a

where the middle term comes from a per-vector O(dK) table and c.a from the
precomputed cross-inner-product tables. The same cached quantities drive
asymmetric distance computation (ADC) at query time.
"""

from __future__ import annotations

import hashlib
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .validation import FormatError, check_codes, check_query, check_vectors

__all__ = [
    "Codebook",
    "CrossProductTable",
    "EncodedDataset",
    "AdcTable",
    "reconstruct",
    "distortion",
    "dictionary_variances",
    "reorder_by_variance",
    "cross_products",
    "encode_multipath",
    "encode_dataset",
    "adc_table",
    "adc_distance",
    "code_pair_sums",
    "exhaustive_adc_search",
    "write_codebook",
    "read_codebook",
    "write_encoded",
    "read_encoded",
]

CODEBOOK_MAGIC = b"HCLB"
ENCODED_MAGIC = b"HCLE"
FORMAT_VERSION = 1
MAX_CODEWORDS = 65536

# Counts invocations of kernels that touch raw d-dimensional data; lets
# tests pin the contract that beam stages work from tables alone.
DEBUG_COUNTERS = {"raw_dim_kernel_calls": 0}


def _code_dtype(k_count: int):
    return np.uint8 if k_count <= 256 else np.uint16


@dataclass
class Codebook:
    """M x K x d additive codebook plus its variance-order bookkeeping.

    ``order[j]`` is the source position of the dictionary now at slot j;
    a freshly built codebook carries the identity permutation. Immutable
    by convention once published for encoding or search.
    """

    codewords: np.ndarray  # (M, K, d) float32
    order: np.ndarray      # (M,) int64

    def __post_init__(self):
        self.codewords = np.ascontiguousarray(self.codewords, dtype=np.float32)
        if self.codewords.ndim != 3:
            raise ValueError("codewords must have shape (M, K, d)")
        if self.k_count > MAX_CODEWORDS:
            raise ValueError(f"K={self.k_count} exceeds the supported maximum {MAX_CODEWORDS}")
        self.order = np.asarray(self.order, dtype=np.int64)
        if self.order.shape != (self.m_count,):
            raise ValueError("order must be a permutation of length M")

    @classmethod
    def zeros(cls, m_count, k_count, dim) -> "Codebook":
        return cls(
            codewords=np.zeros((m_count, k_count, dim), dtype=np.float32),
            order=np.arange(m_count, dtype=np.int64),
        )

    @property
    def m_count(self) -> int:
        return self.codewords.shape[0]

    @property
    def k_count(self) -> int:
        return self.codewords.shape[1]

    @property
    def dim(self) -> int:
        return self.codewords.shape[2]

    @property
    def code_dtype(self):
        return _code_dtype(self.k_count)

    def content_hash(self) -> bytes:
        """32-byte identity of the codebook contents (shape, values, order).

        Cached on first use; codebooks are treated as immutable once
        published (training always builds fresh objects).
        """
        cached = getattr(self, "_hash_cache", None)
        if cached is None:
            h = hashlib.sha256()
            h.update(struct.pack("<III", self.dim, self.m_count, self.k_count))
            h.update(np.ascontiguousarray(self.codewords, dtype="<f4").tobytes())
            h.update(self.order.astype("<u4").tobytes())
            cached = h.digest()
            self._hash_cache = cached
        return cached

    def _query_kernels(self):
        """Cached float64 codeword views used by per-query table builds."""
        cached = getattr(self, "_kernel_cache", None)
        if cached is None:
            cw = self.codewords.astype(np.float64)
            flat = cw.reshape(self.m_count * self.k_count, self.dim)
            sq = np.einsum("mkd,mkd->mk", cw, cw)
            cached = (flat, sq)
            self._kernel_cache = cached
        return cached


@dataclass(frozen=True)
class CrossProductTable:
    """All pairwise codeword inner products plus per-codeword squared norms."""

    products: np.ndarray  # (M, M, K, K) float64; products[a, b][i, j] = c_a(i) . c_b(j)
    sq_norms: np.ndarray  # (M, K) float64


@dataclass
class EncodedDataset:
    """n x M code matrix; entries index codewords of the producing codebook."""

    codes: np.ndarray          # (n, M) uint8 or uint16
    k_count: int
    codebook_hash: bytes | None = None
    id_map: np.ndarray | None = None  # optional original ids (int64)

    def __post_init__(self):
        check_codes(self.codes, self.k_count, name="codes")
        self.codes = np.ascontiguousarray(self.codes, dtype=_code_dtype(self.k_count))
        if self.id_map is not None:
            self.id_map = np.asarray(self.id_map, dtype=np.int64)
            if self.id_map.shape != (self.n,):
                raise ValueError("id_map length must match the number of codes")

    @property
    def n(self) -> int:
        return self.codes.shape[0]

    @property
    def m_count(self) -> int:
        return self.codes.shape[1]


@dataclass(frozen=True)
class AdcTable:
    """Per-query lookup table: values[m, k] = ||q - c_m(k)||^2."""

    values: np.ndarray   # (M, K) float64
    q_sq_norm: float


def _raw_kernel():
    DEBUG_COUNTERS["raw_dim_kernel_calls"] += 1


def _reconstruct_batch(codewords64, codes) -> np.ndarray:
    """Sum of selected codewords per row; (n, M) codes -> (n, d) float64."""
    _raw_kernel()
    n, M = codes.shape
    out = np.zeros((n, codewords64.shape[2]))
    for m in range(M):
        out += codewords64[m][codes[:, m]]
    return out


def reconstruct(codebook: Codebook, code) -> np.ndarray:
    """Exact additive reconstruction of one code; returns a (d,) float64 vector."""
    code = check_codes(np.asarray(code).reshape(1, -1), codebook.k_count,
                       m_count=codebook.m_count, name="code")
    return _reconstruct_batch(codebook.codewords.astype(np.float64), code.astype(np.int64))[0]


def distortion(codebook: Codebook, data, encoded: EncodedDataset) -> float:
    """Mean squared reconstruction error of the dataset under its codes."""
    X = check_vectors(data, name="data").astype(np.float64)
    if encoded.n != X.shape[0]:
        raise ValueError(f"codes cover {encoded.n} vectors, data has {X.shape[0]}")
    if X.shape[1] != codebook.dim:
        raise ValueError(f"data d={X.shape[1]} does not match codebook dim {codebook.dim}")
    codes = check_codes(encoded.codes, codebook.k_count, m_count=codebook.m_count)
    recon = _reconstruct_batch(codebook.codewords.astype(np.float64), codes.astype(np.int64))
    diff = X - recon
    return float((diff * diff).sum(axis=1).mean())


def dictionary_variances(codebook: Codebook) -> np.ndarray:
    """Per-dictionary codeword scatter: mean squared distance to the codeword mean."""
    cw = codebook.codewords.astype(np.float64)
    centered = cw - cw.mean(axis=1, keepdims=True)
    return (centered * centered).sum(axis=2).mean(axis=1)


def reorder_by_variance(codebook: Codebook):
    """Permute dictionaries into non-increasing variance order.

    Returns (reordered codebook, permutation); existing code matrices are
    remapped with ``codes[:, permutation]``.
    """
    variances = dictionary_variances(codebook)
    perm = np.argsort(-variances, kind="stable").astype(np.int64)
    reordered = Codebook(codewords=codebook.codewords[perm].copy(),
                         order=codebook.order[perm].copy())
    return reordered, perm


def cross_products(codebook: Codebook) -> CrossProductTable:
    """Precompute every pairwise codeword inner product (O(M^2 K^2 d) once)."""
    cw = codebook.codewords.astype(np.float64)
    M, K, d = cw.shape
    flat = cw.reshape(M * K, d)
    prods = (flat @ flat.T).reshape(M, K, M, K).transpose(0, 2, 1, 3)
    sq = np.einsum("mkd,mkd->mk", cw, cw)
    return CrossProductTable(products=np.ascontiguousarray(prods), sq_norms=sq)


def refresh_cross_products(cross: CrossProductTable, codebook: Codebook, m: int) -> CrossProductTable:
    """Rebuild only the table rows touching dictionary m after it changed."""
    cw = codebook.codewords.astype(np.float64)
    M, K, d = cw.shape
    prods = cross.products.copy()
    sq = cross.sq_norms.copy()
    row = cw[m] @ cw.reshape(M * K, d).T  # (K, M*K)
    row = row.reshape(K, M, K).transpose(1, 0, 2)
    prods[m, :, :, :] = row
    prods[:, m, :, :] = row.transpose(0, 2, 1)
    sq[m] = (cw[m] * cw[m]).sum(axis=1)
    return CrossProductTable(products=prods, sq_norms=sq)


def _beam_tables(codewords64, X):
    """Shifted per-vector score tables t[n, m, k] = ||c||^2 - 2 x.c (O(dK) per vector)."""
    _raw_kernel()
    M, K, d = codewords64.shape
    xdot = X @ codewords64.reshape(M * K, d).T
    sq = np.einsum("mkd,mkd->mk", codewords64, codewords64)
    return sq.reshape(1, M, K) - 2.0 * xdot.reshape(X.shape[0], M, K)


def _beam_encode_chunk(codewords64, cross: CrossProductTable, X, beam_width: int):
    """Beam-search encode a chunk of vectors.

    Candidates are kept in lexicographic code order; selection uses a
    stable sort on the shifted score, so equal scores resolve to the
    lexicographically smaller code. Returns (codes int64 (n, M), exact
    squared errors (n,)).
    """
    N = X.shape[0]
    M, K, _ = codewords64.shape
    tab = _beam_tables(codewords64, X)
    width = min(beam_width, K)
    sel = np.argsort(tab[:, 0, :], axis=1, kind="stable")[:, :width]
    sel.sort(axis=1)
    codes = sel[:, :, None].astype(np.int64)
    scores = np.take_along_axis(tab[:, 0, :], sel, axis=1)
    for m in range(1, M):
        live = codes.shape[1]
        cross_term = np.zeros((N, live, K))
        for j in range(m):
            cross_term += cross.products[j, m][codes[:, :, j], :]
        ext = scores[:, :, None] + tab[:, m, :][:, None, :] + 2.0 * cross_term
        flat = ext.reshape(N, live * K)
        width = min(beam_width, live * K)
        sel = np.argsort(flat, axis=1, kind="stable")[:, :width]
        sel.sort(axis=1)  # flat enumeration order == lexicographic code order
        parents = sel // K
        codes = np.concatenate(
            [np.take_along_axis(codes, parents[:, :, None], axis=1),
             (sel % K)[:, :, None].astype(np.int64)],
            axis=2,
        )
        scores = np.take_along_axis(flat, sel, axis=1)
    best = np.argmin(scores, axis=1)  # first minimum: lex-smallest among ties
    best_codes = codes[np.arange(N), best]
    diff = X - _reconstruct_batch(codewords64, best_codes)
    return best_codes, (diff * diff).sum(axis=1)


def encode_multipath(codebook: Codebook, cross: CrossProductTable, x, beam_width: int):
    """Encode one vector with beam width L; returns (code, exact squared error).

    The codebook must already be in variance-descending order (training
    produces it that way); this function never reorders. With
    beam_width >= K ** (M - 1) the result is the exhaustive minimizer.
    """
    if beam_width < 1:
        raise ValueError("beam_width must be >= 1")
    x = check_query(x, codebook.dim, name="x")
    codes, errs = _beam_encode_chunk(
        codebook.codewords.astype(np.float64), cross, x[None, :], beam_width
    )
    return codes[0].astype(codebook.code_dtype), float(errs[0])


def encode_dataset(
    codebook: Codebook,
    data,
    beam_width: int = 10,
    n_jobs: int = 1,
    cross: CrossProductTable | None = None,
) -> EncodedDataset:
    """Beam-encode every vector; identical to per-vector encode_multipath calls.

    A pure function of (codebook, data, beam_width): repeated runs and any
    n_jobs setting produce byte-identical codes.
    """
    if beam_width < 1:
        raise ValueError("beam_width must be >= 1")
    X = check_vectors(data, name="data", allow_empty=True).astype(np.float64)
    if X.shape[0] and X.shape[1] != codebook.dim:
        raise ValueError(f"data d={X.shape[1]} does not match codebook dim {codebook.dim}")
    if cross is None:
        cross = cross_products(codebook)
    cw = codebook.codewords.astype(np.float64)
    n = X.shape[0]
    # chunk so the (chunk, L, K) score block stays modest
    chunk = max(64, min(n, int(4e6) // max(beam_width * codebook.k_count, 1)))
    starts = list(range(0, n, chunk))
    if n_jobs > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            parts = list(pool.map(
                lambda s: _beam_encode_chunk(cw, cross, X[s : s + chunk], beam_width), starts
            ))
    else:
        parts = [_beam_encode_chunk(cw, cross, X[s : s + chunk], beam_width) for s in starts]
    codes = (
        np.vstack([p[0] for p in parts])
        if parts else np.empty((0, codebook.m_count), dtype=np.int64)
    )
    return EncodedDataset(
        codes=codes.astype(codebook.code_dtype),
        k_count=codebook.k_count,
        codebook_hash=codebook.content_hash(),
    )


def adc_table(codebook: Codebook, q) -> AdcTable:
    """Per-dictionary distance table for a query: values[m, k] = ||q - c_m(k)||^2."""
    q = check_query(q, codebook.dim)
    _raw_kernel()
    flat, sq = codebook._query_kernels()
    q_sq = float(q @ q)
    vals = q_sq - 2.0 * (q @ flat.T).reshape(sq.shape) + sq
    np.maximum(vals, 0.0, out=vals)
    return AdcTable(values=vals, q_sq_norm=q_sq)


def adc_distance(table: AdcTable, cross: CrossProductTable, code) -> float:
    """Approximate squared distance between the table's query and one code.

    Exact expansion of ||q - sum_m c_m(i_m)||^2:
    sum_m ||q - c_m(i_m)||^2 - (M - 1) ||q||^2 + 2 sum_{a<b} c_a(i_a) . c_b(i_b).
    """
    code = np.asarray(code, dtype=np.int64).reshape(-1)
    M = table.values.shape[0]
    total = float(table.values[np.arange(M), code].sum())
    total -= (M - 1) * table.q_sq_norm
    for a in range(M):
        for b in range(a + 1, M):
            total += 2.0 * float(cross.products[a, b][code[a], code[b]])
    return total


def code_pair_sums(cross: CrossProductTable, codes) -> np.ndarray:
    """Query-independent term 2 sum_{a<b} c_a(i_a) . c_b(i_b) per code row."""
    codes = np.asarray(codes, dtype=np.int64)
    n, M = codes.shape
    out = np.zeros(n)
    for a in range(M):
        for b in range(a + 1, M):
            out += cross.products[a, b][codes[:, a], codes[:, b]]
    return 2.0 * out


def exhaustive_adc_search(
    codebook: Codebook,
    encoded: EncodedDataset,
    q,
    r: int,
    cross: CrossProductTable | None = None,
    pair_sums: np.ndarray | None = None,
):
    """Exact top-r over all encoded vectors under adc_distance; ties by lower id.

    Passing precomputed cross tables and code_pair_sums amortizes the
    query-independent work across queries.
    """
    if r < 1 or r > encoded.n:
        raise ValueError(f"r={r} must be in [1, {encoded.n}]")
    if cross is None:
        cross = cross_products(codebook)
    codes = encoded.codes.astype(np.int64)
    if pair_sums is None:
        pair_sums = code_pair_sums(cross, codes)
    table = adc_table(codebook, q)
    M = codebook.m_count
    dists = pair_sums - (M - 1) * table.q_sq_norm
    for m in range(M):
        dists = dists + table.values[m][codes[:, m]]
    kth = np.partition(dists, r - 1)[r - 1]
    cand = np.flatnonzero(dists <= kth)
    order = np.lexsort((cand, dists[cand]))[:r]
    sel = cand[order]
    ids = sel if encoded.id_map is None else encoded.id_map[sel]
    return ids.astype(np.int64), dists[sel]


# ---------------------------------------------------------------------------
# file formats


def _read_exact(f, count, path, what):
    buf = f.read(count)
    if len(buf) != count:
        raise FormatError(f"{path}: truncated while reading {what}")
    return buf


def write_codebook(path, codebook: Codebook) -> None:
    """Codebook container: magic, version, d/M/K, f32 codewords, order permutation."""
    with open(path, "wb") as f:
        f.write(CODEBOOK_MAGIC)
        f.write(struct.pack("<IIII", FORMAT_VERSION, codebook.dim,
                            codebook.m_count, codebook.k_count))
        f.write(np.ascontiguousarray(codebook.codewords, dtype="<f4").tobytes())
        f.write(codebook.order.astype("<u4").tobytes())


def read_codebook(path) -> Codebook:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CODEBOOK_MAGIC:
            raise FormatError(
                f"{path}: bad magic {magic!r}, expected {CODEBOOK_MAGIC!r}", exit_code=2
            )
        version, d, M, K = struct.unpack("<IIII", _read_exact(f, 16, path, "header"))
        if version != FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported format version {version}")
        cw = np.frombuffer(_read_exact(f, 4 * M * K * d, path, "codewords"), dtype="<f4")
        order = np.frombuffer(_read_exact(f, 4 * M, path, "order"), dtype="<u4")
        return Codebook(codewords=cw.reshape(M, K, d).copy(),
                        order=order.astype(np.int64))


def write_encoded(path, encoded: EncodedDataset) -> None:
    """Encoded-dataset container: magic, version, n/M/K, code width, packed codes."""
    width = 1 if encoded.k_count <= 256 else 2
    with open(path, "wb") as f:
        f.write(ENCODED_MAGIC)
        f.write(struct.pack("<IQIIB", FORMAT_VERSION, encoded.n,
                            encoded.m_count, encoded.k_count, width))
        f.write(np.ascontiguousarray(encoded.codes, dtype=f"<u{width}").tobytes())


def read_encoded(path) -> EncodedDataset:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != ENCODED_MAGIC:
            raise FormatError(
                f"{path}: bad magic {magic!r}, expected {ENCODED_MAGIC!r}", exit_code=2
            )
        version, n, M, K, width = struct.unpack("<IQIIB", _read_exact(f, 21, path, "header"))
        if version != FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported format version {version}")
        if width not in (1, 2):
            raise FormatError(f"{path}: invalid code width {width}")
        codes = np.frombuffer(
            _read_exact(f, width * n * M, path, "codes"), dtype=f"<u{width}"
        )
        return EncodedDataset(codes=codes.reshape(n, M).copy(), k_count=K)
