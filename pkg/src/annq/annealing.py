"""Codebook training by alternating heat-up and cool-down over dictionaries.

One training step takes a single dictionary m: fold the current residues
into its contribution (heat-up, giving an intermediate dataset x' that is
the original data minus every other dictionary's codeword), refit the
dictionary to that intermediate set with staged k-means (cool-down), then
re-encode. Per-vector codes keep whichever is better between the fresh
beam encoding and the cool-down assignment, which makes the recorded
distortion non-increasing by construction.

Learning from scratch starts with all-zero dictionaries, where the first
pass degenerates to greedy residual quantization; subsequent sweeps then
anneal the full series.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import codebook as cb
from .clustering import dimension_schedule, improved_kmeans
from .validation import check_vectors

__all__ = [
    "TrainConfig",
    "TrainStep",
    "TrainReport",
    "heat_up",
    "cool_down",
    "da_sweep",
    "train_from_scratch",
    "train_online",
    "rvq_train",
]


@dataclass(frozen=True)
class TrainConfig:
    """Knobs for codebook training."""

    m_count: int = 8
    k_count: int = 256
    beam_width: int = 10
    schedule_stages: int = 10
    sweeps: int = 3
    rel_tol: float = 1e-3
    kmeans_iters: int = 30
    seed: int = 0

    def __post_init__(self):
        if self.m_count < 1 or self.k_count < 1:
            raise ValueError("m_count and k_count must be >= 1")
        if self.beam_width < 1:
            raise ValueError("beam_width must be >= 1")
        if self.rel_tol < 0:
            raise ValueError("rel_tol must be >= 0")

    def echo(self) -> dict:
        return {
            "m": self.m_count, "k": self.k_count, "beam": self.beam_width,
            "stages": self.schedule_stages, "sweeps": self.sweeps,
            "rel_tol": self.rel_tol, "kmeans_iters": self.kmeans_iters,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class TrainStep:
    sweep: int
    dictionary: int
    distortion: float
    seconds: float


@dataclass
class TrainReport:
    """Per-step training log; the distortion column is non-increasing."""

    steps: list = field(default_factory=list)
    config: TrainConfig | None = None

    def record(self, sweep, dictionary, distortion, seconds):
        self.steps.append(TrainStep(sweep, dictionary, float(distortion), float(seconds)))

    def distortions(self) -> np.ndarray:
        return np.array([s.distortion for s in self.steps])

    def rows(self):
        for s in self.steps:
            yield {"sweep": s.sweep, "dictionary": s.dictionary,
                   "distortion": s.distortion, "seconds": s.seconds}


def heat_up(data, codebook: cb.Codebook, encoded: cb.EncodedDataset, m: int) -> np.ndarray:
    """Intermediate dataset for dictionary m: residue plus m's own codeword.

    Equivalently the data minus every other dictionary's contribution;
    returns float32 (n, d).
    """
    X = check_vectors(data, name="data").astype(np.float64)
    if encoded.n != X.shape[0]:
        raise ValueError(f"codes cover {encoded.n} vectors, data has {X.shape[0]}")
    if not 0 <= m < codebook.m_count:
        raise ValueError(f"dictionary index {m} out of range [0, {codebook.m_count})")
    codes = encoded.codes.astype(np.int64)
    cw = codebook.codewords.astype(np.float64)
    recon = cb._reconstruct_batch(cw, codes)
    out = X - recon + cw[m][codes[:, m]]
    return out.astype(np.float32)


def cool_down(intermediate, codebook: cb.Codebook, m: int, config: TrainConfig):
    """Refit dictionary m to the intermediate dataset, warm-started from itself.

    Returns (new dictionary (K, d) float32, per-point nearest assignment).
    Other dictionaries are untouched; the refit never increases the
    quantization error of the intermediate set against dictionary m.
    """
    X = check_vectors(intermediate, name="intermediate")
    schedule = dimension_schedule(codebook.dim, config.schedule_stages)
    fit = improved_kmeans(X, codebook.codewords[m].astype(np.float64),
                          schedule=schedule, max_iters=config.kmeans_iters)
    return fit.points.astype(np.float32), fit.assignment


def _replace_dictionary(codebook: cb.Codebook, m: int, new_dict) -> cb.Codebook:
    cw = codebook.codewords.copy()
    cw[m] = new_dict
    return cb.Codebook(codewords=cw, order=codebook.order.copy())


def _per_vector_errors(codebook, X64, codes) -> np.ndarray:
    diff = X64 - cb._reconstruct_batch(codebook.codewords.astype(np.float64), codes)
    return (diff * diff).sum(axis=1)


def da_sweep(
    data,
    codebook: cb.Codebook,
    encoded: cb.EncodedDataset,
    config: TrainConfig,
    cross: cb.CrossProductTable | None = None,
    sweep_index: int = 1,
    report: TrainReport | None = None,
):
    """One full pass over the M dictionaries: heat up, cool down, re-encode.

    After each dictionary update the dataset is re-encoded with the beam;
    per vector the better of the beam code and the cool-down assignment is
    kept, so the distortion recorded after every step never increases.
    Returns (codebook, encoded, cross) with fresh objects; inputs are not
    mutated.
    """
    X = check_vectors(data, name="data")
    X64 = X.astype(np.float64)
    if cross is None:
        cross = cb.cross_products(codebook)
    codes = encoded.codes.astype(np.int64)
    for m in range(codebook.m_count):
        t0 = time.perf_counter()
        inter = heat_up(X, codebook, cb.EncodedDataset(codes, codebook.k_count), m)
        new_dict, assign = cool_down(inter, codebook, m, config)
        codebook = _replace_dictionary(codebook, m, new_dict)
        cross = cb.refresh_cross_products(cross, codebook, m)
        incumbent = codes.copy()
        incumbent[:, m] = assign
        beam_codes, beam_errs = cb._beam_encode_chunk(
            codebook.codewords.astype(np.float64), cross, X64, config.beam_width
        )
        inc_errs = _per_vector_errors(codebook, X64, incumbent)
        take_beam = beam_errs <= inc_errs
        codes = np.where(take_beam[:, None], beam_codes, incumbent)
        step_dist = float(np.where(take_beam, beam_errs, inc_errs).mean())
        if report is not None:
            report.record(sweep_index, m, step_dist, time.perf_counter() - t0)
    out = cb.EncodedDataset(codes.astype(codebook.code_dtype), codebook.k_count,
                            codebook_hash=codebook.content_hash())
    return codebook, out, cross


def _growth_pass(X, config: TrainConfig, report: TrainReport | None):
    """Learn M dictionaries from zero, greedily extending codes after each.

    With all-zero dictionaries the intermediate set equals the running
    residue, so this pass is greedy residual quantization (cool-down as
    the clustering step). Codes for dictionary m come straight from the
    cool-down assignment; earlier parts stay fixed.
    """
    n = X.shape[0]
    codebook = cb.Codebook.zeros(config.m_count, config.k_count, X.shape[1])
    codes = np.zeros((n, config.m_count), dtype=np.int64)
    X64 = X.astype(np.float64)
    for m in range(config.m_count):
        t0 = time.perf_counter()
        inter = heat_up(X, codebook, cb.EncodedDataset(codes, config.k_count), m)
        new_dict, assign = cool_down(inter, codebook, m, config)
        codebook = _replace_dictionary(codebook, m, new_dict)
        codes[:, m] = assign
        if report is not None:
            dist = float(_per_vector_errors(codebook, X64, codes).mean())
            report.record(0, m, dist, time.perf_counter() - t0)
    return codebook, codes


def _sweep_until_converged(X, codebook, codes, config, report):
    cross = cb.cross_products(codebook)
    encoded = cb.EncodedDataset(codes.astype(codebook.code_dtype), codebook.k_count,
                                codebook_hash=codebook.content_hash())
    X64 = X.astype(np.float64)
    prev = float(_per_vector_errors(codebook, X64, encoded.codes.astype(np.int64)).mean())
    for s in range(1, config.sweeps + 1):
        codebook, encoded, cross = da_sweep(
            X, codebook, encoded, config, cross=cross, sweep_index=s, report=report
        )
        cur = report.steps[-1].distortion if report and report.steps else prev
        if prev > 0 and (prev - cur) / prev < config.rel_tol:
            break
        prev = cur
    return codebook, encoded


def train_from_scratch(data, config: TrainConfig):
    """Learn a codebook from all-zero dictionaries.

    Runs the greedy growth pass, then up to config.sweeps annealing passes
    with full beam re-encoding (stopping early once a sweep improves the
    distortion by less than rel_tol). The returned codebook is variance
    ordered with codes remapped to match. Deterministic for a fixed
    config: repeated runs are byte-identical.
    """
    X = check_vectors(data, name="data")
    if X.shape[0] < config.k_count:
        raise ValueError(
            f"need at least k_count={config.k_count} vectors, got {X.shape[0]}"
        )
    report = TrainReport(config=config)
    codebook, codes = _growth_pass(X, config, report)
    codebook, encoded = _sweep_until_converged(X, codebook, codes, config, report)
    codebook, perm = cb.reorder_by_variance(codebook)
    encoded = cb.EncodedDataset(encoded.codes[:, perm], codebook.k_count,
                                codebook_hash=codebook.content_hash())
    return codebook, encoded, report


def train_online(codebook: cb.Codebook, batch, config: TrainConfig):
    """Refine an existing codebook against one batch of new vectors.

    Encodes the batch with the current codebook, then anneals on the batch
    alone (no replay of older data). Dictionary order is left untouched so
    previously issued codes keep their meaning. Returns (codebook, report).
    """
    X = check_vectors(batch, name="batch")
    if X.shape[1] != codebook.dim:
        raise ValueError(f"batch d={X.shape[1]} does not match codebook dim {codebook.dim}")
    report = TrainReport(config=config)
    encoded = cb.encode_dataset(codebook, X, beam_width=config.beam_width)
    codebook, _ = _sweep_until_converged(X, codebook, encoded.codes.astype(np.int64),
                                         config, report)
    return codebook, report


def rvq_train(data, config: TrainConfig):
    """Greedy residual-quantization baseline: the growth pass alone.

    Same clustering machinery and seed handling as train_from_scratch but
    without annealing sweeps; serves as the reference the annealed result
    must not lose to.
    """
    X = check_vectors(data, name="data")
    if X.shape[0] < config.k_count:
        raise ValueError(
            f"need at least k_count={config.k_count} vectors, got {X.shape[0]}"
        )
    codebook, codes = _growth_pass(X, config, None)
    encoded = cb.EncodedDataset(codes.astype(codebook.code_dtype), codebook.k_count,
                                codebook_hash=codebook.content_hash())
    return codebook, encoded
