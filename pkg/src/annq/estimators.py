"""Estimator wrappers so the toolkit composes with the sklearn ecosystem.

AnnealedQuantizer is a transformer (vectors in, codes out); the two index
estimators follow the NearestNeighbors convention: fit(X) ingests the base
set, kneighbors(Q) returns (distances, ids). All hyperparameters live in
__init__ so get_params/set_params/clone work as usual.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from . import atree as at
from . import codebook as cb
from .annealing import TrainConfig, train_from_scratch, train_online
from .validation import check_vectors

__all__ = [
    "AnnealedQuantizer",
    "ExhaustiveAdcIndex",
    "AggregatingTreeIndex",
]


def _require_fitted(est, attr):
    if not hasattr(est, attr):
        raise NotFittedError(f"{type(est).__name__} is not fitted yet; call fit first")


class AnnealedQuantizer(BaseEstimator, TransformerMixin):
    """Learns an additive codebook by dictionary annealing.

    Parameters mirror TrainConfig: M dictionaries of K codewords, beam
    width for encoding, staged-kmeans depth, sweep count, and stopping
    tolerance.

    Attributes after fit: ``codebook_`` (the trained Codebook),
    ``cross_`` (cached inner-product tables) and ``train_report_``.
    partial_fit trains from scratch on the first batch and refines online
    on later ones.
    """

    def __init__(self, n_dictionaries=8, n_codewords=256, beam_width=10,
                 sweeps=3, schedule_stages=10, rel_tol=1e-3, kmeans_iters=30,
                 random_state=0):
        self.n_dictionaries = n_dictionaries
        self.n_codewords = n_codewords
        self.beam_width = beam_width
        self.sweeps = sweeps
        self.schedule_stages = schedule_stages
        self.rel_tol = rel_tol
        self.kmeans_iters = kmeans_iters
        self.random_state = random_state

    def _config(self) -> TrainConfig:
        return TrainConfig(
            m_count=self.n_dictionaries, k_count=self.n_codewords,
            beam_width=self.beam_width, schedule_stages=self.schedule_stages,
            sweeps=self.sweeps, rel_tol=self.rel_tol,
            kmeans_iters=self.kmeans_iters, seed=self.random_state,
        )

    def fit(self, X, y=None):
        X = check_vectors(X, name="X")
        codebook, _, report = train_from_scratch(X, self._config())
        self.codebook_ = codebook
        self.cross_ = cb.cross_products(codebook)
        self.train_report_ = report
        return self

    def partial_fit(self, X, y=None):
        if not hasattr(self, "codebook_"):
            return self.fit(X)
        X = check_vectors(X, name="X")
        codebook, report = train_online(self.codebook_, X, self._config())
        self.codebook_ = codebook
        self.cross_ = cb.cross_products(codebook)
        self.train_report_ = report
        return self

    def transform(self, X) -> np.ndarray:
        """Beam-encode vectors into an (n, M) code matrix."""
        _require_fitted(self, "codebook_")
        encoded = cb.encode_dataset(self.codebook_, X, beam_width=self.beam_width,
                                    cross=self.cross_)
        return encoded.codes

    def inverse_transform(self, codes) -> np.ndarray:
        """Reconstruct vectors from codes (float32)."""
        _require_fitted(self, "codebook_")
        codes = np.asarray(codes, dtype=np.int64)
        recon = cb._reconstruct_batch(self.codebook_.codewords.astype(np.float64), codes)
        return recon.astype(np.float32)

    def score(self, X, y=None) -> float:
        """Negative mean squared reconstruction error (higher is better)."""
        _require_fitted(self, "codebook_")
        X = check_vectors(X, name="X")
        encoded = cb.encode_dataset(self.codebook_, X, beam_width=self.beam_width,
                                    cross=self.cross_)
        return -cb.distortion(self.codebook_, X, encoded)


def _resolve_quantizer(quantizer, X):
    from sklearn.base import clone

    if quantizer is None:
        quantizer = AnnealedQuantizer()
    if hasattr(quantizer, "codebook_"):
        return quantizer
    return clone(quantizer).fit(X)


class ExhaustiveAdcIndex(BaseEstimator):
    """Exhaustive asymmetric-distance search over an encoded base set.

    fit(X) encodes the base vectors with the (fitted or to-be-fitted)
    quantizer and caches the query-independent cross-term sums; kneighbors
    scans every code per query.
    """

    def __init__(self, quantizer=None, beam_width=None):
        self.quantizer = quantizer
        self.beam_width = beam_width

    def fit(self, X, y=None):
        X = check_vectors(X, name="X")
        q = _resolve_quantizer(self.quantizer, X)
        self.quantizer_ = q
        width = self.beam_width or q.beam_width
        self.encoded_ = cb.encode_dataset(q.codebook_, X, beam_width=width,
                                          cross=q.cross_)
        self.pair_sums_ = cb.code_pair_sums(q.cross_, self.encoded_.codes.astype(np.int64))
        return self

    def kneighbors(self, Q, n_neighbors=10):
        _require_fitted(self, "encoded_")
        Q = check_vectors(Q, name="Q")
        qz = self.quantizer_
        dists = np.empty((Q.shape[0], n_neighbors))
        ids = np.empty((Q.shape[0], n_neighbors), dtype=np.int64)
        for i in range(Q.shape[0]):
            row_ids, row_d = cb.exhaustive_adc_search(
                qz.codebook_, self.encoded_, Q[i].astype(np.float64), n_neighbors,
                cross=qz.cross_, pair_sums=self.pair_sums_,
            )
            ids[i], dists[i] = row_ids, row_d
        return dists, ids


class AggregatingTreeIndex(BaseEstimator):
    """Non-exhaustive search through the code prefix tree.

    Layer budgets follow l0 * ls ** i unless ``budgets`` pins them
    explicitly. ``last_stats_`` holds one SearchStats per query of the
    most recent kneighbors call.
    """

    def __init__(self, quantizer=None, l0=8, ls=2.0, budgets=None, beam_width=None):
        self.quantizer = quantizer
        self.l0 = l0
        self.ls = ls
        self.budgets = budgets
        self.beam_width = beam_width

    def fit(self, X, y=None):
        X = check_vectors(X, name="X")
        q = _resolve_quantizer(self.quantizer, X)
        self.quantizer_ = q
        width = self.beam_width or q.beam_width
        self.encoded_ = cb.encode_dataset(q.codebook_, X, beam_width=width,
                                          cross=q.cross_)
        self.tree_ = at.build_atree(self.encoded_, q.codebook_, cross=q.cross_)
        return self

    def kneighbors(self, Q, n_neighbors=10):
        _require_fitted(self, "tree_")
        Q = check_vectors(Q, name="Q")
        params = at.SearchParams(l0=self.l0, ls=self.ls, r=n_neighbors,
                                 budgets=self.budgets)
        qz = self.quantizer_
        all_ids, all_dists, stats = [], [], []
        for i in range(Q.shape[0]):
            ids, d, st = at.atree_search(self.tree_, qz.codebook_,
                                         Q[i].astype(np.float64), params)
            pad = n_neighbors - ids.size
            if pad > 0:
                ids = np.concatenate([ids, np.full(pad, -1, dtype=np.int64)])
                d = np.concatenate([d, np.full(pad, np.inf)])
            all_ids.append(ids)
            all_dists.append(d)
            stats.append(st)
        self.last_stats_ = stats
        return np.vstack(all_dists), np.vstack(all_ids)
