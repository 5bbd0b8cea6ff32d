import itertools

import numpy as np
import pytest

import annq
from annq import FormatError
from annq.codebook import (
    DEBUG_COUNTERS,
    Codebook,
    EncodedDataset,
    adc_distance,
    adc_table,
    code_pair_sums,
    cross_products,
    dictionary_variances,
    distortion,
    encode_dataset,
    encode_multipath,
    exhaustive_adc_search,
    read_codebook,
    read_encoded,
    reconstruct,
    reorder_by_variance,
    write_codebook,
    write_encoded,
)
from conftest import random_codebook


class TestReconstruct:
    def test_two_dictionaries(self):
        cw = np.zeros((2, 1, 2), dtype=np.float32)
        cw[0, 0] = [1, 0]
        cw[1, 0] = [0, 1]
        book = Codebook(codewords=cw, order=np.arange(2))
        np.testing.assert_array_equal(reconstruct(book, [0, 0]), [1.0, 1.0])

    def test_zero_codewords(self):
        book = Codebook.zeros(3, 4, 5)
        np.testing.assert_array_equal(reconstruct(book, [1, 2, 3]), np.zeros(5))

    def test_matches_naive_sum(self):
        rng = np.random.default_rng(0)
        book = random_codebook(rng, 4, 8, 16)
        code = rng.integers(0, 8, 4)
        naive = np.zeros(16)
        for m in range(4):
            for j in range(16):
                naive[j] += float(book.codewords[m, code[m], j])
        np.testing.assert_allclose(reconstruct(book, code), naive, rtol=1e-6)

    def test_bad_index_rejected(self):
        book = Codebook.zeros(2, 4, 3)
        with pytest.raises(ValueError):
            reconstruct(book, [0, 4])


class TestDistortion:
    def test_zero_for_exact_reconstruction(self):
        rng = np.random.default_rng(1)
        book = random_codebook(rng, 3, 4, 6)
        codes = rng.integers(0, 4, (10, 3))
        data = np.vstack([reconstruct(book, c) for c in codes]).astype(np.float32)
        enc = EncodedDataset(codes=codes, k_count=4)
        assert distortion(book, data, enc) < 1e-10

    def test_single_vector_distance(self):
        book = Codebook.zeros(1, 1, 2)
        data = np.array([[1.0, 1.0]], dtype=np.float32)
        enc = EncodedDataset(codes=np.zeros((1, 1), dtype=np.uint8), k_count=1)
        assert distortion(book, data, enc) == pytest.approx(2.0)


class TestReorder:
    def test_sorted_identity(self):
        cw = np.zeros((2, 2, 1), dtype=np.float32)
        cw[0, 1] = 4.0  # higher scatter first
        cw[1, 1] = 1.0
        book = Codebook(codewords=cw, order=np.arange(2))
        _, perm = reorder_by_variance(book)
        np.testing.assert_array_equal(perm, [0, 1])

    def test_swap(self):
        cw = np.zeros((2, 2, 1), dtype=np.float32)
        cw[0, 1] = 1.0
        cw[1, 1] = 4.0
        book = Codebook(codewords=cw, order=np.arange(2))
        reordered, perm = reorder_by_variance(book)
        np.testing.assert_array_equal(perm, [1, 0])
        np.testing.assert_array_equal(reordered.order, [1, 0])

    def test_variances_non_increasing_after(self):
        rng = np.random.default_rng(2)
        book = random_codebook(rng, 5, 6, 4)
        reordered, perm = reorder_by_variance(book)
        v = dictionary_variances(reordered)
        assert (np.diff(v) <= 1e-12).all()
        # codes remap consistently
        codes = rng.integers(0, 6, (20, 5))
        before = np.vstack([reconstruct(book, c) for c in codes])
        after = np.vstack([reconstruct(reordered, c) for c in codes[:, perm]])
        np.testing.assert_allclose(before, after, rtol=1e-6)


class TestCrossProducts:
    def test_orthogonal_zero(self):
        cw = np.zeros((2, 2, 4), dtype=np.float32)
        cw[0, :, :2] = np.eye(2)
        cw[1, :, 2:] = np.eye(2)
        cross = cross_products(Codebook(codewords=cw, order=np.arange(2)))
        np.testing.assert_allclose(cross.products[0, 1], 0.0)

    def test_known_entry(self):
        cw = np.ones((2, 1, 2), dtype=np.float32)
        cross = cross_products(Codebook(codewords=cw, order=np.arange(2)))
        assert cross.products[0, 1][0, 0] == pytest.approx(2.0)

    def test_symmetry_and_naive_spot_checks(self):
        rng = np.random.default_rng(3)
        book = random_codebook(rng, 3, 5, 7)
        cross = cross_products(book)
        for a in range(3):
            for b in range(3):
                np.testing.assert_allclose(
                    cross.products[a, b], cross.products[b, a].T, atol=1e-4
                )
        for _ in range(20):
            a, b = rng.integers(0, 3, 2)
            i, j = rng.integers(0, 5, 2)
            naive = float(
                np.dot(book.codewords[a, i].astype(np.float64),
                       book.codewords[b, j].astype(np.float64))
            )
            assert cross.products[a, b][i, j] == pytest.approx(naive, abs=1e-4)


class TestBeamEncoding:
    def test_m1_is_nearest_codeword(self):
        rng = np.random.default_rng(4)
        book = random_codebook(rng, 1, 8, 5)
        cross = cross_products(book)
        x = rng.standard_normal(5)
        for L in [1, 3, 8]:
            code, err = encode_multipath(book, cross, x, L)
            d = ((x[None, :] - book.codewords[0].astype(np.float64)) ** 2).sum(axis=1)
            assert code[0] == np.argmin(d)
            assert err == pytest.approx(d.min(), rel=1e-9)

    def test_matches_exhaustive_at_full_beam(self):
        rng = np.random.default_rng(5)
        book = random_codebook(rng, 2, 4, 4)
        cross = cross_products(book)
        cw = book.codewords.astype(np.float64)
        for _ in range(20):
            x = rng.standard_normal(4)
            code, err = encode_multipath(book, cross, x, beam_width=4)
            best = min(
                (((x - cw[0, i] - cw[1, j]) ** 2).sum(), (i, j))
                for i, j in itertools.product(range(4), range(4))
            )
            assert tuple(code) == best[1]

    def test_full_beam_dominates_all_widths(self):
        # the full-width beam is the exhaustive minimizer, so it can never
        # lose to a narrower beam
        rng = np.random.default_rng(6)
        book = random_codebook(rng, 3, 4, 8)
        cross = cross_products(book)
        full = 4 ** 2
        for _ in range(20):
            x = rng.standard_normal(8)
            best = encode_multipath(book, cross, x, full)[1]
            for L in [1, 2, 4, 8]:
                assert best <= encode_multipath(book, cross, x, L)[1] + 1e-9

    def test_wider_beams_rarely_hurt(self):
        # pointwise monotonicity in the beam width does not hold for
        # partial-error beam search (a wider beam can evict the greedy
        # path on better partial scores that end worse); it holds for the
        # overwhelming majority of instances and on average
        rng = np.random.default_rng(6)
        book = random_codebook(rng, 4, 8, 12)
        cross = cross_products(book)
        steps = regressions = 0
        gain = 0.0
        for _ in range(40):
            x = rng.standard_normal(12)
            errs = [encode_multipath(book, cross, x, L)[1] for L in [1, 2, 4, 8, 16]]
            for a, b in zip(errs, errs[1:]):
                steps += 1
                regressions += int(b > a + 1e-9)
            gain += errs[0] - errs[-1]
        assert regressions <= steps * 0.1
        assert gain > 0

    def test_lexicographic_tie_break_on_zero_book(self):
        book = Codebook.zeros(3, 4, 2)
        cross = cross_products(book)
        code, err = encode_multipath(book, cross, np.array([1.0, 2.0]), 4)
        np.testing.assert_array_equal(code, [0, 0, 0])
        assert err == pytest.approx(5.0)

    def test_beam_quality_saturates_at_low_width(self, trained_small, cross_small):
        X, _, book, _, _ = trained_small
        e10 = encode_dataset(book, X, beam_width=10, cross=cross_small)
        e64 = encode_dataset(book, X, beam_width=64, cross=cross_small)
        d10 = distortion(book, X, e10)
        d64 = distortion(book, X, e64)
        assert d10 <= 1.02 * d64

    def test_dataset_matches_per_vector(self, cross_small, trained_small):
        X, _, book, _, _ = trained_small
        enc = encode_dataset(book, X[:40], beam_width=7, cross=cross_small)
        for i in range(40):
            code, _ = encode_multipath(book, cross_small, X[i].astype(np.float64), 7)
            np.testing.assert_array_equal(enc.codes[i], code)

    def test_dataset_deterministic_and_parallel_identical(self, trained_small):
        X, _, book, _, _ = trained_small
        a = encode_dataset(book, X[:500], beam_width=5)
        b = encode_dataset(book, X[:500], beam_width=5)
        c = encode_dataset(book, X[:500], beam_width=5, n_jobs=4)
        assert a.codes.tobytes() == b.codes.tobytes() == c.codes.tobytes()

    def test_dataset_distortion_consistent(self, trained_small, cross_small):
        X, _, book, _, _ = trained_small
        enc = encode_dataset(book, X[:200], beam_width=10, cross=cross_small)
        recomputed = distortion(book, X[:200], enc)
        recon_err = np.array([
            ((X[i].astype(np.float64) - reconstruct(book, enc.codes[i])) ** 2).sum()
            for i in range(200)
        ])
        assert recomputed == pytest.approx(recon_err.mean(), rel=1e-9)

    def test_stage_scoring_needs_no_raw_vectors(self, trained_small, cross_small):
        # one table build plus one final-error reconstruction, independent
        # of beam width and dictionary count
        X, _, book, _, _ = trained_small
        for L in [1, 4, 16]:
            DEBUG_COUNTERS["raw_dim_kernel_calls"] = 0
            encode_multipath(book, cross_small, X[0].astype(np.float64), L)
            assert DEBUG_COUNTERS["raw_dim_kernel_calls"] == 2


class TestAdc:
    def test_table_zero_at_matching_codeword(self):
        rng = np.random.default_rng(7)
        book = random_codebook(rng, 3, 6, 9)
        t = adc_table(book, book.codewords[1, 4].astype(np.float64))
        assert t.values[1, 4] == pytest.approx(0.0, abs=1e-9)

    def test_table_zero_query_gives_norms(self):
        rng = np.random.default_rng(8)
        book = random_codebook(rng, 2, 5, 4)
        t = adc_table(book, np.zeros(4))
        sq = (book.codewords.astype(np.float64) ** 2).sum(axis=2)
        np.testing.assert_allclose(t.values, sq, atol=1e-6)

    def test_table_matches_naive(self):
        rng = np.random.default_rng(9)
        book = random_codebook(rng, 3, 4, 6)
        q = rng.standard_normal(6)
        t = adc_table(book, q)
        for m in range(3):
            for k in range(4):
                naive = ((q - book.codewords[m, k].astype(np.float64)) ** 2).sum()
                assert t.values[m, k] == pytest.approx(naive, abs=1e-4)

    def test_distance_exact_identity(self):
        rng = np.random.default_rng(10)
        book = random_codebook(rng, 4, 6, 8)
        cross = cross_products(book)
        for _ in range(50):
            q = rng.standard_normal(8)
            code = rng.integers(0, 6, 4)
            approx = adc_distance(adc_table(book, q), cross, code)
            direct = ((q - reconstruct(book, code)) ** 2).sum()
            assert approx == pytest.approx(direct, rel=1e-3, abs=1e-9)

    def test_distance_zero_when_query_is_reconstruction(self):
        rng = np.random.default_rng(11)
        book = random_codebook(rng, 3, 4, 5)
        cross = cross_products(book)
        code = [1, 2, 3]
        q = reconstruct(book, code)
        assert adc_distance(adc_table(book, q), cross, code) == pytest.approx(0.0, abs=1e-6)

    def test_m1_is_plain_lookup(self):
        rng = np.random.default_rng(12)
        book = random_codebook(rng, 1, 5, 3)
        cross = cross_products(book)
        q = rng.standard_normal(3)
        t = adc_table(book, q)
        assert adc_distance(t, cross, [2]) == t.values[0, 2]


class TestExhaustiveSearch:
    def test_single_vector(self):
        rng = np.random.default_rng(13)
        book = random_codebook(rng, 2, 3, 4)
        enc = EncodedDataset(codes=np.array([[1, 2]], dtype=np.uint8), k_count=3)
        ids, dists = exhaustive_adc_search(book, enc, rng.standard_normal(4), 1)
        assert ids.tolist() == [0]

    def test_exact_match_ranks_first(self):
        rng = np.random.default_rng(14)
        book = random_codebook(rng, 2, 4, 5)
        codes = rng.integers(0, 4, (30, 2))
        enc = EncodedDataset(codes=codes, k_count=4)
        q = reconstruct(book, codes[17])
        ids, dists = exhaustive_adc_search(book, enc, q, 3)
        # any row with the same code reconstructs identically; ties by id
        same = [i for i in range(30) if tuple(codes[i]) == tuple(codes[17])]
        assert ids[0] == same[0]
        assert dists[0] == pytest.approx(0.0, abs=1e-6)

    def test_ordering_matches_direct_distances(self, trained_small, cross_small):
        X, _, book, enc, _ = trained_small
        rng = np.random.default_rng(15)
        recon = np.vstack([reconstruct(book, c) for c in enc.codes[:400]])
        sub = EncodedDataset(codes=enc.codes[:400], k_count=book.k_count)
        for _ in range(5):
            q = rng.standard_normal(X.shape[1])
            ids, dists = exhaustive_adc_search(book, sub, q, 10, cross=cross_small)
            direct = ((q[None, :] - recon) ** 2).sum(axis=1)
            order = np.lexsort((np.arange(400), direct))[:10]
            np.testing.assert_array_equal(ids, order)

    def test_r_too_large_rejected(self):
        book = Codebook.zeros(2, 2, 2)
        enc = EncodedDataset(codes=np.zeros((3, 2), dtype=np.uint8), k_count=2)
        with pytest.raises(ValueError):
            exhaustive_adc_search(book, enc, np.zeros(2), 4)

    def test_pair_sums_match_adc_distance(self):
        rng = np.random.default_rng(16)
        book = random_codebook(rng, 3, 4, 6)
        cross = cross_products(book)
        codes = rng.integers(0, 4, (20, 3))
        sums = code_pair_sums(cross, codes)
        for i in range(20):
            expected = 2.0 * sum(
                cross.products[a, b][codes[i, a], codes[i, b]]
                for a in range(3) for b in range(a + 1, 3)
            )
            assert sums[i] == pytest.approx(expected, rel=1e-12)


class TestCodebookFiles:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(17)
        book = random_codebook(rng, 3, 5, 7)
        book.order = np.array([2, 0, 1])
        path = tmp_path / "b.hclb"
        write_codebook(path, book)
        back = read_codebook(path)
        assert back.codewords.tobytes() == book.codewords.tobytes()
        np.testing.assert_array_equal(back.order, book.order)
        assert back.content_hash() == book.content_hash()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.hclb"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(FormatError, match="HCLB") as exc:
            read_codebook(path)
        assert exc.value.exit_code == 2

    def test_truncation(self, tmp_path):
        rng = np.random.default_rng(18)
        book = random_codebook(rng, 2, 3, 4)
        path = tmp_path / "t.hclb"
        write_codebook(path, book)
        path.write_bytes(path.read_bytes()[:-5])
        with pytest.raises(FormatError, match="truncated"):
            read_codebook(path)

    def test_encoded_round_trip(self, tmp_path):
        rng = np.random.default_rng(19)
        for k in [16, 300]:  # one- and two-byte code widths
            codes = rng.integers(0, k, (40, 6))
            enc = EncodedDataset(codes=codes, k_count=k)
            path = tmp_path / f"c{k}.hcle"
            write_encoded(path, enc)
            back = read_encoded(path)
            assert back.codes.tobytes() == enc.codes.tobytes()
            assert back.codes.dtype == enc.codes.dtype
            assert back.k_count == k

    def test_encoded_bad_magic(self, tmp_path):
        path = tmp_path / "junk.hcle"
        path.write_bytes(b"WHAT" + b"\x00" * 30)
        with pytest.raises(FormatError, match="HCLE") as exc:
            read_encoded(path)
        assert exc.value.exit_code == 2
