"""Gallery build/search/persistence and evaluation-harness tests."""

import numpy as np
import pytest

from fixedprint.errors import FormatError, UnsupportedFarLevelError, ValidationError
from fixedprint.gallery_search import (
    EvalReport,
    Gallery,
    SearchResult,
    benchmark,
    build_gallery,
    eval_search,
    eval_verification,
    load_gallery,
    save_gallery,
    search,
)
from fixedprint.template import FixedTemplate, match_score


def unit_template(rng, dim=32):
    v = rng.standard_normal(dim)
    return FixedTemplate((v / np.linalg.norm(v)).astype(np.float32))


def basis_template(dim, axis):
    v = np.zeros(dim, np.float32)
    v[axis] = 1.0
    return FixedTemplate(v)


def random_gallery(rng, n, dim=32):
    return build_gallery([(f"s{i:04d}", unit_template(rng, dim)) for i in range(n)])


def oracle_search(gallery, query, k):
    """Naive per-pair reference: score every row, sort by (-score, index)."""
    scored = []
    for i, sid in enumerate(gallery.ids):
        row = FixedTemplate(np.asarray(gallery.matrix[i]))
        scored.append((sid, match_score(row, query), i))
    scored.sort(key=lambda t: (-t[1], t[2]))
    return [(sid, s) for sid, s, _ in scored[: min(k, gallery.size)]]


class TestBuildGallery:
    def test_single_template(self):
        rng = np.random.default_rng(0)
        g = build_gallery([("only", unit_template(rng))])
        assert g.size == 1
        assert g.ids == ("only",)

    def test_duplicate_id_rejected(self):
        rng = np.random.default_rng(1)
        pairs = [("dup", unit_template(rng)), ("dup", unit_template(rng))]
        with pytest.raises(ValidationError):
            build_gallery(pairs)

    def test_empty_rejected(self):
        with pytest.raises(ValidationError):
            build_gallery([])

    def test_dim_mismatch_rejected(self):
        rng = np.random.default_rng(2)
        with pytest.raises(ValidationError):
            build_gallery([("a", unit_template(rng, 32)), ("b", unit_template(rng, 64))])

    def test_insertion_order_and_shape(self):
        rng = np.random.default_rng(3)
        names = [f"p{i}" for i in range(250)]
        g = build_gallery([(n, unit_template(rng, 48)) for n in names])
        assert g.ids == tuple(names)
        assert g.matrix.shape == (250, 48)
        assert g.matrix.dtype == np.float32
        assert not g.matrix.flags.writeable

    def test_non_unit_rows_rejected(self):
        bad = np.full((3, 8), 0.5, np.float32)
        with pytest.raises(ValidationError):
            Gallery(ids=("a", "b", "c"), matrix=bad)


class TestSearch:
    def test_exact_row_query(self):
        rng = np.random.default_rng(4)
        g = random_gallery(rng, 50)
        r = 17
        res = search(g, FixedTemplate(np.asarray(g.matrix[r])), k=1)
        assert res.best_id == g.ids[r]
        assert res.scores[0] == pytest.approx(1.0, abs=1e-6)

    def test_k_larger_than_gallery(self):
        rng = np.random.default_rng(5)
        g = random_gallery(rng, 7)
        res = search(g, unit_template(rng), k=100)
        assert len(res.entries) == 7

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(6)
        g = random_gallery(rng, 300, dim=40)
        for _ in range(10):
            q = unit_template(rng, 40)
            for k in (1, 5, 300):
                fast = search(g, q, k=k)
                assert list(fast.entries) == oracle_search(g, q, k)

    def test_tie_break_lower_index_first(self):
        shared = basis_template(8, 0)
        other = basis_template(8, 1)
        g = build_gallery([("a", shared), ("b", other), ("c", shared)])
        res = search(g, shared, k=3)
        assert res.ids == ("a", "c", "b")

    def test_permuting_ties_permutes_results(self):
        shared = basis_template(8, 0)
        other = basis_template(8, 1)
        g = build_gallery([("c", shared), ("a", shared), ("b", other)])
        res = search(g, shared, k=3)
        assert res.ids == ("c", "a", "b")

    def test_worker_count_invariance(self):
        rng = np.random.default_rng(7)
        g = random_gallery(rng, 500, dim=24)
        q = unit_template(rng, 24)
        base = search(g, q, k=500, block_rows=64, workers=1)
        for workers in (2, 4):
            assert search(g, q, k=500, block_rows=64, workers=workers).entries == base.entries

    def test_blocking_invariance(self):
        rng = np.random.default_rng(8)
        g = random_gallery(rng, 130, dim=16)
        q = unit_template(rng, 16)
        base = search(g, q, k=130)
        for block in (1, 7, 129, 130, 4096):
            assert search(g, q, k=130, block_rows=block).entries == base.entries

    def test_dim_mismatch(self):
        rng = np.random.default_rng(9)
        g = random_gallery(rng, 5, dim=16)
        with pytest.raises(ValidationError):
            search(g, unit_template(rng, 32))

    def test_bad_k(self):
        rng = np.random.default_rng(10)
        g = random_gallery(rng, 5, dim=16)
        with pytest.raises(ValidationError):
            search(g, unit_template(rng, 16), k=0)

    def test_result_scores_non_increasing_enforced(self):
        with pytest.raises(ValidationError):
            SearchResult(entries=(("a", 0.1), ("b", 0.5)))


class TestPersistence:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(11)
        g = random_gallery(rng, 37, dim=20)
        p = tmp_path / "g.fpg"
        save_gallery(g, p)
        for mmap in (True, False):
            back = load_gallery(p, mmap=mmap)
            assert back.ids == g.ids
            assert np.array_equal(back.matrix, g.matrix)

    def test_unicode_ids(self, tmp_path):
        rng = np.random.default_rng(12)
        ids = ("앨리스", "bøb", "carol")
        g = build_gallery([(i, unit_template(rng, 8)) for i in ids])
        p = tmp_path / "g.fpg"
        save_gallery(g, p)
        assert load_gallery(p).ids == ids

    def test_bad_magic(self, tmp_path):
        rng = np.random.default_rng(13)
        p = tmp_path / "g.fpg"
        save_gallery(random_gallery(rng, 3, dim=8), p)
        blob = bytearray(p.read_bytes())
        blob[:4] = b"NOPE"
        p.write_bytes(bytes(blob))
        with pytest.raises(FormatError):
            load_gallery(p)

    def test_truncated_payload(self, tmp_path):
        rng = np.random.default_rng(14)
        p = tmp_path / "g.fpg"
        save_gallery(random_gallery(rng, 3, dim=8), p)
        blob = p.read_bytes()
        p.write_bytes(blob[:-5])
        with pytest.raises(FormatError):
            load_gallery(p)

    def test_non_unit_payload(self, tmp_path):
        rng = np.random.default_rng(15)
        g = random_gallery(rng, 3, dim=8)
        p = tmp_path / "g.fpg"
        save_gallery(g, p)
        blob = bytearray(p.read_bytes())
        # scale the float block by 2 in place
        floats = np.frombuffer(bytes(blob[-3 * 8 * 4 :]), dtype="<f4") * 2.0
        blob[-3 * 8 * 4 :] = floats.astype("<f4").tobytes()
        p.write_bytes(bytes(blob))
        with pytest.raises(FormatError):
            load_gallery(p)

    def test_search_after_load_matches(self, tmp_path):
        rng = np.random.default_rng(16)
        g = random_gallery(rng, 64, dim=12)
        p = tmp_path / "g.fpg"
        save_gallery(g, p)
        back = load_gallery(p)
        q = unit_template(rng, 12)
        assert search(back, q, k=64).entries == search(g, q, k=64).entries


class TestBenchmark:
    def test_report_fields(self):
        rng = np.random.default_rng(17)
        g = random_gallery(rng, 1000, dim=32)
        queries = [unit_template(rng, 32) for _ in range(4)]
        rep = benchmark(g, queries, repetitions=2, threads=2)
        assert rep.gallery_size == 1000
        assert rep.dim == 32
        assert rep.n_probes == 4
        assert rep.matches_per_sec_single > 0
        assert rep.matches_per_sec_multi > 0
        assert rep.probe_latency_ms > 0
        d = rep.to_json_dict()
        assert d["repetitions"] == 2 and d["threads"] == 2

    def test_needs_probes(self):
        rng = np.random.default_rng(18)
        g = random_gallery(rng, 10, dim=8)
        with pytest.raises(ValidationError):
            benchmark(g, [], repetitions=1)


class TestEvalVerification:
    def test_hand_enumerated_fixture(self):
        report = eval_verification([0.9, 0.8, 0.2], [0.7, 0.3, 0.1], far_levels=[1 / 3])
        (level, tar), = report.tar_at_far
        (_, theta), = report.thresholds
        assert level == pytest.approx(1 / 3)
        assert theta == pytest.approx(0.7)
        assert tar == pytest.approx(2 / 3)
        assert report.n_genuine == 3 and report.n_imposter == 3

    def test_perfect_separation(self):
        genuine = [0.9, 0.85, 0.8, 0.75]
        imposter = [0.4, 0.3, 0.2, 0.1]
        report = eval_verification(genuine, imposter, far_levels=[1.0, 0.5, 0.25])
        assert all(tar == 1.0 for _, tar in report.tar_at_far)

    def test_identical_distributions(self):
        rng = np.random.default_rng(19)
        scores = rng.uniform(0, 1, size=4000)
        report = eval_verification(scores, scores, far_levels=[0.5, 0.1, 0.01])
        for level, tar in report.tar_at_far:
            assert tar == pytest.approx(level, abs=0.02)

    def test_unsupported_level(self):
        with pytest.raises(UnsupportedFarLevelError):
            eval_verification([0.9], [0.7, 0.3, 0.1], far_levels=[0.1])

    def test_level_at_resolution_boundary_supported(self):
        report = eval_verification([0.9], [0.7, 0.3, 0.1], far_levels=[1 / 3])
        assert report.thresholds[0][1] == pytest.approx(0.7)

    def test_measured_far_never_exceeds_level(self):
        rng = np.random.default_rng(20)
        for trial in range(20):
            imposter = rng.uniform(-1, 1, size=rng.integers(5, 200))
            genuine = rng.uniform(-1, 1, size=50)
            levels = [0.5, 0.25, 1.0 / imposter.size]
            report = eval_verification(genuine, imposter, far_levels=levels)
            for level, theta in report.thresholds:
                measured = np.count_nonzero(imposter >= theta) / imposter.size
                assert measured <= level + 1e-12

    def test_tied_imposters_step_above(self):
        report = eval_verification([0.6, 0.4], [0.5, 0.5, 0.5, 0.5], far_levels=[0.5])
        (_, theta), = report.thresholds
        assert theta > 0.5
        assert report.tar_at_far[0][1] == pytest.approx(0.5)

    def test_template_pairs_accepted(self):
        a = basis_template(4, 0)
        b = basis_template(4, 1)
        report = eval_verification([(a, a)], [(a, b)], far_levels=[1.0])
        assert report.tar_at_far[0][1] == 1.0

    def test_empty_sides_rejected(self):
        with pytest.raises(ValidationError):
            eval_verification([], [0.5], far_levels=[1.0])
        with pytest.raises(ValidationError):
            eval_verification([0.5], [], far_levels=[1.0])


class TestEvalSearch:
    def make_orthogonal_gallery(self):
        return build_gallery([(f"g{i}", basis_template(4, i)) for i in range(4)])

    def test_probes_equal_rows(self):
        rng = np.random.default_rng(21)
        g = random_gallery(rng, 30, dim=16)
        probes = [(g.ids[i], FixedTemplate(np.asarray(g.matrix[i]))) for i in range(30)]
        report = eval_search(probes, g, max_rank=5)
        assert report.cmc[0] == 1.0

    def test_hand_computed_three_probe_cmc(self):
        g = self.make_orthogonal_gallery()

        def unit(v):
            v = np.asarray(v, np.float64)
            return FixedTemplate((v / np.linalg.norm(v)).astype(np.float32))

        probes = [
            ("g1", unit([0, 1, 0, 0])),           # rank 1
            ("g2", unit([1, 0, 0.5, 0])),         # rank 2
            ("g3", unit([1, 1, 0, 0.5])),         # rank 3
        ]
        report = eval_search(probes, g, max_rank=4)
        assert report.cmc == pytest.approx((1 / 3, 2 / 3, 1.0, 1.0))
        assert report.n_genuine == 3

    def test_rank_respects_index_tie_break(self):
        shared = basis_template(4, 0)
        g = build_gallery([("first", shared), ("second", shared)])
        report = eval_search([("second", shared)], g, max_rank=2)
        # row 0 wins the tie, so the true mate surfaces at rank 2
        assert report.cmc == pytest.approx((0.0, 1.0))

    def test_monotone_and_full_rank_one(self):
        rng = np.random.default_rng(22)
        g = random_gallery(rng, 25, dim=8)
        probes = [(g.ids[rng.integers(25)], unit_template(rng, 8)) for _ in range(40)]
        report = eval_search(probes, g)
        assert len(report.cmc) == 25
        assert all(a <= b for a, b in zip(report.cmc, report.cmc[1:]))
        assert report.cmc[-1] == 1.0

    def test_ranks_match_full_search(self):
        rng = np.random.default_rng(23)
        g = random_gallery(rng, 60, dim=10)
        probes = [(g.ids[int(rng.integers(60))], unit_template(rng, 10)) for _ in range(15)]
        report = eval_search(probes, g)
        # recompute every rank through the ranked search path
        ranks = []
        for true_id, tpl in probes:
            ids = search(g, tpl, k=60).ids
            ranks.append(ids.index(true_id) + 1)
        expected = tuple(
            np.count_nonzero(np.asarray(ranks) <= r) / len(ranks) for r in range(1, 61)
        )
        assert report.cmc == pytest.approx(expected)

    def test_unknown_true_id(self):
        g = self.make_orthogonal_gallery()
        with pytest.raises(ValidationError):
            eval_search([("stranger", basis_template(4, 0))], g)


class TestEvalReportInvariants:
    def test_decreasing_cmc_rejected(self):
        with pytest.raises(ValidationError):
            EvalReport(cmc=(0.5, 0.4))

    def test_out_of_range_tar_rejected(self):
        with pytest.raises(ValidationError):
            EvalReport(tar_at_far=((0.1, 1.5),))

    def test_json_dict(self):
        r = EvalReport(tar_at_far=((0.1, 0.9),), thresholds=((0.1, 0.55),), n_genuine=4,
                       n_imposter=7)
        d = r.to_json_dict()
        assert d["tar_at_far"] == [[0.1, 0.9]]
        assert d["n_imposter"] == 7
