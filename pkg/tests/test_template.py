"""Fusion, scoring, and template serialization tests."""

import math

import numpy as np
import pytest

from fixedprint.errors import DegenerateEmbeddingError, FormatError, ValidationError
from fixedprint.template import (
    DEFAULT_ACCEPT_THRESHOLD,
    HEADER_LEN,
    BranchEmbedding,
    FixedTemplate,
    deserialize,
    fuse,
    match_score,
    read_template,
    serialize,
    write_template,
)


def random_unit_template(rng, dim=512):
    v = rng.standard_normal(dim)
    return FixedTemplate((v / np.linalg.norm(v)).astype(np.float32))


class TestFuse:
    def test_one_hot_against_zero(self):
        x1 = BranchEmbedding(np.array([1.0] + [0.0] * 255, np.float32), "texture")
        x2 = BranchEmbedding(np.zeros(256, np.float32), "minutiae")
        t = fuse(x1, x2)
        assert t.values[0] == 1.0
        assert not t.values[1:].any()
        assert t.texture_dim == 256

    def test_all_ones_symmetry(self):
        ones = np.ones(256, np.float32)
        t = fuse(BranchEmbedding(ones, "texture"), BranchEmbedding(ones, "minutiae"))
        assert np.allclose(t.values, 1.0 / math.sqrt(512.0), atol=1e-7)

    def test_random_pair_unit_norm_and_prefix(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal(256).astype(np.float32)
        b = rng.standard_normal(256).astype(np.float32)
        t = fuse(BranchEmbedding(a, "texture"), BranchEmbedding(b, "minutiae"))
        # norm recomputed in 64-bit
        assert abs(float(np.linalg.norm(t.values.astype(np.float64))) - 1.0) < 1e-6
        # unnormalized prefix proportional to x1
        ratio = t.values[:256].astype(np.float64) / a
        assert np.allclose(ratio, ratio[0], rtol=1e-5)

    def test_both_zero_rejected(self):
        z = np.zeros(8, np.float32)
        with pytest.raises(DegenerateEmbeddingError):
            fuse(BranchEmbedding(z, "texture"), BranchEmbedding(z, "minutiae"))

    def test_wrong_kind_order(self):
        v = np.ones(4, np.float32)
        with pytest.raises(ValidationError):
            fuse(BranchEmbedding(v, "minutiae"), BranchEmbedding(v, "texture"))

    def test_scale_invariance(self):
        rng = np.random.default_rng(1)
        a = rng.standard_normal(64).astype(np.float32)
        b = rng.standard_normal(64).astype(np.float32)
        t1 = fuse(BranchEmbedding(a, "texture"), BranchEmbedding(b, "minutiae"))
        for alpha in (0.5, 3.0, 117.0):
            t2 = fuse(
                BranchEmbedding(alpha * a, "texture"), BranchEmbedding(alpha * b, "minutiae")
            )
            assert np.max(np.abs(t1.values - t2.values)) < 1e-6


class TestMatchScore:
    def test_self_similarity(self):
        rng = np.random.default_rng(2)
        t = random_unit_template(rng)
        assert match_score(t, t) == pytest.approx(1.0, abs=1e-6)

    def test_orthogonal(self):
        a = np.zeros(512, np.float32)
        b = np.zeros(512, np.float32)
        a[0] = 1.0
        b[1] = 1.0
        assert match_score(FixedTemplate(a), FixedTemplate(b)) == pytest.approx(0.0, abs=1e-6)

    def test_operating_point_decision(self):
        # a genuine-looking pair above the default operating threshold accepts
        rng = np.random.default_rng(3)
        v = rng.standard_normal(512)
        v /= np.linalg.norm(v)
        w = v + 0.3 * rng.standard_normal(512) / math.sqrt(512)
        w /= np.linalg.norm(w)
        s = match_score(FixedTemplate(v.astype(np.float32)), FixedTemplate(w.astype(np.float32)))
        assert s >= DEFAULT_ACCEPT_THRESHOLD
        # and a random imposter pair rejects
        u = rng.standard_normal(512)
        u /= np.linalg.norm(u)
        s2 = match_score(FixedTemplate(v.astype(np.float32)), FixedTemplate(u.astype(np.float32)))
        assert s2 < DEFAULT_ACCEPT_THRESHOLD

    def test_bit_exact_symmetry(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            a = random_unit_template(rng, 129)
            b = random_unit_template(rng, 129)
            assert match_score(a, b) == match_score(b, a)

    def test_bounded(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            a = random_unit_template(rng, 64)
            b = random_unit_template(rng, 64)
            assert abs(match_score(a, b)) <= 1.0 + 1e-6

    def test_dim_mismatch(self):
        rng = np.random.default_rng(6)
        with pytest.raises(ValidationError):
            match_score(random_unit_template(rng, 64), random_unit_template(rng, 128))


class TestSerialization:
    def test_sizes(self):
        rng = np.random.default_rng(7)
        blob = serialize(random_unit_template(rng, 512))
        assert len(blob) == 2064
        assert len(blob) - HEADER_LEN == 2048

    def test_round_trip_bit_exact(self):
        rng = np.random.default_rng(8)
        t = random_unit_template(rng, 512)
        blob = serialize(t)
        back = deserialize(blob)
        assert np.array_equal(back.values, t.values)
        assert serialize(back) == blob

    def test_truncated_rejected(self):
        rng = np.random.default_rng(9)
        blob = serialize(random_unit_template(rng, 64))
        for cut in (0, 3, HEADER_LEN - 1, HEADER_LEN + 5, len(blob) - 1):
            with pytest.raises(FormatError):
                deserialize(blob[:cut])

    def test_corrupt_header_fields(self):
        rng = np.random.default_rng(10)
        blob = bytearray(serialize(random_unit_template(rng, 64)))
        bad_magic = bytes(b"XXXX") + bytes(blob[4:])
        with pytest.raises(FormatError):
            deserialize(bad_magic)
        bad_version = bytes(blob[:4]) + bytes([99]) + bytes(blob[5:])
        with pytest.raises(FormatError):
            deserialize(bad_version)

    def test_non_unit_payload_rejected(self):
        rng = np.random.default_rng(11)
        t = random_unit_template(rng, 64)
        blob = bytearray(serialize(t))
        doubled = (t.values.astype(np.float64) * 2).astype("<f4").tobytes()
        with pytest.raises(FormatError):
            deserialize(bytes(blob[:HEADER_LEN]) + doubled)

    def test_file_round_trip(self, tmp_path):
        rng = np.random.default_rng(12)
        t = random_unit_template(rng, 512)
        p = tmp_path / "t.fpt"
        write_template(t, p)
        assert p.stat().st_size == 2064
        back = read_template(p)
        assert np.array_equal(back.values, t.values)
