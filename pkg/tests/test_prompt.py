import hashlib

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from promptnorm.encoders import build_encoders, encode_images, encode_texts, generate_task
from promptnorm.losses import prediction_probabilities
from promptnorm.prompt import (CorruptionSpec, PositionError, SoftPrompt, build_hybrid_set,
                               prompt_norms, replace, rescale)
from promptnorm.rng import stream

prompts = st.tuples(st.integers(1, 6), st.integers(1, 5)).flatmap(
    lambda s: arrays(np.float64, s, elements=st.floats(-5, 5, allow_nan=False))).map(SoftPrompt)


def digest(p: SoftPrompt) -> str:
    return hashlib.sha256(p.rows.tobytes()).hexdigest()


def other_rows_equal(a: SoftPrompt, b: SoftPrompt, j: int) -> bool:
    return np.delete(a.rows, j - 1, 0).tobytes() == np.delete(b.rows, j - 1, 0).tobytes()


class TestSoftPrompt:
    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            SoftPrompt([[1.0, np.nan]])

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            SoftPrompt(np.zeros((0, 3)))

    def test_rows_frozen(self):
        p = SoftPrompt(np.ones((2, 2)))
        with pytest.raises(ValueError):
            p.rows[0, 0] = 5.0

    def test_position_range(self):
        p = SoftPrompt(np.ones((3, 2)))
        for j in (0, 4, -1):
            with pytest.raises(PositionError):
                p.row(j)


class TestRescale:
    def test_identity_bitwise(self):
        p = SoftPrompt(np.random.default_rng(0).normal(size=(4, 3)))
        assert rescale(p, 2, 1.0).equals(p)

    def test_example(self):
        p = SoftPrompt([[3.0, 4.0], [1.0, 1.0]])
        out = rescale(p, 1, 0.5)
        assert out.row(1).tolist() == [1.5, 2.0]
        assert prompt_norms(out).per_position[0] == 2.5

    def test_out_of_range(self):
        with pytest.raises(PositionError):
            rescale(SoftPrompt(np.ones((3, 2))), 4, 2.0)

    def test_non_finite_factor(self):
        with pytest.raises(ValueError):
            rescale(SoftPrompt(np.ones((3, 2))), 1, np.inf)

    @given(prompts, st.data(), st.floats(-10, 10, allow_nan=False))
    def test_locality_homogeneity_purity(self, p, data, s):
        j = data.draw(st.integers(1, p.length))
        before = digest(p)
        out = rescale(p, j, s)
        assert digest(p) == before
        assert other_rows_equal(p, out, j)
        for kind in ("one", "two", "inf"):
            lhs = prompt_norms(out, kind).per_position[j - 1]
            rhs = abs(s) * prompt_norms(p, kind).per_position[j - 1]
            assert abs(lhs - rhs) <= 1e-12 * max(1.0, rhs)


class TestReplace:
    def test_zero_variance_zero_mean(self):
        p = SoftPrompt(np.ones((3, 4)))
        out = replace(p, 2, 0.0, 0.0, stream(0, "t"))
        assert np.all(out.row(2) == 0) and prompt_norms(out).per_position[1] == 0.0

    def test_keyed_draws_reproducible(self):
        p = SoftPrompt(np.ones((3, 4)))
        a = replace(p, 1, 0.0, 0.1, stream(5, "t", 1))
        b = replace(p, 1, 0.0, 0.1, stream(5, "t", 1))
        c = replace(p, 1, 0.0, 0.1, stream(5, "t", 2))
        assert a.equals(b) and not a.equals(c)

    def test_negative_std(self):
        with pytest.raises(ValueError):
            replace(SoftPrompt(np.ones((2, 2))), 1, 0.0, -0.1, stream(0, "t"))

    def test_monte_carlo_norm(self):
        # E||N(0, s^2 I_D)|| is close to s*sqrt(D) for large D
        p = SoftPrompt(np.zeros((1, 512)))
        norms = [prompt_norms(replace(p, 1, 0.0, 0.1, stream(0, "mc", i))).per_position[0]
                 for i in range(1000)]
        assert abs(np.mean(norms) - 0.1 * np.sqrt(512)) <= 0.05 * 0.1 * np.sqrt(512)

    @given(prompts, st.data(), st.floats(-2, 2), st.floats(0, 3), st.integers(0, 1000))
    def test_locality_and_purity(self, p, data, mu, sigma, key):
        j = data.draw(st.integers(1, p.length))
        before = digest(p)
        out = replace(p, j, mu, sigma, stream(key, "prop"))
        assert digest(p) == before
        assert other_rows_equal(p, out, j)


class TestCorruptionSpec:
    def test_dispatch(self):
        p = SoftPrompt([[3.0, 4.0], [1.0, 2.0]])
        assert CorruptionSpec("rescale", 1, factor=2.0).apply(p).row(1).tolist() == [6.0, 8.0]
        assert CorruptionSpec("replace", 2).apply(p).row(2).tolist() == [0.0, 0.0]

    def test_invalid(self):
        with pytest.raises(ValueError):
            CorruptionSpec("shuffle", 1)
        with pytest.raises(ValueError):
            CorruptionSpec("replace", 1, std=-1.0)


class TestHybridSet:
    def test_full_permutation(self):
        p = SoftPrompt(np.ones((6, 2)))
        h = build_hybrid_set(p, 6, 0.5, stream(0, "h"))
        assert sorted(h.positions) == list(range(1, 7))
        assert len(h) == 7 and h.prompts[0] is p

    def test_variants_are_local_rescales(self):
        p = SoftPrompt(np.random.default_rng(1).normal(size=(8, 3)))
        h = build_hybrid_set(p, 3, 0.5, stream(2, "h"))
        for j, v in zip(h.positions, h.variants):
            assert other_rows_equal(p, v, j)
            assert v.row(j).tolist() == (0.5 * p.row(j)).tolist()

    def test_contract_errors(self):
        p = SoftPrompt(np.ones((4, 2)))
        with pytest.raises(ValueError):
            build_hybrid_set(p, 5, 0.5, stream(0, "h"))
        with pytest.raises(ValueError):
            build_hybrid_set(p, 1, 1.0, stream(0, "h"))
        with pytest.raises(ValueError):
            build_hybrid_set(p, 1, 0.0, stream(0, "h"))
        assert build_hybrid_set(p, 1, 1.0, stream(0, "h"), strict=False).variants[0].equals(p)

    def test_distinct_positions_10k(self):
        p = SoftPrompt(np.ones((16, 2)))
        seen = set()
        for i in range(10_000):
            pos = build_hybrid_set(p, 15, 0.5, stream(i, "distinct")).positions
            assert len(set(pos)) == 15 and all(1 <= q <= 16 for q in pos)
            seen.add(pos)
        assert len(seen) > 9_900

    def test_positions_roughly_uniform(self):
        p = SoftPrompt(np.ones((16, 2)))
        counts = np.zeros(16)
        for i in range(4000):
            counts[build_hybrid_set(p, 1, 0.5, stream(i, "uniform")).positions[0] - 1] += 1
        # 250 expected per cell; a 5-sigma band
        assert np.all(np.abs(counts - 250) < 5 * np.sqrt(250))


class TestPromptNorms:
    def test_examples(self):
        z = prompt_norms(np.zeros((3, 2)))
        assert z.per_position.tolist() == [0, 0, 0] and z.mean == 0.0
        n = prompt_norms(SoftPrompt([[3.0, 4.0], [0.0, 0.0]]))
        assert n.per_position.tolist() == [5.0, 0.0] and n.mean == 2.5

    def test_kinds(self):
        rows = [[1.0, -2.0, 3.0]]
        assert prompt_norms(rows, "one").mean == 6.0
        assert prompt_norms(rows, "inf").mean == 3.0
        with pytest.raises(ValueError):
            prompt_norms(rows, "three")


def test_identity_rescale_keeps_predictions():
    enc, task = build_encoders(1), generate_task(1)
    p = SoftPrompt(np.random.default_rng(0).normal(0, 0.3, (16, 32)))
    f = encode_images(enc, task.test_x)
    base = prediction_probabilities(f, encode_texts(enc, p, task.class_embeddings).data, 0.07)
    for j in range(1, 17):
        same = rescale(p, j, 1.0)
        probs = prediction_probabilities(f, encode_texts(enc, same, task.class_embeddings).data,
                                         0.07)
        assert np.max(np.abs(probs - base)) <= 1e-12
        assert np.array_equal(probs.argmax(1), base.argmax(1))
