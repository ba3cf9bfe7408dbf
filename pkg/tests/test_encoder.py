import numpy as np
import pytest

from contune.encoder import SurrogateEncoder
from contune.errors import DegenerateInputError


@pytest.fixture(scope="module")
def enc():
    return SurrogateEncoder(embed_dim=64, seed=0)


def test_repeat_calls_bitwise_identical(enc):
    a = enc.encode("reverse the sequence : a b c")
    b = enc.encode("reverse the sequence : a b c")
    assert np.array_equal(a, b)


def test_unit_norm_over_random_strings(enc):
    rng = np.random.default_rng(4)
    words = ["alpha", "beta", "gamma", "delta", "9", "x", "sum", "of"]
    for _ in range(1000):
        n = int(rng.integers(1, 9))
        s = " ".join(words[int(i)] for i in rng.integers(0, len(words), size=n))
        assert abs(np.linalg.norm(enc.encode(s)) - 1.0) <= 1e-12


def test_cross_task_instructions_separate(enc):
    c = float(enc.encode("reverse the sequence") @ enc.encode("add the numbers modulo p"))
    # regression value computed once with the default table (seed 0)
    assert c < 0.9
    assert c == pytest.approx(0.13966618695598042, abs=1e-12)


def test_token_permutation_invariance_exact(enc):
    a = enc.encode("sort the digits ascending : 3 1 2")
    b = enc.encode("1 3 ascending the digits sort 2 :")
    assert np.array_equal(a, b)


def test_multiplicity_matters(enc):
    assert not np.array_equal(enc.encode("a a b"), enc.encode("a b b"))


def test_case_folding(enc):
    assert np.array_equal(enc.encode("Reverse THE Sequence"),
                          enc.encode("reverse the sequence"))


def test_empty_instruction_rejected(enc):
    with pytest.raises(DegenerateInputError):
        enc.encode("   ")


def test_distinct_seeds_distinct_tables():
    a = SurrogateEncoder(16, seed=1)
    b = SurrogateEncoder(16, seed=2)
    assert not np.array_equal(a._table, b._table)
    assert not np.array_equal(a.encode("same words"), b.encode("same words"))


def test_table_frozen(enc):
    with pytest.raises(ValueError):
        enc._table[0, 0] = 99.0


def test_state_roundtrip(enc):
    clone = SurrogateEncoder.from_state(enc.to_state())
    s = "which category is shown"
    assert np.array_equal(clone.encode(s), enc.encode(s))
    assert np.array_equal(clone._table, enc._table)


def test_feature_embedding_deterministic_unit(enc):
    v = np.array([0.5, -1.0, 2.0, 0.0, 0.1, 0.3, -0.2, 1.0])
    a = enc.encode_features(v)
    b = enc.encode_features(v)
    assert np.array_equal(a, b)
    assert abs(np.linalg.norm(a) - 1.0) <= 1e-12
