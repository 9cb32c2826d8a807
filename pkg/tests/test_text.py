import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from msd.errors import DimensionMismatch, EmptyText
from msd.prompts import all_prompts
from msd.text import COSINE_DELTA, TextEncoder, cosine_similarity, embed


def test_delta_value():
    assert COSINE_DELTA == 1e-6


def test_embed_deterministic_and_unit():
    a, b = embed("a person is walking neutrally"), embed("a person is walking neutrally")
    assert a.values.tobytes() == b.values.tobytes()
    assert a.values.shape == (64,)
    assert abs(np.linalg.norm(a.values) - 1.0) < 1e-12
    assert abs(cosine_similarity(a.values, a.values) - 1.0) < 1e-12


def test_shared_content_is_closer():
    base = embed("a person is walking neutrally").values
    same = embed("a person is walking in depression").values
    other = embed("a person is kicking in depression").values
    assert cosine_similarity(base, same) > cosine_similarity(base, other)


def test_case_and_whitespace_insensitive():
    assert np.array_equal(embed("A  Person is WALKING neutrally").values, embed("a person is walking neutrally").values)


@pytest.mark.parametrize("text", ["", "   "])
def test_empty_text(text):
    with pytest.raises(EmptyText):
        embed(text)


def test_cosine_cases():
    e = np.eye(3)
    assert cosine_similarity(e[0], e[0]) == 1.0
    assert cosine_similarity(e[0], e[1]) == 0.0
    assert cosine_similarity(np.zeros(3), e[2]) == 0.0
    with pytest.raises(DimensionMismatch):
        cosine_similarity(np.zeros(3), np.zeros(4))


@given(st.lists(st.floats(-5, 5), min_size=4, max_size=4), st.lists(st.floats(-5, 5), min_size=4, max_size=4),
       st.floats(0.1, 100.0))
def test_cosine_symmetric_and_scale_invariant(a, b, scale):
    a, b = np.array(a), np.array(b)
    if np.linalg.norm(a) * np.linalg.norm(b) < 1e-2:
        return
    assert abs(cosine_similarity(a, b) - cosine_similarity(b, a)) < 1e-12
    assert abs(cosine_similarity(scale * a, b) - cosine_similarity(a, b)) < 1e-9
    assert -1.0 - 1e-12 <= cosine_similarity(a, b) <= 1.0 + 1e-12


def test_encoder_dimension_and_batch():
    enc = TextEncoder(dim=16)
    vals = enc.batch(all_prompts()[:3])
    assert np.asarray(vals).shape == (3, 16)
