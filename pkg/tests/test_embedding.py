import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pier import embedding as emb
from pier import numerics as nm
from pier.errors import ContractError, FeatureLookupError


def pe_oracle(n, d):
    """Entry-by-entry recomputation straight from the definition."""
    out = np.zeros((n, d))
    for i in range(n):
        for col in range(d):
            pair = (col // 2) * 2
            angle = i / (10000.0 ** (pair / d))
            out[i, col] = np.sin(angle) if col % 2 == 0 else np.cos(angle)
    return out


def test_position_row_zero_alternates_zero_one():
    pe = emb.position_encoding(3, 8)
    np.testing.assert_allclose(pe[0], [0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0])


def test_position_encoding_matches_oracle():
    np.testing.assert_allclose(emb.position_encoding(7, 10), pe_oracle(7, 10), rtol=1e-12)


def test_position_encoding_cached_identity():
    a = emb.position_encoding(5, 8)
    b = emb.position_encoding(5, 8)
    assert a is b
    assert not a.flags.writeable


def test_position_encoding_rejects_odd_dim():
    with pytest.raises(ContractError):
        emb.position_encoding(4, 7)


@given(st.integers(1, 12), st.sampled_from([2, 4, 6, 8, 16]))
@settings(max_examples=40, deadline=None)
def test_position_encoding_bounded(n, d):
    pe = emb.position_encoding(n, d)
    assert (np.abs(pe) <= 1.0).all()


def test_lookup_returns_table_row():
    table = emb.make_table([5, 3], dim=4, seed=0)
    feats = np.array([[2, 1], [4, 0]])
    pe = emb.embed_permutation(feats, table)
    np.testing.assert_array_equal(pe.slab(0).data[0], table.fields[0].data[2])
    np.testing.assert_array_equal(pe.slab(1).data[1], table.fields[1].data[0])
    arr = pe.as_array()
    assert arr.shape == (2, 2, 4)
    np.testing.assert_array_equal(arr[1, 0], table.fields[0].data[4])


def test_out_of_vocab_names_field_and_id():
    table = emb.make_table([5, 3], dim=4, seed=0)
    with pytest.raises(FeatureLookupError) as err:
        emb.embed_permutation(np.array([[1, 3]]), table)
    assert "field 1" in str(err.value) and "3" in str(err.value)
    with pytest.raises(FeatureLookupError):
        emb.embed_permutation(np.array([[-1, 0]]), table)


def test_init_seeded_and_bounded():
    t1 = emb.make_table([50], dim=8, seed=9)
    t2 = emb.make_table([50], dim=8, seed=9)
    t3 = emb.make_table([50], dim=8, seed=10)
    np.testing.assert_array_equal(t1.fields[0].data, t2.fields[0].data)
    assert not np.array_equal(t1.fields[0].data, t3.fields[0].data)
    bound = 1.0 / np.sqrt(8)
    assert (np.abs(t1.fields[0].data) <= bound).all()


def test_table_update_visible_on_next_lookup():
    table = emb.make_table([4, 4], dim=2, seed=1)
    feats = np.array([[0, 1]])
    before = emb.embed_permutation(feats, table).slab(0).data.copy()
    table.fields[0].data[0] += 1.0
    after = emb.embed_permutation(feats, table).slab(0).data
    np.testing.assert_allclose(after, before + 1.0)


def test_embedding_gradient_flows_to_rows():
    table = emb.make_table([4], dim=2, seed=2)
    pe = emb.embed_permutation(np.array([[1], [1], [3]]), table)
    loss = nm.sum_all(pe.slab(0))
    grads = nm.backward(loss, [table.fields[0]])
    expected = np.zeros((4, 2))
    expected[1] = 2.0
    expected[3] = 1.0
    np.testing.assert_allclose(grads[table.fields[0]].data, expected)


def test_item_row_concatenates_fields():
    table = emb.make_table([3, 3], dim=2, seed=3)
    pe = emb.embed_permutation(np.array([[0, 2], [1, 1]]), table)
    want = np.concatenate([table.fields[0].data[1], table.fields[1].data[1]])
    np.testing.assert_array_equal(pe.item_row(1), want)
