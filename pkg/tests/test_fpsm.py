import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pier import embedding as emb
from pier import fpsm
from pier.errors import ContractError


def small_table(vocab=12, n_fields=2, dim=4, seed=0):
    return emb.make_table([vocab] * n_fields, dim=dim, seed=seed)


def repr_oracle(table, features):
    """Loop-by-loop recomputation of the permutation representation."""
    features = np.asarray(features)
    n_d, n_f = features.shape
    pe = emb.position_encoding(n_d, table.dim)
    total = np.zeros(table.dim)
    for j in range(n_f):
        field_mean = np.zeros(table.dim)
        for i in range(n_d):
            field_mean += table.fields[j].data[features[i, j]] * pe[i]
        total += field_mean / n_d
    return total / n_f


def test_representation_single_item_single_field():
    table = emb.make_table([1], dim=2, seed=0)
    c = 0.37
    table.fields[0].data[0] = [c, c]
    pe = emb.embed_permutation(np.array([[0]]), table)
    h = fpsm.perm_representation(pe)
    np.testing.assert_allclose(h, [0.0, c], atol=1e-15)


def test_representation_matches_loop_oracle():
    table = small_table(dim=4)
    feats = np.array([[1, 2], [3, 4], [5, 6]])
    h = fpsm.perm_representation(emb.embed_permutation(feats, table))
    np.testing.assert_allclose(h, repr_oracle(table, feats), rtol=1e-12)


def test_simhash_collision_rate_tracks_angle():
    # Monte-Carlo oracle: for unit vectors at angle theta the expected
    # fraction of disagreeing sign bits is theta / pi.
    rng = np.random.default_rng(123)
    theta = 1.1
    u = np.zeros(8)
    u[0] = 1.0
    v = np.zeros(8)
    v[0], v[1] = np.cos(theta), np.sin(theta)
    banks = rng.standard_normal((10_000, 48, 8))
    bits_u = (banks @ u >= 0).astype(np.uint8)
    bits_v = (banks @ v >= 0).astype(np.uint8)
    mean_frac = (bits_u != bits_v).mean()
    assert abs(mean_frac - theta / np.pi) < 0.02
    # and the API computes exactly those bits
    np.testing.assert_array_equal(fpsm.simhash(u, banks[0]), bits_u[0])


def test_signature_of_negated_vector_is_complement():
    rng = np.random.default_rng(4)
    h = rng.standard_normal(6)
    bank = rng.standard_normal((32, 6))
    assert fpsm.hamming(fpsm.simhash(h, bank), fpsm.simhash(-h, bank)) == 32


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=30, deadline=None)
def test_hamming_bounds_and_symmetry(seed):
    rng = np.random.default_rng(seed)
    a = rng.integers(0, 2, size=24).astype(np.uint8)
    b = rng.integers(0, 2, size=24).astype(np.uint8)
    d = fpsm.hamming(a, b)
    assert 0 <= d <= 24
    assert d == fpsm.hamming(b, a)
    assert fpsm.hamming(a, a) == 0


def test_hash_family_seeded_and_frozen():
    f1 = fpsm.make_hash_family(3, 16, 4, seed=7)
    f2 = fpsm.make_hash_family(3, 16, 4, seed=7)
    f3 = fpsm.make_hash_family(3, 16, 4, seed=8)
    np.testing.assert_array_equal(f1.banks, f2.banks)
    assert not np.array_equal(f1.banks, f3.banks)
    assert not np.array_equal(f1.banks[0], f1.banks[1])
    assert not f1.banks.flags.writeable


def test_time_weights_geometric():
    w = fpsm.time_weights(3, gamma=0.8)
    np.testing.assert_allclose(w.values, np.array([1.0, 0.8, 0.64]) / 2.44)
    uniform = fpsm.time_weights(4, gamma=1.0)
    np.testing.assert_allclose(uniform.values, [0.25] * 4)


def test_time_weights_truncate_and_renormalize():
    w = fpsm.time_weights(5, gamma=0.8)
    short = w.for_length(2)
    np.testing.assert_allclose(short, np.array([1.0, 0.8]) / 1.8)
    with pytest.raises(ContractError):
        w.for_length(6)


def test_time_weights_validation():
    with pytest.raises(ContractError):
        fpsm.TimeWeights(values=np.array([0.2, 0.3, 0.5]))  # increasing
    with pytest.raises(ContractError):
        fpsm.TimeWeights(values=np.array([0.9, -0.1, 0.2]))
    with pytest.raises(ContractError):
        fpsm.time_weights(3, gamma=0.0)


def behaviors_for(table, rng, count, n_d=3):
    return [rng.integers(0, table.fields[0].shape[0], size=(n_d, table.n_fields)) for _ in range(count)]


def test_select_top_k_matches_scalar_route_full_sort():
    table = small_table(vocab=30, dim=4, seed=2)
    rng = np.random.default_rng(5)
    family = fpsm.make_hash_family(5, 48, 4, seed=11)
    weights = fpsm.time_weights(5, 0.8)
    behaviors = behaviors_for(table, rng, 3)
    cands = rng.integers(0, 30, size=(120, 3, 2))

    idx, dist = fpsm.select_top_k(cands, behaviors, table, family, weights, k=10)

    scalar = np.array([
        fpsm.time_aware_distance(cands[t], behaviors, table, family, weights)
        for t in range(120)
    ])
    np.testing.assert_allclose(dist, scalar, rtol=1e-12)
    oracle = np.argsort(scalar, kind="stable")[:10]
    np.testing.assert_array_equal(idx, oracle)
    diffs = np.diff(scalar[idx])
    assert (diffs >= -1e-12).all()


def test_empty_history_neutral_score_and_first_k():
    table = small_table(vocab=9, dim=4, seed=3)
    family = fpsm.make_hash_family(5, 48, 4, seed=1)
    weights = fpsm.time_weights(5, 0.8)
    cands = np.random.default_rng(0).integers(0, 9, size=(20, 3, 2))
    idx, dist = fpsm.select_top_k(cands, [], table, family, weights, k=6)
    np.testing.assert_allclose(dist, np.full(20, 24.0))
    np.testing.assert_array_equal(idx, np.arange(6))


def test_selection_reflects_embedding_update_immediately():
    table = small_table(vocab=9, dim=4, seed=4)
    rng = np.random.default_rng(9)
    family = fpsm.make_hash_family(5, 48, 4, seed=2)
    feats = rng.integers(0, 9, size=(3, 2))
    h_before = fpsm.perm_representation(emb.embed_permutation(feats, table))
    sig_before = fpsm.simhash(h_before, family.banks[0])
    table.fields[0].data[feats[0, 0]] += 10.0
    h_after = fpsm.perm_representation(emb.embed_permutation(feats, table))
    sig_after = fpsm.simhash(h_after, family.banks[0])
    assert fpsm.hamming(sig_before, sig_after) > 0


def test_distance_weights_more_recent_behaviors_heavier():
    # On average a candidate identical to the most recent behavior sits
    # closer than one identical to the oldest; cross-bank terms are noise,
    # so compare means over many independent worlds.
    diffs = []
    for trial in range(200):
        table = small_table(vocab=40, dim=6, seed=trial)
        rng = np.random.default_rng(1000 + trial)
        family = fpsm.make_hash_family(5, 48, 6, seed=trial)
        weights = fpsm.time_weights(5, 0.8)
        behaviors = behaviors_for(table, rng, 5)
        d_recent = fpsm.time_aware_distance(behaviors[0], behaviors, table, family, weights)
        d_old = fpsm.time_aware_distance(behaviors[4], behaviors, table, family, weights)
        diffs.append(d_recent - d_old)
    assert np.mean(diffs) < -1.0


def test_batched_selection_matches_per_example_route():
    table = small_table(vocab=25, dim=4, seed=8)
    rng = np.random.default_rng(3)
    family = fpsm.make_hash_family(4, 32, 4, seed=5)
    weights = fpsm.time_weights(4, 0.8)
    n_o, n_d = 5, 2
    enum_idx = np.array([(i, j) for i in range(n_o) for j in range(n_o) if i != j])
    r = 60
    items = rng.integers(0, 25, size=(r, n_o, 2))
    behaviors = [
        behaviors_for(table, rng, int(count), n_d=n_d)
        for count in rng.integers(0, 5, size=r)
    ]
    idx_b, dist_b = fpsm.select_top_k_batch(items, enum_idx, behaviors, table, family, weights, k=7, chunk=17)
    for i in range(r):
        cand_feats = items[i][enum_idx]  # (T, N_d, N_f)
        idx_s, dist_s = fpsm.select_top_k(cand_feats, behaviors[i], table, family, weights, k=7)
        np.testing.assert_allclose(dist_b[i], dist_s, rtol=0, atol=1e-12)
        np.testing.assert_array_equal(idx_b[i], idx_s)


def test_guards():
    table = small_table()
    family = fpsm.make_hash_family(2, 16, 4, seed=0)
    weights = fpsm.time_weights(2, 0.8)
    rng = np.random.default_rng(0)
    cands = rng.integers(0, 12, size=(5, 3, 2))
    with pytest.raises(ContractError):
        fpsm.select_top_k(cands, [], table, family, weights, k=6)
    with pytest.raises(ContractError):
        fpsm.select_top_k(cands, behaviors_for(table, rng, 3), table, family, weights, k=2)
    with pytest.raises(ContractError):
        fpsm.simhash(np.zeros(3), family.banks[0])
