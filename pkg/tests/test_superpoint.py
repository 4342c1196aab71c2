import numpy as np
import pytest
from hypothesis import given, strategies as st

from geosod.superpoint import (
    SuperpointPartition,
    adaptive_gamma,
    inverse_map,
    partition,
    random_colors,
    superpoint_pool,
)


def reference_partition(pos, feat, k, gamma, seed):
    """Line-by-line transcription of the greedy algorithm (quadratic queue build)."""
    n = len(pos)
    perm = np.random.default_rng(seed).permutation(n)
    sp = -np.ones(n, dtype=int)
    centers = []
    unclustered = set(range(n))
    m = p = 0
    while unclustered:
        while sp[perm[p]] != -1:
            p += 1
        i = perm[p]
        sp[i] = m
        centers.append(i)
        unclustered.discard(i)
        queue = sorted(unclustered, key=lambda j: (float(((pos[j] - pos[i]) ** 2).sum()), j))[:k]
        for j in queue:
            if np.sqrt(((feat[i] - feat[j]) ** 2).sum()) <= gamma:
                sp[j] = m
                unclustered.discard(j)
            else:
                break
        m += 1
    return sp, np.array(centers)


def check_invariants(part, feat, gamma):
    n = part.n_points
    members = part.members_of_sp
    assert np.array_equal(np.sort(np.concatenate(members)), np.arange(n))
    assert all(len(mb) > 0 for mb in members)
    for s, mb in enumerate(members):
        c = part.center_of_sp[s]
        assert c in mb
        d = np.linalg.norm(feat[mb] - feat[c], axis=1)
        assert np.all(d <= gamma)


class TestPartition:
    def test_identical_features_one_superpoint(self):
        pos = np.random.default_rng(0).normal(size=(5, 3))
        part = partition(pos, np.ones((5, 2)), k=4, gamma=0.1, seed=0)
        assert part.m == 1

    def test_gamma_zero_singletons(self):
        rng = np.random.default_rng(1)
        part = partition(rng.normal(size=(40, 3)), rng.normal(size=(40, 4)), k=8, gamma=0.0, seed=3)
        assert part.m == 40

    def test_two_triplets(self):
        pos = np.array([[0, 0, 0], [0.1, 0, 0], [0, 0.1, 0], [5, 5, 5], [5.1, 5, 5], [5, 5.1, 5]], dtype=float)
        feat = np.array([[0.0]] * 3 + [[10.0]] * 3)
        for seed in range(10):
            part = partition(pos, feat, k=5, gamma=1.0, seed=seed)
            assert part.m == 2
            assert sorted(sorted(m.tolist()) for m in part.members_of_sp) == [[0, 1, 2], [3, 4, 5]]

    def test_shape_error(self):
        with pytest.raises(ValueError):
            partition(np.zeros((4, 3)), np.zeros((3, 2)))
        with pytest.raises(ValueError):
            partition(np.zeros((4, 3)), np.zeros((4, 2)), k=0)
        with pytest.raises(ValueError):
            partition(np.zeros((4, 3)), np.zeros((4, 2)), gamma=-1.0)

    def test_single_point(self):
        part = partition(np.zeros((1, 3)), np.zeros((1, 2)))
        assert part.m == 1 and part.sp_id_of_point.tolist() == [0]

    @given(st.integers(1, 120), st.integers(1, 40), st.floats(0, 3), st.integers(0, 10_000), st.booleans())
    def test_matches_reference(self, n, k, gamma, seed, lattice):
        rng = np.random.default_rng(seed)
        if lattice:
            pos = rng.integers(0, 3, size=(n, 3)).astype(float)
            feat = rng.integers(0, 3, size=(n, 2)).astype(float)
        else:
            pos = rng.normal(size=(n, 3))
            feat = rng.normal(size=(n, 3))
        part = partition(pos, feat, k=k, gamma=gamma, seed=seed)
        sp, centers = reference_partition(pos, feat, k, gamma, seed)
        assert np.array_equal(part.sp_id_of_point, sp)
        assert np.array_equal(part.center_of_sp, centers)

    @given(st.integers(1, 512), st.integers(1, 64), st.floats(0, 4), st.integers(0, 10_000))
    def test_invariants(self, n, k, gamma, seed):
        rng = np.random.default_rng(seed)
        pos, feat = rng.normal(size=(n, 3)), rng.normal(size=(n, 4))
        part = partition(pos, feat, k=k, gamma=gamma, seed=seed)
        check_invariants(part, feat, gamma)
        again = partition(pos, feat, k=k, gamma=gamma, seed=seed)
        assert np.array_equal(part.sp_id_of_point, again.sp_id_of_point)

    @given(st.integers(2, 200), st.integers(0, 10_000))
    def test_infinite_gamma_full_queue(self, n, seed):
        rng = np.random.default_rng(seed)
        part = partition(rng.normal(size=(n, 3)), rng.normal(size=(n, 2)), k=n - 1, gamma=np.inf, seed=seed)
        assert part.m == 1

    def test_precomputed_table_same_result(self):
        from geosod.spatial import NeighborIndex

        rng = np.random.default_rng(5)
        pos, feat = rng.normal(size=(300, 3)), rng.normal(size=(300, 4))
        table = NeighborIndex(pos).neighbor_table(40)
        a = partition(pos, feat, k=16, gamma=1.5, seed=2)
        b = partition(pos, feat, k=16, gamma=1.5, seed=2, table=table)
        assert np.array_equal(a.sp_id_of_point, b.sp_id_of_point)

    def test_adaptive_gamma_is_percentile(self):
        feat = np.random.default_rng(0).normal(size=(100, 3))
        rng = np.random.default_rng(7)
        a = rng.integers(100, size=4096)
        b = (a + rng.integers(1, 100, size=4096)) % 100
        expected = np.percentile(np.linalg.norm(feat[a] - feat[b], axis=1), 10)
        assert adaptive_gamma(feat, 7) == pytest.approx(expected, rel=0, abs=0)


class TestPooling:
    def test_mean(self):
        part = SuperpointPartition.from_ids([0, 0])
        assert superpoint_pool(np.array([[1.0, 1], [3, 3]]), part).tolist() == [[2, 2]]

    def test_singletons(self):
        f = np.random.default_rng(0).normal(size=(6, 2))
        part = SuperpointPartition.from_ids([3, 1, 0, 5, 2, 4])
        pooled = superpoint_pool(f, part)
        assert np.array_equal(pooled[part.sp_id_of_point], f)
        assert np.array_equal(inverse_map(pooled, part), f)

    def test_inverse_map(self):
        part = SuperpointPartition.from_ids([0, 1, 0])
        assert inverse_map(np.array([["a"], ["b"]]), part)[:, 0].tolist() == ["a", "b", "a"]

    def test_pool_matches_accumulation_oracle(self):
        rng = np.random.default_rng(1)
        f = rng.normal(size=(64, 8))
        ids = rng.permutation(np.arange(64) % 10)
        part = SuperpointPartition.from_ids(ids)
        sums = np.zeros((10, 8))
        counts = np.zeros(10)
        for j in range(64):
            for c in range(8):
                sums[ids[j], c] += f[j, c]
            counts[ids[j]] += 1
        assert np.allclose(superpoint_pool(f, part), sums / counts[:, None], rtol=0, atol=1e-12)

    @given(st.integers(1, 80), st.integers(1, 6), st.integers(0, 10_000))
    def test_pool_inverse_identity(self, n, c, seed):
        rng = np.random.default_rng(seed)
        ids = rng.integers(0, max(1, n // 3), size=n)
        _, ids = np.unique(ids, return_inverse=True)
        part = SuperpointPartition.from_ids(ids)
        u = rng.normal(size=(part.m, c))
        assert np.allclose(superpoint_pool(inverse_map(u, part), part), u, rtol=0, atol=1e-12)
        f = rng.normal(size=(n, c))
        once = superpoint_pool(f, part)
        twice = superpoint_pool(inverse_map(once, part), part)
        assert np.allclose(once, twice, rtol=0, atol=1e-12)

    def test_shape_errors(self):
        part = SuperpointPartition.from_ids([0, 1, 1])
        with pytest.raises(ValueError):
            superpoint_pool(np.zeros((2, 2)), part)
        with pytest.raises(ValueError):
            inverse_map(np.zeros((3, 2)), part)


def test_random_colors_distinct():
    c = random_colors(5000, 3)
    assert len({tuple(r) for r in c}) == 5000
    assert np.all((c >= 0) & (c <= 1))
    assert np.array_equal(np.rint(c * 255) / 255, c)
