import numpy as np
import pytest

from madkit.distill import init_trainer
from madkit.embed import (EmbeddingMatrix, cosine_similarity_matrix,
                          embed_cells, embedding_rank, recall_at_k)
from madkit.errors import DataError, ParameterError, UsageError

from test_distill import tiny_config, toy_views


def matrix(values, ids=None, source="joint"):
    values = np.asarray(values, dtype=float)
    if ids is None:
        ids = np.arange(values.shape[0])
    return EmbeddingMatrix(values=values, cell_ids=np.asarray(ids),
                           source=source)


class TestEmbeddingMatrix:
    def test_validation(self):
        with pytest.raises(DataError):
            matrix(np.zeros((3, 2)), ids=[0, 1])
        with pytest.raises(DataError):
            matrix(np.zeros((3, 2)), ids=[0, 1, 1])
        with pytest.raises(DataError):
            matrix(np.zeros(3))
        assert matrix(np.zeros((3, 2))).n_cells == 3


class TestCosine:
    def test_matches_manual(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(4, 3))
        b = rng.normal(size=(5, 3))
        sims = cosine_similarity_matrix(a, b)
        for i in range(4):
            for j in range(5):
                expect = a[i] @ b[j] / (np.linalg.norm(a[i])
                                        * np.linalg.norm(b[j]))
                assert sims[i, j] == pytest.approx(expect, abs=1e-12)

    def test_zero_rows_are_zero_similarity(self):
        a = np.array([[0.0, 0.0], [1.0, 0.0]])
        b = np.array([[0.0, 1.0], [0.0, 0.0]])
        sims = cosine_similarity_matrix(a, b)
        np.testing.assert_array_equal(sims[0], [0.0, 0.0])
        assert sims[1, 1] == 0.0

    def test_self_similarity_is_one(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(6, 4))
        np.testing.assert_allclose(np.diag(cosine_similarity_matrix(a, a)),
                                   1.0, atol=1e-12)


class TestRecall:
    def brute_force(self, queries, index, k):
        hits = 0
        for qi in range(queries.n_cells):
            sims = []
            q = queries.values[qi]
            qn = np.linalg.norm(q)
            for ii in range(index.n_cells):
                r = index.values[ii]
                rn = np.linalg.norm(r)
                s = 0.0 if qn == 0 or rn == 0 else float(q @ r / (qn * rn))
                sims.append((-s, int(index.cell_ids[ii])))
            sims.sort()
            top = {cid for _, cid in sims[:k]}
            hits += int(queries.cell_ids[qi]) in top
        return hits / queries.n_cells

    def test_matches_brute_force(self):
        rng = np.random.default_rng(2)
        base = rng.normal(size=(20, 6))
        queries = matrix(base + 0.3 * rng.normal(size=(20, 6)),
                         source="morphology")
        index = matrix(base + 0.3 * rng.normal(size=(20, 6)),
                       source="environment")
        got = recall_at_k(queries, index, ks=(1, 3, 10))
        for k in (1, 3, 10):
            assert got[k] == pytest.approx(self.brute_force(queries, index, k))

    def test_monotone_and_complete(self):
        rng = np.random.default_rng(3)
        queries = matrix(rng.normal(size=(15, 4)))
        index = matrix(rng.normal(size=(15, 4)))
        got = recall_at_k(queries, index, ks=(1, 5, 15))
        assert got[1] <= got[5] <= got[15]
        assert got[15] == 1.0

    def test_perfect_alignment(self):
        rng = np.random.default_rng(4)
        values = rng.normal(size=(10, 5))
        got = recall_at_k(matrix(values), matrix(2.5 * values), ks=(1,))
        assert got[1] == 1.0

    def test_tie_prefers_lower_id(self):
        # all index rows identical: every query ties everywhere, so only
        # the cell with the smallest id scores at k=1
        values = np.ones((4, 3))
        ids = np.array([7, 3, 9, 5])
        got = recall_at_k(matrix(values, ids), matrix(values, ids), ks=(1, 4))
        assert got[1] == 0.25
        assert got[4] == 1.0

    def test_shuffled_index_rows_equivalent(self):
        rng = np.random.default_rng(5)
        values = rng.normal(size=(12, 4))
        other = rng.normal(size=(12, 4))
        perm = rng.permutation(12)
        a = recall_at_k(matrix(values), matrix(other), ks=(1, 3))
        b = recall_at_k(matrix(values), matrix(other[perm], ids=perm),
                        ks=(1, 3))
        assert a == b

    def test_id_mismatch_rejected(self):
        with pytest.raises(DataError):
            recall_at_k(matrix(np.ones((3, 2)), ids=[0, 1, 2]),
                        matrix(np.ones((3, 2)), ids=[0, 1, 3]))
        with pytest.raises(DataError):
            recall_at_k(matrix(np.ones((3, 2))), matrix(np.ones((2, 2))))

    def test_bad_k_rejected(self):
        q = matrix(np.ones((3, 2)))
        with pytest.raises(ParameterError):
            recall_at_k(q, q, ks=(0,))
        with pytest.raises(ParameterError):
            recall_at_k(q, q, ks=(4,))


class TestEmbeddingRank:
    def test_planted_rank(self):
        rng = np.random.default_rng(6)
        for r in (1, 3, 7):
            values = rng.normal(size=(40, r)) @ rng.normal(size=(r, 12))
            assert embedding_rank(values) == r

    def test_tiny_noise_ignored(self):
        rng = np.random.default_rng(7)
        values = rng.normal(size=(40, 2)) @ rng.normal(size=(2, 12))
        values += 1e-10 * rng.normal(size=values.shape)
        assert embedding_rank(values) == 2

    def test_constant_matrix_rank_zero(self):
        assert embedding_rank(np.full((10, 4), 3.7)) == 0

    def test_full_rank(self):
        rng = np.random.default_rng(8)
        assert embedding_rank(rng.normal(size=(50, 8))) == 8

    def test_validation(self):
        with pytest.raises(DataError):
            embedding_rank(np.zeros((1, 4)))
        with pytest.raises(DataError):
            embedding_rank(np.zeros(4))


@pytest.fixture(scope="module")
def state():
    config = tiny_config()
    return init_trainer(config, {"morphology": 24, "environment": 64})


@pytest.fixture(scope="module")
def cells():
    return toy_views(n=9, seed=11)


class TestEmbedCells:
    def test_joint_concatenates_views(self, state, cells):
        joint = embed_cells(state, cells)
        morph = embed_cells(state, cells, view="morphology")
        env = embed_cells(state, cells, view="environment")
        assert joint.values.shape == (9, 32)
        assert morph.values.shape == (9, 16)
        assert joint.source == "joint"
        assert morph.source == "morphology"
        np.testing.assert_array_equal(joint.values[:, :16], morph.values)
        np.testing.assert_array_equal(joint.values[:, 16:], env.values)
        np.testing.assert_array_equal(joint.cell_ids, cells.cell_ids)

    def test_batching_invariant(self, state, cells):
        a = embed_cells(state, cells, batch_size=4)
        b = embed_cells(state, cells, batch_size=200)
        np.testing.assert_array_equal(a.values, b.values)

    def test_teacher_equals_student_at_init(self, state, cells):
        t = embed_cells(state, cells, network="teacher")
        s = embed_cells(state, cells, network="student")
        np.testing.assert_array_equal(t.values, s.values)

    def test_bad_arguments(self, state, cells):
        with pytest.raises(ParameterError):
            embed_cells(state, cells, network="oracle")
        with pytest.raises(UsageError):
            embed_cells(state, cells, view="texture")
