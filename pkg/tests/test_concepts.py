from __future__ import annotations

import numpy as np
import pytest

from src.concepts import (
    ClientPreference,
    ConceptBank,
    StreamStats,
    accumulate_minibatch,
    client_preference,
    em_fit,
    em_m_step,
    estimated_preference,
    finalize_upsilon,
    gmm_log_likelihood,
    init_bank,
    init_bank_kmeanspp,
    load_bank,
    merge_concepts,
    nearest_concept,
    relevance,
    relevance_op,
    uniform_upsilon,
)
from src.errors import ConceptError
from src.tensor import Tensor, backward


def _clustered(seed: int, clients: int = 3, per_client: int = 40, dim: int = 2):
    rng = np.random.default_rng(seed)
    centers = np.zeros((3, max(dim, 2)))
    centers[:, :2] = [[-3.0, 0.0], [3.0, 0.0], [0.0, 4.0]]
    centers = centers[:, :dim]
    data = []
    for k in range(clients):
        weights = rng.dirichlet(np.ones(len(centers)))
        picks = rng.choice(len(centers), size=per_client, p=weights)
        data.append(centers[picks] + rng.standard_normal((per_client, dim)))
    return data


class TestConceptBank:
    def test_concepts_are_read_only_float64(self) -> None:
        bank = ConceptBank(np.ones((2, 3), dtype=np.float32))
        assert bank.concepts.dtype == np.float64
        assert (bank.num_concepts, bank.dim) == (2, 3)
        with pytest.raises(ValueError):
            bank.concepts[0, 0] = 5.0

    @pytest.mark.parametrize("concepts, iota", [
        (np.ones(3), 0.1),
        (np.zeros((0, 2)), 0.1),
        (np.array([[np.nan, 1.0]]), 0.1),
        (np.ones((2, 2)), 0.0),
        (np.ones((2, 2)), -1.0),
    ])
    def test_invalid_banks_rejected(self, concepts, iota) -> None:
        with pytest.raises(ConceptError):
            ConceptBank(concepts, iota=iota)

    def test_with_concepts_keeps_iota(self) -> None:
        bank = init_bank(3, 2, iota=0.25, seed=0)
        moved = bank.with_concepts(np.zeros((3, 2)))
        assert moved.iota == 0.25
        assert not moved.concepts.any()

    def test_init_bank_is_seeded(self) -> None:
        np.testing.assert_array_equal(init_bank(4, 3, seed=5).concepts, init_bank(4, 3, seed=5).concepts)

    def test_kmeanspp_picks_distinct_points(self) -> None:
        emb = np.concatenate(_clustered(0))
        bank = init_bank_kmeanspp(emb, 3, seed=0)
        assert bank.concepts.shape == (3, 2)
        assert len({tuple(row) for row in bank.concepts}) == 3

    def test_kmeanspp_needs_enough_points(self) -> None:
        with pytest.raises(ConceptError, match="at least"):
            init_bank_kmeanspp(np.zeros((2, 2)), 3)

    def test_load_bank_from_npy_and_csv(self, tmp_path) -> None:
        values = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.save(tmp_path / "c.npy", values)
        (tmp_path / "c.csv").write_text("1.0,2.0\n3.0,4.0\n", encoding="utf-8")
        np.testing.assert_array_equal(load_bank(tmp_path / "c.npy").concepts, values)
        np.testing.assert_array_equal(load_bank(tmp_path / "c.csv", iota=0.3).concepts, values)

    def test_load_bank_missing_file(self, tmp_path) -> None:
        with pytest.raises(ConceptError, match="not found"):
            load_bank(tmp_path / "missing.npy")


class TestRelevance:
    def test_rows_are_distributions_with_uniform_weights(self) -> None:
        bank = ConceptBank(np.array([[0.0, 0.0], [1.0, 0.0]]), iota=1.0)
        s = relevance(np.array([[0.0, 0.0], [0.5, 0.0]]), bank, uniform_upsilon(2))
        np.testing.assert_allclose(s.sum(axis=1), 1.0)
        expected = np.exp(0.0) / (np.exp(0.0) + np.exp(-1.0))
        assert s[0, 0] == pytest.approx(expected)
        np.testing.assert_allclose(s[1], [0.5, 0.5])

    def test_zero_weight_concept_gets_no_mass(self) -> None:
        bank = init_bank(3, 2, seed=1)
        s = relevance(np.random.default_rng(0).standard_normal((5, 2)), bank, np.array([0.0, 0.4, 0.6]))
        assert not s[:, 0].any()

    def test_matches_graph_version(self) -> None:
        bank = init_bank(4, 3, iota=0.2, seed=2, scale=1.0)
        z = np.random.default_rng(3).standard_normal((6, 3))
        upsilon = np.array([0.1, 0.2, 0.3, 0.4])
        graph = relevance_op(Tensor(z), Tensor(bank.concepts), upsilon, bank.iota)
        np.testing.assert_allclose(graph.data, relevance(z, bank, upsilon))

    def test_graph_version_is_differentiable_in_concepts(self) -> None:
        bank = init_bank(2, 2, iota=0.5, seed=0, scale=1.0)
        z = Tensor(np.array([[0.3, -0.2]]))
        concepts = Tensor(bank.concepts, requires_grad=True)
        first_column = Tensor(np.array([[1.0, 0.0]]))
        s = relevance_op(z, concepts, uniform_upsilon(2), bank.iota)
        (grad,) = backward((s * first_column).sum(), [concepts])
        assert grad.shape == (2, 2)
        assert np.abs(grad).sum() > 0

    @pytest.mark.parametrize("upsilon, message", [
        (np.array([0.5, 0.5, 0.0]), "shape"),
        (np.array([1.5, -0.5]), "non-negative"),
        (np.array([0.0, 0.0]), "all zero"),
        (np.array([0.3, 0.3]), "sums to"),
    ])
    def test_invalid_upsilon(self, upsilon, message) -> None:
        bank = init_bank(2, 2, seed=0)
        with pytest.raises(ConceptError, match=message):
            relevance(np.zeros((1, 2)), bank, upsilon)

    def test_embedding_width_checked(self) -> None:
        with pytest.raises(ConceptError, match="expected"):
            relevance(np.zeros((1, 3)), init_bank(2, 2, seed=0), uniform_upsilon(2))

    def test_nearest_concept_breaks_ties_low(self) -> None:
        bank = ConceptBank(np.array([[-1.0, 0.0], [1.0, 0.0], [5.0, 0.0]]))
        assert nearest_concept(np.array([[0.0, 0.0], [4.0, 0.0]]), bank).tolist() == [0, 2]


class TestPreferences:
    def test_client_preference_is_weighted_concepts(self) -> None:
        bank = ConceptBank(np.array([[1.0, 0.0], [0.0, 2.0]]))
        np.testing.assert_allclose(client_preference(np.array([0.25, 0.75]), bank), [0.25, 1.5])
        np.testing.assert_allclose(ClientPreference(np.array([0.25, 0.75])).preference(bank), [0.25, 1.5])

    def test_uniform_preference(self) -> None:
        pref = ClientPreference.uniform(4)
        assert pref.upsilon.tolist() == [0.25] * 4

    def test_estimated_preference_rows(self) -> None:
        bank = ConceptBank(np.array([[1.0, 0.0], [0.0, 1.0]]))
        est = estimated_preference(np.array([[1.0, 0.0], [0.5, 0.5]]), bank)
        np.testing.assert_allclose(est, [[1.0, 0.0], [0.5, 0.5]])

    def test_client_preference_length_checked(self) -> None:
        with pytest.raises(ConceptError):
            client_preference(np.ones(3) / 3, init_bank(2, 2, seed=0))


class TestEm:
    def test_log_likelihood_of_single_standard_normal(self) -> None:
        bank = ConceptBank(np.zeros((1, 2)), iota=0.5)
        value = gmm_log_likelihood([np.zeros((1, 2))], bank, [np.ones(1)])
        assert value == pytest.approx(-np.log(2 * np.pi))

    def test_m_step_moves_concepts_to_weighted_means(self) -> None:
        bank = ConceptBank(np.zeros((2, 1)))
        resp = [np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([[1.0, 0.0]])]
        emb = [np.array([[1.0], [5.0]]), np.array([[3.0]])]
        upsilons, moved = em_m_step(resp, emb, bank)
        np.testing.assert_allclose(moved.concepts, [[2.0], [5.0]])
        np.testing.assert_allclose(upsilons[0], [0.5, 0.5])
        np.testing.assert_allclose(upsilons[1], [1.0, 0.0])

    def test_m_step_keeps_massless_concept(self, caplog) -> None:
        bank = ConceptBank(np.array([[0.0], [9.0]]))
        _, moved = em_m_step([np.array([[1.0, 0.0]])], [np.array([[2.0]])], bank)
        assert moved.concepts[:, 0].tolist() == [2.0, 9.0]
        assert "no responsibility mass" in caplog.text

    def test_m_step_rejects_non_stochastic_rows(self) -> None:
        with pytest.raises(ConceptError, match="row-stochastic"):
            em_m_step([np.array([[0.5, 0.2]])], [np.zeros((1, 1))], ConceptBank(np.zeros((2, 1))))

    @pytest.mark.parametrize("dim", [2, 5])
    @pytest.mark.parametrize("num_concepts", [2, 3])
    @pytest.mark.parametrize("seed", range(13))
    def test_log_likelihood_never_decreases(self, seed: int, num_concepts: int, dim: int) -> None:
        data = _clustered(seed, clients=3, dim=dim)
        bank = init_bank(num_concepts, dim, iota=0.5, seed=seed, scale=1.0)
        _, upsilons, trace = em_fit(data, bank, iterations=15)
        assert np.all(np.diff(trace) >= -1e-9)
        for upsilon in upsilons:
            assert upsilon.sum() == pytest.approx(1.0)

    def test_em_fit_recovers_separated_centres(self) -> None:
        data = _clustered(11, clients=4, per_client=120)
        bank = ConceptBank(np.array([[-1.0, -1.0], [1.0, -1.0], [0.0, 1.0]]), iota=0.5)
        fitted, _, _ = em_fit(data, bank, iterations=40)
        expected = np.array([[-3.0, 0.0], [3.0, 0.0], [0.0, 4.0]])
        for centre in expected:
            assert np.min(np.linalg.norm(fitted.concepts - centre, axis=1)) < 0.6


class TestStreaming:
    def test_initial_stats_centre_on_concepts(self) -> None:
        bank = init_bank(4, 2, seed=0)
        stats = StreamStats.initial(bank, kappa=0.3)
        np.testing.assert_allclose(stats.s_sum, 0.25)
        np.testing.assert_allclose(merge_concepts([stats], bank).concepts, bank.concepts)
        np.testing.assert_allclose(finalize_upsilon(stats), 0.25)

    def test_kappa_zero_single_batch_matches_m_step(self) -> None:
        rng = np.random.default_rng(4)
        bank = init_bank(3, 2, iota=0.5, seed=4, scale=1.0)
        emb = [rng.standard_normal((8, 2)), rng.standard_normal((5, 2))]
        resp = [relevance(z, bank, uniform_upsilon(3)) for z in emb]

        stats = [
            accumulate_minibatch(StreamStats.initial(bank, kappa=0.0), s, z)
            for s, z in zip(resp, emb)
        ]
        upsilons, expected = em_m_step(resp, emb, bank)
        np.testing.assert_allclose(merge_concepts(stats, bank).concepts, expected.concepts)
        for got, want in zip(map(finalize_upsilon, stats), upsilons):
            np.testing.assert_allclose(got, want)

    def test_kappa_one_freezes_statistics(self) -> None:
        bank = init_bank(2, 2, seed=0)
        stats = StreamStats.initial(bank, kappa=1.0)
        updated = accumulate_minibatch(stats, np.array([[1.0, 0.0]]), np.array([[5.0, 5.0]]))
        np.testing.assert_array_equal(updated.s_sum, stats.s_sum)
        np.testing.assert_array_equal(updated.c_sum, stats.c_sum)
        assert updated.count == stats.count
        assert updated.batches == 1

    def test_moving_average_formula(self) -> None:
        bank = ConceptBank(np.zeros((2, 1)))
        stats = StreamStats(s_sum=np.array([1.0, 1.0]), c_sum=np.zeros((2, 1)), count=2.0, kappa=0.25)
        updated = accumulate_minibatch(stats, np.array([[1.0, 0.0], [1.0, 0.0]]), np.array([[2.0], [4.0]]))
        np.testing.assert_allclose(updated.s_sum, [0.25 + 1.5, 0.25])
        np.testing.assert_allclose(updated.c_sum, [[4.5], [0.0]])
        assert updated.count == pytest.approx(0.5 + 1.5)
        assert merge_concepts([updated], bank).concepts[0, 0] == pytest.approx(4.5 / 1.75)

    def test_merge_sums_in_given_order(self) -> None:
        bank = init_bank(3, 2, seed=0)
        rng = np.random.default_rng(0)
        stats = [
            StreamStats(s_sum=rng.uniform(0.1, 1.0, 3), c_sum=rng.standard_normal((3, 2)), count=1.0)
            for _ in range(4)
        ]
        mass = sum(s.s_sum for s in stats)
        weighted = sum(s.c_sum for s in stats)
        np.testing.assert_allclose(merge_concepts(stats, bank).concepts, weighted / mass[:, None])

    def test_empty_inputs_rejected(self) -> None:
        bank = init_bank(2, 2, seed=0)
        with pytest.raises(ConceptError):
            merge_concepts([], bank)
        with pytest.raises(ConceptError, match="empty batch"):
            accumulate_minibatch(StreamStats.initial(bank), np.zeros((0, 2)), np.zeros((0, 2)))

    def test_kappa_range(self) -> None:
        with pytest.raises(ConceptError, match="kappa"):
            StreamStats.initial(init_bank(2, 2, seed=0), kappa=1.5)

    def test_nbytes(self) -> None:
        stats = StreamStats.initial(init_bank(3, 4, seed=0))
        assert stats.nbytes == 3 * 8 + 12 * 8 + 8
