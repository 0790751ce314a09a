from __future__ import annotations

import numpy as np
import pytest

from src.concepts import ClientPreference
from src.errors import ConfigError, ProtocolError, RoundAborted
from src.federation import (
    Channel,
    ClientState,
    FederationConfig,
    HygieneGuard,
    ModelBroadcast,
    ModelUpdate,
    RoundContext,
    ServerState,
    StrategyConfig,
    aggregate_arrays,
    aggregate_params,
    apply_dropout,
    client_rng,
    cohort_weights,
    evaluate_global,
    require_results,
    resolve_threads,
    round_rng,
    run_clients,
    sample_clients,
    train_classifier,
)
from src.concepts import init_bank
from src.model import ArchConfig, init_model
from src.tensor import ParamSet


ARCH = ArchConfig(input_dim=2, hidden_dims=(8,), num_classes=2, embed_dim=2)


def _blobs(seed: int, n: int = 60) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    x = np.where(y[:, None] == 0, -2.0, 2.0) + rng.standard_normal((n, 2)) * 0.5
    return x.astype(np.float32), y


def _client(k: int, role: str = "train", group: int = 0) -> ClientState:
    x, y = _blobs(k)
    return ClientState(k, group, role, x[:40], y[:40], x[40:], y[40:], ClientPreference.uniform(3))


def test_lr_schedule_decays_every_ten_rounds() -> None:
    cfg = FederationConfig()
    assert cfg.lr_at(0) == pytest.approx(0.005)
    assert cfg.lr_at(9) == pytest.approx(0.005)
    assert cfg.lr_at(10) == pytest.approx(0.004)
    assert cfg.lr_at(25) == pytest.approx(0.005 * 0.8 ** 2)


@pytest.mark.parametrize("kwargs, key", [
    ({"name": "scaffold"}, "strategy.name"),
    ({"mu": -1.0}, "strategy.mu"),
    ({"finetune_epochs": -1}, "strategy.finetune_epochs"),
])
def test_strategy_config_validation(kwargs, key) -> None:
    with pytest.raises(ConfigError) as info:
        StrategyConfig(**kwargs)
    assert info.value.key == key


class TestSampling:
    def test_sorted_unique_subset(self) -> None:
        population = [0, 2, 4, 6, 8, 10]
        cohort = sample_clients(population, 4, round_rng(0, 3))
        assert cohort == sorted(cohort)
        assert len(set(cohort)) == 4
        assert set(cohort) <= set(population)

    def test_deterministic_per_round(self) -> None:
        population = list(range(20))
        assert sample_clients(population, 5, round_rng(1, 2)) == sample_clients(population, 5, round_rng(1, 2))

    def test_rounds_differ(self) -> None:
        population = list(range(50))
        cohorts = {tuple(sample_clients(population, 5, round_rng(1, r))) for r in range(10)}
        assert len(cohorts) > 1

    def test_cohort_larger_than_population(self) -> None:
        with pytest.raises(ConfigError, match="exceeds"):
            sample_clients([0, 1], 3, round_rng(0, 0))

    def test_client_streams_are_independent(self) -> None:
        a = client_rng(0, 1, 2).random(3)
        b = client_rng(0, 1, 3).random(3)
        assert not np.allclose(a, b)
        np.testing.assert_array_equal(a, client_rng(0, 1, 2).random(3))

    def test_dropout(self) -> None:
        assert apply_dropout([1, 2, 3], 0.0, round_rng(0, 0)) == [1, 2, 3]
        assert apply_dropout([1, 2, 3], 0.999999, round_rng(0, 0)) == []


class TestAggregation:
    def test_matches_explicit_weighted_sum(self) -> None:
        rng = np.random.default_rng(0)
        sets = [ParamSet({"w": rng.standard_normal((3, 2)).astype(np.float32), "b": rng.standard_normal(2)})
                for _ in range(3)]
        weights = cohort_weights({0: 10, 1: 30, 2: 60})
        merged = aggregate_params([(p, weights[k]) for k, p in enumerate(sets)])
        expected = sum(weights[k] * sets[k]["w"].data.astype(np.float64) for k in range(3))
        np.testing.assert_allclose(merged["w"].data, expected, rtol=1e-6)
        assert merged["w"].dtype == np.float32
        assert merged["b"].dtype == np.float64

    def test_identical_updates_are_a_fixed_point(self) -> None:
        params = init_model(ARCH, seed=0)
        merged = aggregate_params([(params, 0.25), (params, 0.75)])
        assert merged.allclose(params, atol=1e-7)

    def test_weights_must_sum_to_one(self) -> None:
        params = ParamSet({"w": np.ones(2)})
        with pytest.raises(ProtocolError, match="sum to"):
            aggregate_params([(params, 0.5), (params, 0.4)])

    def test_cohort_weights_proportional_to_samples(self) -> None:
        assert cohort_weights({3: 1, 1: 3}) == {1: 0.75, 3: 0.25}

    def test_cohort_without_samples(self) -> None:
        with pytest.raises(ProtocolError):
            cohort_weights({0: 0})

    def test_aggregate_arrays_shape_mismatch(self) -> None:
        with pytest.raises(ProtocolError, match="shape"):
            aggregate_arrays([(np.zeros(2), 0.5), (np.zeros(3), 0.5)])

    def test_mismatched_keys_rejected(self) -> None:
        with pytest.raises(KeyError):
            aggregate_params([(ParamSet({"w": np.ones(1)}), 0.5), (ParamSet({"v": np.ones(1)}), 0.5)])


class TestChannel:
    def test_counts_bytes_and_resets(self) -> None:
        channel = Channel()
        params = ParamSet({"w": np.zeros(4)})
        channel.transfer(ModelBroadcast(0, params))
        channel.transfer(ModelUpdate(1, params, 10))
        assert channel.messages == 2
        assert channel.reset() == 32 + 32 + 8
        assert channel.bytes_sent == 0

    def test_rejects_raw_payloads(self) -> None:
        with pytest.raises(ProtocolError, match="not allowed"):
            Channel().transfer({"train_x": np.zeros(3)})


class TestHygiene:
    def test_heldout_clients_cannot_train(self) -> None:
        guard = HygieneGuard([4, 5])
        guard.admit([0, 1])
        with pytest.raises(ProtocolError, match=r"\[5\]"):
            guard.admit([1, 5])
        assert guard.trained == {0, 1}

    def test_no_finetune_for_fedvc(self) -> None:
        guard = HygieneGuard([])
        guard.check_finetune(StrategyConfig("fedavg_ft"))
        with pytest.raises(ProtocolError, match="without fine-tuning"):
            guard.check_finetune(StrategyConfig("fedvc_em"))


class TestRunClients:
    def test_results_ordered_by_client_id(self) -> None:
        assert list(run_clients(lambda k: k * 10, [5, 1, 3], threads=3)) == [1, 3, 5]

    def test_failing_client_is_dropped(self, caplog) -> None:
        def work(k: int) -> int:
            if k == 2:
                raise ValueError("diverged")
            return k

        assert run_clients(work, [1, 2, 3]) == {1: 1, 3: 3}
        assert "Client 2 failed" in caplog.text

    def test_protocol_errors_propagate(self) -> None:
        def work(k: int) -> int:
            raise ProtocolError("leak")

        with pytest.raises(ProtocolError):
            run_clients(work, [0])

    def test_all_failed_aborts_round(self) -> None:
        with pytest.raises(RoundAborted, match="round 4"):
            require_results({}, [0, 1], 4)


def test_resolve_threads(monkeypatch) -> None:
    monkeypatch.delenv("FEDVC_THREADS", raising=False)
    assert resolve_threads() == 1
    monkeypatch.setenv("FEDVC_THREADS", "4")
    assert resolve_threads() == 4
    monkeypatch.setenv("FEDVC_THREADS", "zero")
    with pytest.raises(ConfigError):
        resolve_threads()


class TestLocalTraining:
    def test_loss_decreases_on_separable_data(self) -> None:
        x, y = _blobs(0, n=200)
        params = init_model(ARCH, seed=0)
        _, first = train_classifier(params, ARCH, x, y, epochs=1, batch_size=10, lr=0.1, rng=client_rng(0, 0, 0))
        _, later = train_classifier(params, ARCH, x, y, epochs=10, batch_size=10, lr=0.1, rng=client_rng(0, 0, 0))
        assert later < first

    def test_zero_mu_proximal_equals_plain_sgd(self) -> None:
        x, y = _blobs(1)
        params = init_model(ARCH, seed=1)
        plain, _ = train_classifier(params, ARCH, x, y, epochs=2, batch_size=8, lr=0.05, rng=client_rng(0, 0, 1))
        prox, _ = train_classifier(params, ARCH, x, y, epochs=2, batch_size=8, lr=0.05, rng=client_rng(0, 0, 1),
                                   anchor=params, mu=0.0)
        assert prox.allclose(plain)

    def test_proximal_pull_keeps_weights_closer(self) -> None:
        x, y = _blobs(2)
        params = init_model(ARCH, seed=2)
        free, _ = train_classifier(params, ARCH, x, y, epochs=5, batch_size=8, lr=0.1, rng=client_rng(0, 0, 2))
        pulled, _ = train_classifier(params, ARCH, x, y, epochs=5, batch_size=8, lr=0.1, rng=client_rng(0, 0, 2),
                                     anchor=params, mu=5.0)

        def distance(p: ParamSet) -> float:
            return sum(float(np.sum((p[k].data - params[k].data) ** 2)) for k in params)

        assert distance(pulled) < distance(free)

    def test_zero_epochs_returns_input(self) -> None:
        x, y = _blobs(3)
        params = init_model(ARCH, seed=3)
        out, loss = train_classifier(params, ARCH, x, y, epochs=0, batch_size=8, lr=0.1, rng=client_rng(0, 0, 3))
        assert out is params
        assert np.isnan(loss)

    def test_empty_client_rejected(self) -> None:
        with pytest.raises(ProtocolError):
            train_classifier(init_model(ARCH, seed=0), ARCH, np.zeros((0, 2)), np.zeros(0, dtype=int),
                             epochs=1, batch_size=4, lr=0.1, rng=client_rng(0, 0, 0))


class TestEvaluateGlobal:
    def _setup(self, strategy: str) -> tuple[ServerState, list[ClientState], RoundContext]:
        clients = [_client(0), _client(1), _client(2, role="test", group=1)]
        server = ServerState(init_model(ARCH, seed=0), init_bank(3, 2, seed=0), ARCH, strategy, seed=0, round=3)
        ctx = RoundContext(FederationConfig(eval_splits=("local_train", "local_test")),
                           StrategyConfig(strategy), HygieneGuard([2]))
        return server, clients, ctx

    def test_one_record_per_client_and_split(self) -> None:
        server, clients, ctx = self._setup("fedavg")
        records = evaluate_global(server, clients, ctx, run_id="abc")
        assert len(records) == 6
        assert {r.split for r in records} == {"local_train", "local_test"}
        assert all(r.round == 3 and r.run_id == "abc" for r in records)
        assert [r.role for r in records if r.client_id == 2] == ["test", "test"]

    def test_local_only_skips_clients_without_models(self) -> None:
        server, clients, ctx = self._setup("local_only")
        clients[0].params = init_model(ARCH, seed=5)
        records = evaluate_global(server, clients, ctx)
        assert {r.client_id for r in records} == {0}

    def test_finetune_refused_for_fedvc(self) -> None:
        server, clients, ctx = self._setup("fedvc_em")
        with pytest.raises(ProtocolError):
            evaluate_global(server, clients, ctx, fine_tune=True)

    def test_finetune_leaves_global_model_untouched(self) -> None:
        server, clients, ctx = self._setup("fedavg_ft")
        before = server.params.copy()
        evaluate_global(server, clients, ctx, fine_tune=True)
        assert server.params.allclose(before)

    def test_threaded_evaluation_matches_serial(self) -> None:
        server, clients, ctx = self._setup("fedavg")
        serial = evaluate_global(server, clients, ctx)
        ctx.threads = 3
        assert evaluate_global(server, clients, ctx) == serial
