import math

import numpy as np
import pytest

from minimoe.config import RouterConfig
from minimoe.errors import ContractError, DimensionError
from minimoe.functional import layer_norm, softmax_rows
from minimoe.layers import attend_rows, ffn_expert, mha_attention, subtree
from minimoe.moe import (
    DROPPED, RoutingStats, balance_loss, build_hash_table, gate_probs, moe_ffn_forward, moe_mha_forward, route_hash,
    route_top1,
)
from minimoe.optim import AdamW, linear_schedule
from minimoe.tensor import Tensor
from tests.helpers import check_grad


def routed_block(rng, d=4, d_ffn=6, m=3):
    params = {"gate": Tensor(rng.normal(size=(d, m)), requires_grad=True),
              "norm.gain": Tensor(np.ones(d), requires_grad=True),
              "norm.bias": Tensor(np.zeros(d), requires_grad=True)}
    for k in range(m):
        params[f"expert.{k}.w_in"] = Tensor(rng.normal(0, 0.5, size=(d, d_ffn)), requires_grad=True)
        params[f"expert.{k}.b_in"] = Tensor(rng.normal(0, 0.1, size=d_ffn), requires_grad=True)
        params[f"expert.{k}.w_out"] = Tensor(rng.normal(0, 0.5, size=(d_ffn, d)), requires_grad=True)
        params[f"expert.{k}.b_out"] = Tensor(rng.normal(0, 0.1, size=d), requires_grad=True)
    return params


class TestRouteTop1:
    def test_capacity_first_come_first_served(self):
        probs = np.array([[0.9, 0.1]] * 4)
        assignments, stats = route_top1(probs, RouterConfig(num_experts=2, capacity_factor=1.0))
        np.testing.assert_array_equal(assignments, [0, 0, DROPPED, DROPPED])
        np.testing.assert_array_equal(stats.dispatch_counts, [4, 0])
        assert stats.dropped_tokens == 2
        assert stats.dropped_frac == pytest.approx(0.5)
        np.testing.assert_allclose(stats.f, [1.0, 0.0])
        np.testing.assert_allclose(stats.P, [0.9, 0.1])

    def test_no_drop_under_capacity(self):
        probs = np.array([[0.6, 0.4], [0.3, 0.7], [0.8, 0.2], [0.1, 0.9]])
        assignments, stats = route_top1(probs, RouterConfig(num_experts=2))
        np.testing.assert_array_equal(assignments, [0, 1, 0, 1])
        assert stats.dropped_tokens == 0

    def test_ties_go_to_lowest_index(self):
        assignments, _ = route_top1(np.array([[0.25, 0.25, 0.25, 0.25]]), RouterConfig(num_experts=4))
        assert assignments[0] == 0

    def test_zero_capacity_drops_everything(self):
        probs = np.array([[0.6, 0.4], [0.3, 0.7]])
        assignments, stats = route_top1(probs, RouterConfig(num_experts=2, capacity_factor=0.0))
        assert (assignments == DROPPED).all()
        assert stats.dropped_frac == 1.0

    def test_rejects_non_stochastic_rows(self):
        with pytest.raises(ContractError):
            route_top1(np.array([[0.6, 0.6]]), RouterConfig(num_experts=2))

    def test_rejects_wrong_expert_count(self):
        with pytest.raises(DimensionError):
            route_top1(np.array([[0.5, 0.5]]), RouterConfig(num_experts=3))


class TestBalanceLoss:
    @pytest.mark.parametrize("m", [2, 4, 8])
    def test_uniform_routing_gives_alpha(self, m):
        config = RouterConfig(num_experts=m, balance_coeff=0.01)
        probs = Tensor(np.full((2 * m, m), 1.0 / m))
        stats = RoutingStats(np.full(m, 2, dtype=np.int64), probs.data.sum(axis=0), 2 * m, 0)
        assert balance_loss(stats, probs, config).item() == pytest.approx(0.01, abs=1e-15)

    @pytest.mark.parametrize("m", [2, 4, 8])
    def test_collapse_gives_alpha_times_m(self, m):
        config = RouterConfig(num_experts=m, balance_coeff=0.01)
        probs = Tensor(np.tile(np.eye(m)[0], (8, 1)))
        _, stats = route_top1(probs, config)
        assert balance_loss(stats, probs, config).item() == pytest.approx(0.01 * m)

    def test_hash_routing_has_no_balance(self):
        config = RouterConfig(num_experts=2, algorithm="hash")
        stats = RoutingStats(np.array([1, 1]), np.array([1.0, 1.0]), 2, 0)
        assert balance_loss(stats, Tensor(np.full((2, 2), 0.5)), config).item() == 0.0

    def test_gradient_reaches_gate(self, rng):
        config = RouterConfig(num_experts=3, balance_coeff=0.5)
        x = Tensor(rng.normal(size=(6, 4)))
        gates = Tensor(rng.normal(size=(4, 3)), requires_grad=True)

        def loss():
            probs = gate_probs(x, gates)
            _, stats = route_top1(probs, config)
            return balance_loss(stats, probs, config)

        check_grad(loss, [gates])


class TestRoutingStats:
    def test_merge(self):
        a = RoutingStats(np.array([3, 1]), np.array([2.5, 1.5]), 4, 1)
        b = RoutingStats(np.array([0, 2]), np.array([0.5, 1.5]), 2, 0)
        merged = a + b
        np.testing.assert_array_equal(merged.dispatch_counts, [3, 3])
        assert merged.total_tokens == 6 and merged.dropped_tokens == 1
        np.testing.assert_allclose(merged.f, [0.5, 0.5])

    def test_merge_checks_expert_count(self):
        with pytest.raises(DimensionError):
            RoutingStats.empty(2).merge(RoutingStats.empty(3))

    def test_empty_stats_report_zeros(self):
        stats = RoutingStats.empty(3)
        np.testing.assert_array_equal(stats.f, 0.0)
        assert stats.to_json()["dropped_frac"] == 0.0


class TestHashRouting:
    def test_table_is_a_seeded_permutation(self):
        table = build_hash_table(50, seed=7)
        assert sorted(table.tolist()) == list(range(50))
        np.testing.assert_array_equal(table, build_hash_table(50, seed=7))
        assert not np.array_equal(table, build_hash_table(50, seed=8))

    def test_route_is_table_mod_m(self):
        table = build_hash_table(20, seed=0)
        ids = np.array([[3, 4], [19, 0]])
        np.testing.assert_array_equal(route_hash(ids, 3, table), table[ids.reshape(-1)] % 3)

    def test_same_token_same_expert(self):
        table = build_hash_table(20, seed=0)
        experts = route_hash(np.array([5, 9, 5, 5]), 4, table)
        assert experts[0] == experts[2] == experts[3]

    def test_out_of_range_id(self):
        with pytest.raises(ContractError):
            route_hash(np.array([20]), 2, build_hash_table(20, seed=0))

    def test_block_never_drops(self, rng):
        table = build_hash_table(10, seed=1)
        x = Tensor(rng.normal(size=(12, 4)))
        ids = np.zeros(12, dtype=np.int64)
        router = RouterConfig(num_experts=3, algorithm="hash", capacity_factor=0.5)
        out = moe_ffn_forward(x, routed_block(rng), router, token_ids=ids, hash_table=table)
        assert out.stats.dropped_tokens == 0
        assert out.probs is None
        assert (out.assignments == table[0] % 3).all()

    def test_needs_ids_and_table(self, rng):
        router = RouterConfig(num_experts=3, algorithm="hash")
        with pytest.raises(ContractError):
            moe_ffn_forward(Tensor(rng.normal(size=(2, 4))), routed_block(rng), router)


class TestMoeFfnForward:
    def test_dropped_tokens_take_the_residual(self, rng):
        params = routed_block(rng)
        x = Tensor(rng.normal(size=(5, 4)))
        out = moe_ffn_forward(x, params, RouterConfig(num_experts=3, capacity_factor=0.0))
        expected = layer_norm(x, params["norm.gain"], params["norm.bias"]).data
        np.testing.assert_allclose(out.hidden.data, expected, atol=1e-12)

    def test_padding_rows_are_not_routed(self, rng):
        x = Tensor(rng.normal(size=(2, 4, 4)))
        valid = np.array([[True, True, True, False], [True, False, False, False]])
        out = moe_ffn_forward(x, routed_block(rng), RouterConfig(num_experts=3), valid=valid)
        assert out.stats.total_tokens == 4
        np.testing.assert_array_equal(out.routed_rows, [0, 1, 2, 4])

    def test_update_scaled_by_gate_probability(self, rng):
        params = routed_block(rng, m=2)
        x = Tensor(rng.normal(size=(1, 4)))
        out = moe_ffn_forward(x, params, RouterConfig(num_experts=2, capacity_factor=2.0))
        k = int(out.assignments[0])
        p = out.probs.data[0, k]
        expert = {name.split(".", 2)[2]: t for name, t in params.items() if name.startswith(f"expert.{k}.")}
        update = ffn_expert(x, expert).data * p
        expected = layer_norm(Tensor(x.data + update), params["norm.gain"], params["norm.bias"]).data
        np.testing.assert_allclose(out.hidden.data, expected, atol=1e-12)

    def test_gradients_through_experts_and_gate(self, rng):
        params = routed_block(rng)
        x = Tensor(rng.normal(size=(6, 4)))
        weights = Tensor(rng.normal(size=(6, 4)))
        router = RouterConfig(num_experts=3, capacity_factor=3.0)

        def loss():
            return (moe_ffn_forward(x, params, router).hidden * weights).sum()

        check_grad(loss, [params["gate"], params["expert.0.w_in"], params["expert.1.w_out"],
                          params["norm.gain"]])


def routed_mha_block(rng, d=8, m=4):
    params = {"gate": Tensor(rng.normal(size=(d, m)), requires_grad=True),
              "norm.gain": Tensor(np.ones(d), requires_grad=True),
              "norm.bias": Tensor(np.zeros(d), requires_grad=True)}
    for k in range(m):
        for name in ("q", "k", "v", "o"):
            params[f"expert.{k}.w_{name}"] = Tensor(rng.normal(0, 0.5, size=(d, d)), requires_grad=True)
            params[f"expert.{k}.b_{name}"] = Tensor(rng.normal(0, 0.1, size=d), requires_grad=True)
    return params


def per_token_reference(x3, params, num_heads, key_mask, out):
    """Each routed token's row of its expert's full attention, scaled by p_k, then the residual norm."""
    batch, n, d = x3.shape
    update = np.zeros((batch * n, d))
    for pos, row in enumerate(out.routed_rows):
        k = int(out.assignments[pos])
        if k == DROPPED:
            continue
        full = mha_attention(x3, subtree(params, f"expert.{k}"), num_heads, key_mask).attended.data
        update[row] = out.probs.data[pos, k] * full.reshape(-1, d)[row]
    summed = Tensor(x3.data + update.reshape(batch, n, d))
    return layer_norm(summed, params["norm.gain"], params["norm.bias"]).data


class TestMoeMhaForward:
    def test_query_rows_scale_with_tokens_not_experts(self, rng, monkeypatch):
        rows = []

        def counting(q, *args, **kwargs):
            rows.append(q.shape[0])
            return attend_rows(q, *args, **kwargs)

        def full_attention(*args, **kwargs):
            raise AssertionError("a routed block must not attend over every token per expert")

        monkeypatch.setattr("minimoe.moe.attend_rows", counting)
        monkeypatch.setattr("minimoe.moe.mha_attention", full_attention)
        x = Tensor(rng.normal(size=(1, 16, 8)))
        out = moe_mha_forward(x, routed_mha_block(rng), RouterConfig(num_experts=4, capacity_factor=4.0), 2)
        assert out.stats.dropped_tokens == 0
        assert sum(rows) == 16
        assert len(rows) <= 4

    def test_dropped_tokens_get_no_query_rows(self, rng, monkeypatch):
        rows = []

        def counting(q, *args, **kwargs):
            rows.append(q.shape[0])
            return attend_rows(q, *args, **kwargs)

        monkeypatch.setattr("minimoe.moe.attend_rows", counting)
        x = Tensor(rng.normal(size=(1, 16, 8)))
        out = moe_mha_forward(x, routed_mha_block(rng), RouterConfig(num_experts=4, capacity_factor=0.5), 2)
        assert sum(rows) == 16 - out.stats.dropped_tokens

    @pytest.mark.parametrize("capacity_factor", [4.0, 1.0, 0.5])
    def test_matches_full_attention_of_the_routed_expert(self, rng, capacity_factor):
        params = routed_mha_block(rng)
        x = Tensor(rng.normal(size=(1, 16, 8)))
        out = moe_mha_forward(x, params, RouterConfig(num_experts=4, capacity_factor=capacity_factor), 2)
        expected = per_token_reference(x, params, 2, None, out)
        np.testing.assert_allclose(out.hidden.data, expected, atol=1e-10)

    def test_padding_is_masked_and_unrouted(self, rng):
        params = routed_mha_block(rng)
        x = Tensor(rng.normal(size=(2, 8, 8)))
        key_mask = np.arange(8)[None, :] < np.array([8, 5])[:, None]
        out = moe_mha_forward(x, params, RouterConfig(num_experts=4, capacity_factor=4.0), 2, key_mask=key_mask)
        assert out.stats.total_tokens == 13
        expected = per_token_reference(x, params, 2, key_mask, out)
        np.testing.assert_allclose(out.hidden.data, expected, atol=1e-10)

    def test_projections_come_from_the_argmax_expert(self, rng):
        params = routed_mha_block(rng)
        x = Tensor(rng.normal(size=(1, 16, 8)))
        out = moe_mha_forward(x, params, RouterConfig(num_experts=4, capacity_factor=0.5), 2)
        owner = out.probs.data.argmax(axis=1)
        flat = x.data.reshape(16, 8)
        for name, projected in zip("qkv", (out.projections.q, out.projections.k, out.projections.v)):
            expected = np.stack([flat[i] @ params[f"expert.{owner[i]}.w_{name}"].data
                                 + params[f"expert.{owner[i]}.b_{name}"].data for i in range(16)])
            np.testing.assert_allclose(projected.data.reshape(16, 8), expected, atol=1e-12)

    def test_two_dimensional_input(self, rng):
        params = routed_mha_block(rng)
        x = rng.normal(size=(6, 8))
        router = RouterConfig(num_experts=4, capacity_factor=4.0)
        flat = moe_mha_forward(Tensor(x), params, router, 2).hidden.data
        batched = moe_mha_forward(Tensor(x[None]), params, router, 2).hidden.data
        assert flat.shape == (6, 8)
        np.testing.assert_allclose(flat, batched[0], atol=1e-12)

    def test_gradients_through_experts_gate_and_projections(self, rng):
        params = routed_mha_block(rng, d=4, m=2)
        x = Tensor(rng.normal(size=(1, 5, 4)))
        weights = Tensor(rng.normal(size=(1, 5, 4)))
        router = RouterConfig(num_experts=2, capacity_factor=2.0)

        def loss():
            out = moe_mha_forward(x, params, router, 2)
            return (out.hidden * weights).sum() + (out.projections.k * weights).sum()

        check_grad(loss, [params["gate"], params["expert.0.w_q"], params["expert.1.w_k"],
                          params["expert.0.w_o"], params["expert.1.b_v"]])


class TestRoutingProperties:
    def test_stats_match_a_per_token_tally(self, rng):
        m, n, capacity_factor = 4, 50, 0.5
        probs = rng.dirichlet(np.ones(m), size=n)
        config = RouterConfig(num_experts=m, capacity_factor=capacity_factor, balance_coeff=0.3)
        assignments, stats = route_top1(probs, config)

        cap = math.ceil(capacity_factor * n / m)
        counts, mass, load, dropped = np.zeros(m), np.zeros(m), np.zeros(m, dtype=np.int64), 0
        for i in range(n):
            j = int(np.argmax(probs[i]))
            counts[j] += 1
            mass += probs[i]
            if load[j] < cap:
                load[j] += 1
                assert assignments[i] == j
            else:
                dropped += 1
                assert assignments[i] == DROPPED
        np.testing.assert_allclose(stats.f, counts / n, atol=1e-12)
        np.testing.assert_allclose(stats.P, mass / n, atol=1e-12)
        assert stats.dropped_tokens == dropped
        expected = 0.3 * m * sum((counts[j] / n) * (mass[j] / n) for j in range(m))
        assert balance_loss(stats, Tensor(probs), config).item() == pytest.approx(expected, abs=1e-12)

    @pytest.mark.parametrize("m", [2, 4, 8])
    def test_uniform_routing_is_never_beaten(self, rng, m):
        config = RouterConfig(num_experts=m, balance_coeff=0.01)
        for _ in range(200):
            counts = rng.multinomial(1000, rng.dirichlet(np.ones(m)))
            stats = RoutingStats(counts.astype(np.int64), counts.astype(np.float64), 1000, 0)
            probs = Tensor((counts / 1000.0)[None, :])
            assert balance_loss(stats, probs, config).item() >= 0.01 - 1e-12

    def test_argmax_survives_monotone_transforms(self, rng):
        logits = rng.normal(size=(40, 4))
        config = RouterConfig(num_experts=4, capacity_factor=4.0)
        base, _ = route_top1(softmax_rows(Tensor(logits)), config)
        for transform in (lambda z: 3.0 * z - 2.0, np.cbrt, lambda z: z ** 3, np.arctan):
            routed, _ = route_top1(softmax_rows(Tensor(transform(logits))), config)
            np.testing.assert_array_equal(routed, base)

    def test_gate_probs_worked_example(self):
        probs = gate_probs(Tensor(np.array([[1.0]])), Tensor(np.array([[1.0, 2.0, 3.0]])))
        np.testing.assert_allclose(probs.data[0], [0.09003057, 0.24472847, 0.66524096], atol=1e-8)
        assignments, _ = route_top1(probs, RouterConfig(num_experts=3))
        assert assignments[0] == 2

    def test_gate_probs_checks_width(self, rng):
        with pytest.raises(DimensionError):
            gate_probs(Tensor(rng.normal(size=(2, 4))), Tensor(rng.normal(size=(3, 2))))

    @pytest.mark.parametrize("m", [2, 4])
    def test_identical_experts_with_uniform_gates_scale_the_ffn(self, rng, m):
        single = routed_block(rng, m=1)
        params = {"gate": Tensor(np.zeros((4, m))), "norm.gain": single["norm.gain"],
                  "norm.bias": single["norm.bias"]}
        for k in range(m):
            for name in ("w_in", "b_in", "w_out", "b_out"):
                params[f"expert.{k}.{name}"] = single[f"expert.0.{name}"]
        x = Tensor(rng.normal(size=(6, 4)))
        out = moe_ffn_forward(x, params, RouterConfig(num_experts=m, capacity_factor=float(m)))
        update = ffn_expert(x, subtree(single, "expert.0")).data / m
        expected = layer_norm(Tensor(x.data + update), single["norm.gain"], single["norm.bias"]).data
        np.testing.assert_allclose(out.hidden.data, expected, atol=1e-12)

    def test_hash_table_splits_the_vocabulary_evenly(self):
        table = build_hash_table(1000, seed=3)
        counts = np.bincount(route_hash(np.arange(1000), 4, table), minlength=4)
        np.testing.assert_array_equal(counts, [250, 250, 250, 250])


def train_gate_on_balance(alpha: float, steps: int = 300) -> np.ndarray:
    """Optimize only a collapsed gate on the balance objective; returns the final f."""
    rng = np.random.default_rng(0)
    m, n, d = 4, 256, 4
    features = rng.normal(size=(n, d))
    features[:, 0] = 1.0
    x = Tensor(features)
    init = rng.normal(0, 0.1, size=(d, m))
    init[0, 0] = 3.0
    gates = Tensor(init, requires_grad=True)
    config = RouterConfig(num_experts=m, balance_coeff=alpha, capacity_factor=float(m))
    optimizer = AdamW([("gate", gates)], lr=0.05, weight_decay=0.0, max_grad_norm=None)
    schedule = linear_schedule(0.05, steps, 0.0)
    for step in range(steps):
        probs = gate_probs(x, gates)
        _, stats = route_top1(probs, config)
        optimizer.zero_grad()
        balance_loss(stats, probs, config).backward()
        optimizer.step(schedule(step))
    _, stats = route_top1(gate_probs(x, gates), config)
    return stats.f


class TestBalanceTraining:
    def test_balance_objective_spreads_a_collapsed_router(self):
        assert train_gate_on_balance(alpha=1.0).max() <= 2 / 4

    def test_without_the_objective_the_router_stays_collapsed(self):
        assert train_gate_on_balance(alpha=0.0).max() > 2 / 4
