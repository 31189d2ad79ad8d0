import math

import numpy as np
import pytest

from fedbalance.datasets import ClientDataset, make_toy_dataset
from fedbalance.seeding import rng_for
from fedbalance.training import (Dense, ModelParams, NonFiniteGradient,
                                 NonFiniteParam, OptState, ReLU, SchemaMismatch,
                                 ShapeMismatch, Softmax, TrainConfig, adam_step,
                                 backward, build_model, fedavg_aggregate,
                                 forward, init_model, local_train,
                                 loss_and_grad, run_round, schema_param_count,
                                 softmax_cross_entropy, training_arrays)


class TestForward:
    def test_zero_params_give_uniform_logits(self):
        schema = (Dense(4, 5), Softmax())
        params = ModelParams(schema, np.zeros(schema_param_count(schema),
                                              dtype=np.float32))
        x = np.random.default_rng(0).random((8, 4)).astype(np.float32)
        logits, _ = forward(params, x)
        assert np.all(logits == 0.0)
        loss, _ = softmax_cross_entropy(logits, np.zeros(8, dtype=np.int64))
        assert loss == pytest.approx(math.log(5), rel=1e-6)

    def test_hand_computed_dense(self):
        schema = (Dense(1, 2), Softmax())
        params = ModelParams(schema, np.array([2.0, -1.0, 0.5, 0.25],
                                              dtype=np.float32))
        logits, _ = forward(params, np.array([[3.0]], dtype=np.float32))
        # W = [[2, -1]], b = [0.5, 0.25]: logits = [6.5, -2.75]
        assert np.allclose(logits, [[6.5, -2.75]])

    def test_batch_of_128_has_finite_loss(self):
        data = make_toy_dataset(13, 10, (10, 10, 1), seed=0)
        client = training_arrays(ClientDataset(0, data, 10))
        schema = build_model("cnn", (10, 10, 1), 10)
        params = init_model(schema, 1)
        loss, grad = loss_and_grad(params, client.x[:128], client.y[:128])
        assert np.isfinite(loss)
        assert np.all(np.isfinite(grad))

    def test_shape_mismatch(self):
        params = init_model((Dense(4, 2), Softmax()), 0)
        with pytest.raises(ShapeMismatch):
            forward(params, np.zeros((3, 5), dtype=np.float32))
        conv = init_model(build_model("cnn", (8, 8, 3), 4), 0)
        with pytest.raises(ShapeMismatch):
            forward(conv, np.zeros((2, 8, 8, 1), dtype=np.float32))


from helpers import finite_difference_worst, gradient_check_cases


class TestBackward:
    def test_finite_difference_all_layer_types(self):
        for name, schema, x, y, seed in gradient_check_cases():
            worst, gap = finite_difference_worst(schema, x, y, seed, n_coords=200)
            # precondition: no pool argmax can flip inside the probe interval
            assert gap > 0.008, f"{name}: pool gap {gap} too small for h=1e-3"
            assert worst < 1e-4, f"{name}: max relative error {worst}"

    def test_backward_uses_forward_cache(self):
        schema = build_model("mlp", (4, 4, 1), 3)
        params = init_model(schema, 5)
        x = np.random.default_rng(1).random((5, 4, 4, 1)).astype(np.float32)
        y = np.array([0, 1, 2, 0, 1])
        _, cache = forward(params, x)
        grad = backward(params, y, cache)
        _, grad2 = loss_and_grad(params, x, y)
        assert np.array_equal(grad, grad2)

    def test_duplicated_example_matches_single(self):
        schema = (Dense(6, 3), Softmax())
        params = init_model(schema, 2)
        x1 = np.random.default_rng(3).random((1, 6)).astype(np.float32)
        y1 = np.array([1])
        _, g_single = loss_and_grad(params, x1, y1)
        _, g_dup = loss_and_grad(params, np.repeat(x1, 4, axis=0),
                                 np.repeat(y1, 4))
        assert np.allclose(g_single, g_dup, atol=1e-7)

    def test_relu_gates_dead_units(self):
        # zero input + negative bias: ReLU output is identically zero, so
        # the first layer's weight gradient must vanish
        schema = (Dense(4, 3), ReLU(), Dense(3, 2), Softmax())
        params = init_model(schema, 4)
        flat = params.flat.copy()
        n_w1 = 4 * 3
        flat[n_w1:n_w1 + 3] = -1.0        # first-layer biases negative
        params = ModelParams(schema, flat)
        x = np.zeros((4, 4), dtype=np.float32)
        y = np.array([0, 1, 0, 1])
        _, grad = loss_and_grad(params, x, y)
        assert np.all(grad[:n_w1] == 0.0)


class TestAdam:
    def test_zero_gradient_is_fixed_point(self):
        flat = np.array([1.0, -2.0, 3.0], dtype=np.float32)
        opt = OptState.fresh(3)
        out = adam_step(flat, np.zeros(3, dtype=np.float32), opt)
        assert np.array_equal(out, flat)
        assert opt.step == 1

    def test_three_step_recurrence_oracle(self):
        # hand-rolled Adam on one scalar with constant gradient 1
        lr, b1, b2, eps = 0.001, 0.9, 0.999, 1e-8
        p, m, v = 0.5, 0.0, 0.0
        expected = []
        for t in range(1, 4):
            m = b1 * m + (1 - b1) * 1.0
            v = b2 * v + (1 - b2) * 1.0
            p -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
            expected.append(p)
        flat = np.array([0.5], dtype=np.float64)
        opt = OptState.fresh(1, dtype=np.float64)
        got = []
        for _ in range(3):
            flat = adam_step(flat, np.ones(1), opt)
            got.append(float(flat[0]))
        assert np.allclose(got, expected, rtol=1e-12)

    def test_determinism(self):
        def run():
            flat = np.ones(4, dtype=np.float32)
            opt = OptState.fresh(4)
            rng = np.random.default_rng(0)
            for _ in range(5):
                flat = adam_step(flat, rng.normal(size=4).astype(np.float32), opt)
            return flat
        assert np.array_equal(run(), run())

    def test_non_finite_gradient_rejected(self):
        opt = OptState.fresh(2)
        with pytest.raises(NonFiniteGradient):
            adam_step(np.ones(2, dtype=np.float32),
                      np.array([1.0, np.nan], dtype=np.float32), opt)


class TestFedAvgAggregate:
    def test_identical_models_fixed_point(self):
        schema = (Dense(2, 2), Softmax())
        model = init_model(schema, 0)
        out = fedavg_aggregate([model, model.copy(), model.copy()],
                               [0.2, 0.3, 0.5])
        assert np.array_equal(out.flat, model.flat)

    def test_midpoint_hand_checked(self):
        schema = (Dense(1, 2), Softmax())
        a = ModelParams(schema, np.array([1, 2, 3, 4], dtype=np.float32))
        b = ModelParams(schema, np.array([3, 0, 1, 0], dtype=np.float32))
        out = fedavg_aggregate([a, b], [0.5, 0.5])
        assert out.flat.tolist() == [2.0, 1.0, 2.0, 2.0]

    def test_degenerate_weights(self):
        schema = (Dense(1, 2), Softmax())
        a = init_model(schema, 1)
        b = init_model(schema, 2)
        out = fedavg_aggregate([a, b], [1.0, 0.0])
        assert np.array_equal(out.flat, a.flat)

    def test_schema_mismatch(self):
        a = init_model((Dense(1, 2), Softmax()), 0)
        b = init_model((Dense(2, 2), Softmax()), 0)
        with pytest.raises(SchemaMismatch):
            fedavg_aggregate([a, b], [0.5, 0.5])

    def test_non_finite_param(self):
        schema = (Dense(1, 2), Softmax())
        a = init_model(schema, 0)
        bad = a.copy()
        bad.flat[0] = np.inf
        with pytest.raises(NonFiniteParam):
            fedavg_aggregate([a, bad], [0.5, 0.5])

    def test_convex_hull(self):
        schema = (Dense(3, 2), Softmax())
        models = [init_model(schema, s) for s in range(5)]
        for m in models:
            m.flat += np.random.default_rng(10).normal(size=m.flat.size).astype(np.float32)
        w = np.random.default_rng(11).dirichlet(np.ones(5))
        out = fedavg_aggregate(models, w)
        stack = np.stack([m.flat for m in models])
        assert np.all(out.flat >= stack.min(axis=0))
        assert np.all(out.flat <= stack.max(axis=0))


def toy_clients(n_clients, per_class, num_classes=4, dims=(6, 6, 1), seed=0):
    data = make_toy_dataset(per_class * n_clients, num_classes, dims, seed=seed)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(data))
    chunks = np.array_split(order, n_clients)
    return [training_arrays(ClientDataset(i, [data[j] for j in chunk], num_classes))
            for i, chunk in enumerate(chunks)]


class TestRunRound:
    def test_single_client_equals_centralized(self):
        # centralized oracle: same shuffle streams, plain Adam loop
        clients = toy_clients(1, 12)
        test_x, test_y = clients[0].x, clients[0].y
        cfg = TrainConfig(batch_size=16, seed=3)
        schema = build_model("mlp", (6, 6, 1), 4)
        fed = init_model(schema, 7)
        central = fed.copy()
        for rnd in range(5):
            fed, _ = run_round(fed, clients, test_x, test_y, cfg, rnd)
            central, _ = local_train(central, clients[0], cfg,
                                     rng_for(cfg.seed, "shuffle", rnd, 0))
            rel = np.abs(fed.flat - central.flat) / np.maximum(np.abs(central.flat), 1e-8)
            assert rel.max() < 1e-6

    def test_aggregate_stays_in_convex_hull(self):
        clients = toy_clients(4, 8)
        cfg = TrainConfig(batch_size=8, seed=1)
        schema = build_model("logreg", (6, 6, 1), 4)
        params = init_model(schema, 0)
        trained = []
        for c in clients:
            p, _ = local_train(params, c, cfg, rng_for(cfg.seed, "shuffle", 0,
                                                       c.client_id))
            trained.append(p)
        sizes = np.array([len(c) for c in clients], dtype=np.float64)
        out = fedavg_aggregate(trained, sizes / sizes.sum())
        stack = np.stack([p.flat for p in trained])
        assert np.all(out.flat >= stack.min(axis=0) - 1e-7)
        assert np.all(out.flat <= stack.max(axis=0) + 1e-7)

    def test_200_round_report_sequence(self):
        clients = toy_clients(2, 6, num_classes=3, dims=(4, 4, 1))
        cfg = TrainConfig(batch_size=8, seed=5)
        params = init_model(build_model("logreg", (4, 4, 1), 3), 2)
        reports = []
        for rnd in range(200):
            params, report = run_round(params, clients, clients[0].x,
                                       clients[0].y, cfg, rnd)
            reports.append(report)
        assert len(reports) == 200
        assert reports[-1].round_index == 199
        assert all(0.0 <= r.test_accuracy <= 1.0 for r in reports)

    def test_partial_participation(self):
        clients = toy_clients(5, 6, num_classes=3, dims=(4, 4, 1))
        cfg = TrainConfig(batch_size=8, seed=2, participation_fraction=0.4)
        params = init_model(build_model("logreg", (4, 4, 1), 3), 1)
        _, report = run_round(params, clients, clients[0].x, clients[0].y, cfg, 0)
        assert len(report.client_losses) == 2   # ceil(0.4 * 5)

    def test_training_learns_toy_task(self):
        clients = toy_clients(2, 30)
        cfg = TrainConfig(batch_size=32, seed=6)
        params = init_model(build_model("mlp", (6, 6, 1), 4), 3)
        for rnd in range(30):
            params, report = run_round(params, clients, clients[0].x,
                                       clients[0].y, cfg, rnd)
        assert report.test_accuracy > 0.9


def test_training_arrays_scales_pixels():
    data = make_toy_dataset(2, 2, (4, 4, 1), seed=0)
    client = training_arrays(ClientDataset(0, data, 2))
    assert client.x.max() <= 1.0
    assert client.x.dtype == np.float32
