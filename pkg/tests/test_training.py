"""Loss composition, gradient training, variants, and the LR sweep."""

import numpy as np
import pytest

from mtnn import constraints as ct
from mtnn import graph
from mtnn import net as nn
from mtnn import plants as pl
from mtnn import training as tr
from mtnn.model import BaselineModel, GateMode, MtnnModel, TaylorOrder
from mtnn.net import TrainingFault


def make_transitions(rng, B, nx, nu, scale=1.0):
    N = nx + nu
    Zp = rng.normal(size=(B, N)) * scale
    Zc = Zp + rng.normal(size=(B, N)) * 0.4
    Xn = Zc[:, :nx] + rng.normal(size=(B, nx)) * 0.3
    return [pl.Transition(Zp[i], Zc[i], Xn[i]) for i in range(B)]


def make_model(rng_seed, nx, nu, width=3, order=TaylorOrder.FIRST,
               gate=GateMode.NONE, tags=None, bias_shift=0.0):
    N = nx + nu
    rng = np.random.default_rng(rng_seed)
    nets = []
    for _ in range(nx):
        net = nn.init_dense([N, width, N], rng, "tanh")
        net.biases[-1] += bias_shift
        nets.append(net)
    spec = ct.MonoSpec.free(nx, N) if tags is None else ct.MonoSpec.from_symbols(tags)
    return MtnnModel(nets, spec, order, gate)


def flat_params(model):
    nets = model.nets if isinstance(model, MtnnModel) else [model.net]
    return [A for net in nets for A in (*net.weights, *net.biases)]


class TestTotalLoss:
    def test_zero_residual(self):
        # zero increment predicts x_curr exactly; make that the target
        rng = np.random.default_rng(0)
        Z = rng.normal(size=(6, 3))
        data = [pl.Transition(Z[i], Z[i], Z[i, :1]) for i in range(6)]
        model = make_model(1, nx=1, nu=2)
        assert tr.total_loss(model, data, tr.TrainConfig()) == 0.0

    def test_single_sample_squared_residual(self):
        net = nn.init_dense([2, 2], 0, "linear")
        net.weights[0][:] = 0.0  # constant-zero Jacobian row
        net.biases[0][:] = 0.0
        model = MtnnModel([net], ct.MonoSpec.free(1, 2), TaylorOrder.FIRST, GateMode.NONE)
        z = np.array([1.0, 2.0])
        data = [pl.Transition(z, z + 1.0, np.array([2.3]))]  # pred = x_curr = 2.0
        assert tr.total_loss(model, data, tr.TrainConfig()) == pytest.approx(0.09, abs=1e-15)

    def test_mono_soft_composition(self):
        rng = np.random.default_rng(3)
        data = make_transitions(rng, 8, 2, 1)
        model = make_model(4, nx=2, nu=1, tags=["+-.", ".+-"])
        cfg = tr.TrainConfig(mode=tr.TrainMode.MONO_SOFT)
        total, mse, mono, convex = tr.loss_components(model, data, cfg)
        assert convex == 0.0
        assert mono > 0  # random nets should violate something
        mse_only = tr.total_loss(model, data, tr.TrainConfig(mode=tr.TrainMode.MSE))
        from mtnn import model as md
        J = md.jacobian_matrix_batch(model, np.stack([t.z_prev for t in data]))
        pen = np.mean([ct.mono_penalty(J[b], model.mono_spec, cfg.penalty)
                       for b in range(len(data))])
        assert total == mse_only + pen

    def test_penalty_modes_reject_baseline(self):
        net = nn.init_dense([3, 4, 1], 0)
        model = BaselineModel(net, nx=1)
        data = make_transitions(np.random.default_rng(0), 4, 1, 2)
        with pytest.raises(ValueError):
            tr.total_loss(model, data, tr.TrainConfig(mode=tr.TrainMode.MONO_SOFT))

    def test_strict_minors_tighter_than_det(self):
        # H = -I has det +1 (no det hinge) but a negative leading minor
        net = nn.init_dense([2, 2], 0, "linear")
        net.weights[0][:] = -np.eye(2)
        net.biases[0][:] = 0.0
        model = MtnnModel([net], ct.MonoSpec.free(1, 2), TaylorOrder.SECOND, GateMode.NONE)
        data = make_transitions(np.random.default_rng(1), 5, 1, 1)
        loose = tr.loss_components(model, data, tr.TrainConfig(mode=tr.TrainMode.CONVEX))
        strict = tr.loss_components(
            model, data, tr.TrainConfig(mode=tr.TrainMode.CONVEX, strict_minors=True)
        )
        assert loose[3] == 0.0
        assert strict[3] == pytest.approx(0.1, abs=1e-15)  # gamma * ReLU(1)


class TestLossGraphTwin:
    CASES = [
        (TaylorOrder.FIRST, GateMode.NONE, tr.TrainMode.MSE, False),
        (TaylorOrder.SECOND, GateMode.NONE, tr.TrainMode.MSE, False),
        (TaylorOrder.FIRST, GateMode.NONE, tr.TrainMode.MONO_SOFT, False),
        (TaylorOrder.SECOND, GateMode.NONE, tr.TrainMode.MONO_SOFT_CONVEX, False),
        (TaylorOrder.SECOND, GateMode.NONE, tr.TrainMode.CONVEX, True),
        (TaylorOrder.FIRST, GateMode.ARCHITECTURE, tr.TrainMode.MSE, False),
        (TaylorOrder.SECOND, GateMode.ARCHITECTURE, tr.TrainMode.MSE, False),
    ]

    @pytest.mark.parametrize("order,gate,mode,strict", CASES)
    def test_graph_matches_numpy(self, order, gate, mode, strict):
        rng = np.random.default_rng(11)
        data = make_transitions(rng, 7, 2, 1)
        model = make_model(12, nx=2, nu=1, order=order, gate=gate,
                           tags=["+.-", "-+."], bias_shift=0.3)
        cfg = tr.TrainConfig(mode=mode, strict_minors=strict)
        Zp, Zc, Xn = pl.transitions_to_arrays(data)
        tape = nn.NetTape(model.nets)
        total_var, comps = tr._loss_graph(tape, model, Zp, Zc, Xn, cfg)
        ref = tr.loss_components(model, data, cfg)
        np.testing.assert_allclose(float(total_var.value), ref[0], rtol=1e-12)
        np.testing.assert_allclose(comps, ref[1:], rtol=1e-12)

    def test_graph_matches_numpy_symmetrized(self):
        rng = np.random.default_rng(13)
        data = make_transitions(rng, 5, 1, 2)
        model = make_model(14, nx=1, nu=2, order=TaylorOrder.SECOND)
        model.symmetrize_hessian = True
        cfg = tr.TrainConfig(mode=tr.TrainMode.CONVEX)
        Zp, Zc, Xn = pl.transitions_to_arrays(data)
        tape = nn.NetTape(model.nets)
        total_var, _ = tr._loss_graph(tape, model, Zp, Zc, Xn, cfg)
        np.testing.assert_allclose(
            float(total_var.value), tr.total_loss(model, data, cfg), rtol=1e-12
        )

    @pytest.mark.parametrize("order,gate,mode,strict", CASES)
    def test_parameter_gradients_match_fd(self, order, gate, mode, strict):
        rng = np.random.default_rng(21)
        data = make_transitions(rng, 3, 2, 1)
        model = make_model(22, nx=2, nu=1, order=order, gate=gate,
                           tags=["+.-", "-+."], bias_shift=0.35)
        cfg = tr.TrainConfig(mode=mode, strict_minors=strict)
        Zp, Zc, Xn = pl.transitions_to_arrays(data)
        tape = nn.NetTape(model.nets)
        total_var, _ = tr._loss_graph(tape, model, Zp, Zc, Xn, cfg)
        graph.backward(total_var)
        grads = []
        for i in range(model.nx):
            pg = tape.gradients(i)
            grads.extend((*pg.weights, *pg.biases))
        step = 1e-6
        for A, G in zip(flat_params(model), grads):
            it = np.nditer(A, flags=["multi_index"])
            while not it.finished:
                idx = it.multi_index
                orig = A[idx]
                A[idx] = orig + step
                fp = tr.total_loss(model, data, cfg)
                A[idx] = orig - step
                fm = tr.total_loss(model, data, cfg)
                A[idx] = orig
                fd = (fp - fm) / (2 * step)
                assert abs(G[idx] - fd) < 1e-5 * max(1.0, abs(fd)), (idx, G[idx], fd)
                it.iternext()


class TestTrain:
    def linear_problem(self, B=32, seed=0):
        rng = np.random.default_rng(seed)
        Zp = rng.normal(size=(B, 2))
        Zc = Zp + rng.normal(size=(B, 2)) * 0.5
        Xn = (Zc[:, 0] + 0.5 * (Zc[:, 1] - Zp[:, 1])).reshape(-1, 1)
        return [pl.Transition(Zp[i], Zc[i], Xn[i]) for i in range(B)]

    def linear_model(self, seed=3):
        net = nn.init_dense([2, 2], seed, "linear")
        return MtnnModel([net], ct.MonoSpec.free(1, 2), TaylorOrder.FIRST, GateMode.NONE)

    def test_linear_realizable_converges(self):
        data = self.linear_problem()
        cfg = tr.TrainConfig(learning_rate=3e-2, epochs=500, seed=0)
        model, hist = tr.train(self.linear_model(), data, cfg)
        assert tr.total_loss(model, data, cfg) < 1e-8
        assert len(hist) == 500

    def test_returns_best_recorded_epoch(self):
        data = self.linear_problem()
        cfg = tr.TrainConfig(learning_rate=0.5, epochs=40, seed=0)  # oscillatory
        model, hist = tr.train(self.linear_model(), data, cfg)
        got = tr.total_loss(model, data, cfg)
        np.testing.assert_allclose(got, hist.total.min(), rtol=1e-9)
        assert hist.total.min() <= hist.total[-1]

    def test_best_leq_initial(self):
        data = self.linear_problem()
        cfg = tr.TrainConfig(epochs=5, seed=1)
        _, hist = tr.train(self.linear_model(), data, cfg)
        assert hist.total.min() <= hist.total[0]

    def test_deterministic(self):
        data = self.linear_problem()
        cfg = tr.TrainConfig(learning_rate=1e-2, epochs=50, seed=9)
        m1, h1 = tr.train(self.linear_model(), data, cfg)
        m2, h2 = tr.train(self.linear_model(), data, cfg)
        assert np.array_equal(h1.total, h2.total)
        for a, b in zip(flat_params(m1), flat_params(m2)):
            assert np.array_equal(a, b)

    def test_minibatch_runs_and_differs_from_fullbatch(self):
        data = self.linear_problem(B=20)
        full = tr.TrainConfig(learning_rate=1e-2, epochs=30, seed=2)
        mini = tr.TrainConfig(learning_rate=1e-2, epochs=30, seed=2, batch_size=5)
        _, hf = tr.train(self.linear_model(), data, full)
        _, hm = tr.train(self.linear_model(), data, mini)
        assert len(hm) == 30
        assert not np.array_equal(hf.total, hm.total)

    def test_input_model_untouched(self):
        data = self.linear_problem()
        model = self.linear_model()
        before = [A.copy() for A in flat_params(model)]
        tr.train(model, data, tr.TrainConfig(epochs=10, seed=0))
        for a, b in zip(flat_params(model), before):
            assert np.array_equal(a, b)

    def test_zero_epochs_rejected(self):
        with pytest.raises(ValueError):
            tr.TrainConfig(epochs=0)

    def test_oversized_batch_rejected(self):
        data = self.linear_problem(B=4)
        with pytest.raises(ValueError, match="batch_size"):
            tr.train(self.linear_model(), data, tr.TrainConfig(batch_size=5, epochs=1))

    def test_tiny_dataset_rejected(self):
        data = self.linear_problem(B=1)
        with pytest.raises(ValueError):
            tr.train(self.linear_model(), data, tr.TrainConfig(epochs=1))

    def test_divergence_fault_carries_history_and_sample(self):
        data = self.linear_problem()
        data[7] = pl.Transition(data[7].z_prev, data[7].z_curr, np.array([1e200]))
        cfg = tr.TrainConfig(learning_rate=1e-3, epochs=10, seed=0)
        with pytest.raises(TrainingFault, match="sample 7") as ei:
            tr.train(self.linear_model(), data, cfg)
        assert len(ei.value.history) < 10

    def test_feasible_spec_drives_mono_penalty_to_zero(self):
        b = pl.hvac_benchmark(seed=3)
        data = b.train[:80]
        spec = b.plant.mono_spec()
        model = tr.build_variant("soft1", spec, data, width=16, seed=5)
        cfg = tr.TrainConfig(learning_rate=3e-3, epochs=400, seed=5,
                             mode=tr.TrainMode.MONO_SOFT)
        trained, hist = tr.train(model, data, cfg)
        assert hist.mono[-1] < 1e-6


class TestTrainBaseline:
    def test_constant_target_realizable(self):
        rng = np.random.default_rng(6)
        Zp = rng.normal(size=(16, 3))
        Zc = Zp + rng.normal(size=(16, 3)) * 0.3
        data = [pl.Transition(Zp[i], Zc[i], np.array([4.2])) for i in range(16)]
        net, hist = tr.train_baseline(
            [3, 1], data, tr.TrainConfig(learning_rate=1e-2, epochs=600, seed=0)
        )
        pred = nn.forward(net, Zc)
        assert np.mean((pred - 4.2) ** 2) < 1e-8

    def test_deterministic(self):
        data = make_transitions(np.random.default_rng(1), 12, 1, 2)
        cfg = tr.TrainConfig(epochs=20, seed=4)
        n1, h1 = tr.train_baseline([3, 4, 1], data, cfg)
        n2, h2 = tr.train_baseline([3, 4, 1], data, cfg)
        assert np.array_equal(h1.total, h2.total)
        for a, b in zip(n1.weights + n1.biases, n2.weights + n2.biases):
            assert np.array_equal(a, b)

    def test_penalty_mode_rejected(self):
        data = make_transitions(np.random.default_rng(1), 8, 1, 2)
        with pytest.raises(ValueError):
            tr.train_baseline([3, 4, 1], data, tr.TrainConfig(mode="mono_soft"))

    def test_dim_mismatch_rejected(self):
        data = make_transitions(np.random.default_rng(1), 8, 1, 2)
        with pytest.raises(ValueError):
            tr.train_baseline([4, 4, 1], data, tr.TrainConfig())


class TestHistory:
    def test_csv_format(self, tmp_path):
        data = make_transitions(np.random.default_rng(2), 8, 1, 1)
        net = nn.init_dense([2, 2], 0, "linear")
        model = MtnnModel([net], ct.MonoSpec.free(1, 2), TaylorOrder.FIRST, GateMode.NONE)
        _, hist = tr.train(model, data, tr.TrainConfig(epochs=7, seed=0))
        p = tmp_path / "hist.csv"
        hist.save_csv(p)
        lines = p.read_text().splitlines()
        assert lines[0] == "epoch,total,mse,mono,convex"
        assert len(lines) == 8
        assert lines[1].startswith("0,")
        assert hist.wall_time > 0

    def test_ragged_rejected(self):
        with pytest.raises(ValueError):
            tr.TrainHistory(np.zeros(3), np.zeros(2), np.zeros(3), np.zeros(3))

    def test_nonfinite_rejected(self):
        with pytest.raises(ValueError):
            tr.TrainHistory(np.array([np.inf]), np.zeros(1), np.zeros(1), np.zeros(1))


class TestVariants:
    def test_recipe_table(self):
        assert tr.variant_recipe("baseline")["baseline"]
        r = tr.variant_recipe("mono2")
        assert r["order"] is TaylorOrder.SECOND
        assert r["gate_mode"] is GateMode.ARCHITECTURE
        assert r["mode"] is tr.TrainMode.MSE
        r = tr.variant_recipe("soft2")
        assert r["mode"] is tr.TrainMode.MONO_SOFT_CONVEX
        assert tr.variant_recipe("soft1")["gate_mode"] is GateMode.SOFT
        with pytest.raises(ValueError, match="unknown variant"):
            tr.variant_recipe("taylor3")

    def test_build_shapes_hvac(self):
        b = pl.hvac_benchmark(seed=0)
        m = tr.build_variant("taylor1", b.plant.mono_spec(), b.train, 32, seed=0)
        assert isinstance(m, MtnnModel)
        assert m.nx == 1 and m.n == 3
        assert m.nets[0].layer_dims == [3, 32, 3]

    def test_build_baseline_kind(self):
        b = pl.hvac_benchmark(seed=0)
        m = tr.build_variant("baseline", b.plant.mono_spec(), b.train, 32, seed=0)
        assert isinstance(m, BaselineModel)
        assert m.net.layer_dims == [3, 32, 1]

    def test_rows_anchored_at_least_squares(self):
        b = pl.hvac_benchmark(seed=0)
        spec = b.plant.mono_spec()
        m = tr.build_variant("taylor1", spec, b.train, 8, seed=1)
        Zp, Zc, Xn = pl.transitions_to_arrays(b.train)
        row0, *_ = np.linalg.lstsq(Zc - Zp, Xn[:, 0] - Zc[:, 0], rcond=None)
        np.testing.assert_allclose(m.nets[0].out_shift, row0)

    def test_gated_anchor_clamped_to_tag_sign(self):
        # plant moves opposite its declared tag: x' = x - 0.3 du, tag "+"
        rng = np.random.default_rng(0)
        Zp = rng.uniform(0, 1, size=(60, 2))
        Zc = Zp + rng.uniform(-0.5, 0.5, size=(60, 2))
        Xn = (Zc[:, :1] - 0.3 * (Zc[:, 1:] - Zp[:, 1:]))
        data = [pl.Transition(Zp[i], Zc[i], Xn[i]) for i in range(60)]
        spec = ct.MonoSpec.from_symbols([".+"])
        gated = tr.build_variant("mono1", spec, data, 4, seed=0)
        plain = tr.build_variant("taylor1", spec, data, 4, seed=0)
        assert plain.nets[0].out_shift[1] < 0  # the honest estimate
        assert gated.nets[0].out_shift[1] == tr.GATE_ANCHOR_FLOOR
        # untagged entry keeps the least-squares value
        assert gated.nets[0].out_shift[0] == plain.nets[0].out_shift[0]
        assert np.array_equal(gated.nets[0].biases[-1], plain.nets[0].biases[-1])

    def test_decreasing_anchor_mirrored_to_raw(self):
        # gate emits -relu(raw), so a decreasing entry anchors raw at +|row|
        b = pl.hvac_benchmark(seed=0)
        spec = b.plant.mono_spec()  # "++-": mdot column decreasing
        gated = tr.build_variant("mono1", spec, b.train, 8, seed=1)
        plain = tr.build_variant("taylor1", spec, b.train, 8, seed=1)
        assert plain.nets[0].out_shift[2] < -5  # strongly negative partial
        np.testing.assert_allclose(
            gated.nets[0].out_shift[2], -plain.nets[0].out_shift[2]
        )

    def test_standardization_fitted(self):
        b = pl.hvac_benchmark(seed=0)
        m = tr.build_variant("taylor1", b.plant.mono_spec(), b.train, 8, seed=0)
        Zp, _, _ = pl.transitions_to_arrays(b.train)
        np.testing.assert_allclose(m.nets[0].in_shift, Zp.mean(axis=0))

    def test_spec_mismatch_rejected(self):
        b = pl.hvac_benchmark(seed=0)
        with pytest.raises(ValueError, match="spec"):
            tr.build_variant("taylor1", ct.MonoSpec.free(2, 4), b.train, 8, seed=0)

    def test_train_variant_wraps_baseline(self):
        b = pl.hvac_benchmark(seed=0)
        m, hist = tr.train_variant("baseline", b.plant.mono_spec(), b.train[:40],
                                   seed=0, epochs=5)
        assert isinstance(m, BaselineModel)
        assert len(hist.total) == 5

    def test_train_variant_matches_manual_path(self):
        b = pl.hvac_benchmark(seed=0)
        spec = b.plant.mono_spec()
        via_helper, _ = tr.train_variant("taylor1", spec, b.train[:40],
                                         seed=3, epochs=8)
        model = tr.build_variant("taylor1", spec, b.train[:40],
                                 width=tr.STUDY_WIDTH, seed=3)
        cfg = tr.TrainConfig(seed=3, epochs=8,
                             learning_rate=tr.STUDY_LEARNING_RATE,
                             weight_decay=tr.STUDY_WEIGHT_DECAY)
        manual, _ = tr.train(model, b.train[:40], cfg)
        for a, m_ in zip(flat_params(via_helper), flat_params(manual)):
            np.testing.assert_array_equal(a, m_)

    def test_trained_gated_model_sign_conformance(self):
        b = pl.hvac_benchmark(seed=1)
        spec = b.plant.mono_spec()
        model = tr.build_variant("mono1", spec, b.train[:60], 8, seed=2)
        cfg = tr.TrainConfig(epochs=150, seed=2)
        trained, _ = tr.train(model, b.train[:60], cfg)
        from mtnn import model as md
        rng = np.random.default_rng(0)
        Z = rng.uniform([60, 50, 0], [80, 60, 1], size=(10_000, 3))
        J = md.jacobian_matrix_batch(trained, Z)
        assert (J[:, :, spec.tags[0] == ct.INCREASING] >= 0).all()
        assert (J[:, :, spec.tags[0] == ct.DECREASING] <= 0).all()


class TestConfig:
    def test_from_dict(self):
        cfg = tr.TrainConfig.from_dict(
            {"learning_rate": 3e-3, "mode": "mono_soft",
             "penalty": {"lam_inc": 2.0, "gamma": 0.5}}
        )
        assert cfg.mode is tr.TrainMode.MONO_SOFT
        assert cfg.penalty.lam_inc == 2.0

    def test_unknown_key_named(self):
        with pytest.raises(ValueError, match="lr"):
            tr.TrainConfig.from_dict({"lr": 1e-3})

    def test_bad_values(self):
        with pytest.raises(ValueError):
            tr.TrainConfig(learning_rate=0.0)
        with pytest.raises(ValueError):
            tr.TrainConfig(beta1=1.0)


class TestLrSweep:
    def test_picks_lower_validation_mse(self):
        prob = TestTrain().linear_problem(B=40)

        def build():
            return TestTrain().linear_model(seed=3)

        cfg = tr.TrainConfig(epochs=200, seed=0)
        model, hist, rate, report = tr.lr_sweep(build, prob, cfg, rates=(3e-2, 1e-9))
        assert rate == 3e-2
        assert set(report) == {3e-2, 1e-9}
        assert report[3e-2] < report[1e-9]
        assert tr.total_loss(model, prob, cfg) < 1e-6

    def test_too_small_split_rejected(self):
        prob = TestTrain().linear_problem(B=2)
        with pytest.raises(ValueError):
            tr.lr_sweep(lambda: TestTrain().linear_model(), prob, tr.TrainConfig(epochs=1))
