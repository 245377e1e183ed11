"""Plain and factored MLPs: forward semantics, member isolation, rank-one
averaging against a per-element loop oracle, and checkpoint round trips."""

import numpy as np
import pytest

import distilab.autodiff as ad
from distilab.autodiff import Tensor
from distilab.nets import (BATCH_ENSEMBLE, BEMLP, CheckpointError, DenseLayer,
                           MLP, ModelSpec, average_rank_one, build_be,
                           build_plain, checkpoint_load, checkpoint_save,
                           materialize_member)
from distilab.seeding import rng_stream
from test_autodiff import check_grad


def _spec(hidden=(16,)):
    return ModelSpec(2, 3, hidden)


class TestModelSpec:
    def test_validation(self):
        with pytest.raises(ValueError):
            ModelSpec(0, 3, (8,))
        with pytest.raises(ValueError):
            ModelSpec(2, 1, (8,))
        with pytest.raises(ValueError):
            ModelSpec(2, 3, ())
        with pytest.raises(ValueError):
            ModelSpec(2, 3, (8,), kind=BATCH_ENSEMBLE)  # members missing


class TestForwardPlain:
    def test_zero_network_gives_zero_logits(self):
        model = build_plain(_spec(), rng_stream(0, "init"))
        for layer in model.layers:
            layer.weight.data[:] = 0.0
            layer.bias.data[:] = 0.0
        out = model.forward(Tensor(np.ones((4, 2))))
        assert np.array_equal(out.data, np.zeros((4, 3)))

    def test_single_linear_layer_composition(self):
        # relu hidden set to identity passthrough makes the net affine:
        # fix hidden weight to the (padded) identity, zero bias
        rng = np.random.default_rng(0)
        model = build_plain(ModelSpec(3, 2, (3,)), rng_stream(1, "init"))
        model.layers[0].weight.data[:] = np.eye(3)
        model.layers[0].bias.data[:] = 10.0  # keep relu inactive region away
        w = rng.normal(size=(2, 3))
        b = rng.normal(size=2)
        model.layers[1].weight.data[:] = w
        model.layers[1].bias.data[:] = b
        x = np.abs(rng.normal(size=(5, 3)))
        expected = (x + 10.0) @ w.T + b
        np.testing.assert_allclose(model.forward(Tensor(x)).data, expected, atol=1e-12)

    def test_input_gradient_finite_difference(self):
        model = build_plain(ModelSpec(2, 3, (16,)), rng_stream(2, "init"))

        def build(x):
            return ad.sum(ad.softmax_temp(model.forward(x), 2.0))

        # softmax rows sum to one so perturb a weighted readout instead
        w = np.random.default_rng(3).normal(size=(4, 3))

        def build_weighted(x):
            return ad.sum(ad.mul(Tensor(w), ad.softmax_temp(model.forward(x), 2.0)))

        check_grad(build_weighted, [np.random.default_rng(4).normal(size=(4, 2))],
                   rel_tol=1e-4)

    def test_input_shape_check(self):
        model = build_plain(_spec(), rng_stream(0, "init"))
        with pytest.raises(Exception):
            model.forward(Tensor(np.ones((4, 5))))


class TestForwardMember:
    def test_ones_factors_match_shared_network(self):
        spec = _spec()
        be = build_be(spec, rng_stream(3, "init"), "ones", members=3)
        plain = MLP(spec.as_plain(), [DenseLayer(Tensor(l.shared.data, requires_grad=True),
                                                 Tensor(l.bias[0].data, requires_grad=True))
                                      for l in be.layers])
        x = np.random.default_rng(5).normal(size=(6, 2))
        ref = plain.predict_logits(x)
        for m in range(3):
            np.testing.assert_array_equal(be.predict_member_logits(m, x), ref)

    def test_zero_r_leaves_only_biases(self):
        be = build_be(_spec(), rng_stream(4, "init"), "ones", members=2)
        for l in be.layers:
            l.r[0].data[:] = 0.0
            l.bias[0].data[:] = np.arange(l.bias[0].data.shape[0], dtype=float)
        x = np.random.default_rng(6).normal(size=(4, 2))
        out = be.predict_member_logits(0, x)
        # every row identical: input influence is annihilated
        assert np.ptp(out, axis=0).max() == 0.0

    def test_materialization_oracle(self):
        be = build_be(_spec((8, 8)), rng_stream(7, "init"), "random_sign", members=2)
        for l in be.layers:
            for m in range(2):
                l.r[m].data[:] += np.random.default_rng(m).normal(size=l.r[m].data.shape) * 0.1
        x = np.random.default_rng(8).normal(size=(10, 2))
        for m in range(2):
            direct = be.predict_member_logits(m, x)
            materialized = materialize_member(be, m).predict_logits(x)
            assert np.abs(direct - materialized).max() < 1e-12

    def test_member_index_range(self):
        be = build_be(_spec(), rng_stream(9, "init"), "ones", members=2)
        with pytest.raises(IndexError):
            be.forward_member(2, Tensor(np.ones((1, 2))))

    def test_member_isolation_in_backward(self):
        be = build_be(_spec(), rng_stream(10, "init"), "random_sign", members=3)
        x = Tensor(np.random.default_rng(11).normal(size=(5, 2)))
        loss = ad.sum(be.forward_member(1, x))
        loss.backward()
        for l in be.layers:
            for m in (0, 2):
                assert l.r[m].grad is None or not l.r[m].grad.any()
                assert l.s[m].grad is None or not l.s[m].grad.any()
            assert l.r[1].grad is not None and l.r[1].grad.any()

    def test_shared_accumulation_equals_sum_of_member_grads(self):
        be = build_be(_spec(), rng_stream(12, "init"), "random_sign", members=2)
        x_np = np.random.default_rng(13).normal(size=(4, 2))
        separate = []
        for m in range(2):
            ad.sum(be.forward_member(m, Tensor(x_np))).backward()
            separate.append([l.shared.grad.copy() for l in be.layers])
            for p in be.parameters():
                p.zero_grad()
        x = Tensor(x_np)
        total = ad.add(ad.sum(be.forward_member(0, x)), ad.sum(be.forward_member(1, x)))
        total.backward()
        for i, l in enumerate(be.layers):
            np.testing.assert_allclose(l.shared.grad, separate[0][i] + separate[1][i],
                                       atol=1e-12)


class TestAverageRankOne:
    def test_identical_members_equal_any_member(self):
        be = build_be(_spec(), rng_stream(14, "init"), "ones", members=4)
        rng = np.random.default_rng(15)
        for l in be.layers:
            rv = rng.normal(size=l.r[0].data.shape)
            sv = rng.normal(size=l.s[0].data.shape)
            for m in range(4):
                l.r[m].data[:] = rv
                l.s[m].data[:] = sv
        x = rng.normal(size=(5, 2))
        np.testing.assert_allclose(average_rank_one(be).predict_logits(x),
                                   be.predict_member_logits(0, x), atol=1e-12)

    def test_ones_init_average_is_shared_network(self):
        be = build_be(_spec(), rng_stream(16, "init"), "ones", members=3)
        avg = average_rank_one(be)
        for l_avg, l_be in zip(avg.layers, be.layers):
            np.testing.assert_array_equal(l_avg.weight.data, l_be.shared.data)

    def test_elementwise_loop_oracle(self):
        be = build_be(_spec((8,)), rng_stream(17, "init"), "random_sign", members=3)
        rng = np.random.default_rng(18)
        for l in be.layers:
            for m in range(3):
                l.r[m].data[:] += 0.3 * rng.normal(size=l.r[m].data.shape)
                l.s[m].data[:] += 0.3 * rng.normal(size=l.s[m].data.shape)
        avg = average_rank_one(be)
        for l_avg, l_be in zip(avg.layers, be.layers):
            out_dim, in_dim = l_be.shared.data.shape
            expect = np.zeros((out_dim, in_dim))
            for i in range(out_dim):
                for j in range(in_dim):
                    acc = 0.0
                    for m in range(3):
                        acc += l_be.r[m].data[i] * l_be.s[m].data[j]
                    expect[i, j] = l_be.shared.data[i, j] * acc / 3
            np.testing.assert_allclose(l_avg.weight.data, expect, atol=1e-15)

    def test_single_member_average_is_that_member(self):
        be = build_be(_spec(), rng_stream(19, "init"), "random_sign", members=1)
        x = np.random.default_rng(20).normal(size=(3, 2))
        np.testing.assert_allclose(average_rank_one(be).predict_logits(x),
                                   be.predict_member_logits(0, x), atol=1e-14)


class TestCheckpoints:
    def test_round_trip_is_byte_identical(self, tmp_path):
        model = build_plain(_spec((8, 8)), rng_stream(21, "init"))
        p1 = tmp_path / "a.json"
        p2 = tmp_path / "b.json"
        checkpoint_save(model, p1)
        loaded = checkpoint_load(p1)
        checkpoint_save(loaded, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_round_trip_factored(self, tmp_path):
        model = build_be(_spec(), rng_stream(22, "init"), "random_sign", members=2)
        p1 = tmp_path / "a.json"
        checkpoint_save(model, p1)
        loaded = checkpoint_load(p1)
        assert isinstance(loaded, BEMLP)
        x = np.random.default_rng(23).normal(size=(4, 2))
        for m in range(2):
            np.testing.assert_array_equal(loaded.predict_member_logits(m, x),
                                          model.predict_member_logits(m, x))

    def test_forward_identical_after_load(self, tmp_path):
        model = build_plain(_spec(), rng_stream(24, "init"))
        path = tmp_path / "m.json"
        checkpoint_save(model, path)
        x = np.random.default_rng(25).normal(size=(6, 2))
        np.testing.assert_array_equal(checkpoint_load(path).predict_logits(x),
                                      model.predict_logits(x))

    def test_class_count_mismatch_rejected(self, tmp_path):
        model = build_plain(_spec(), rng_stream(26, "init"))
        path = tmp_path / "m.json"
        checkpoint_save(model, path)
        with pytest.raises(CheckpointError):
            checkpoint_load(path, expected_spec=ModelSpec(2, 5, (16,)))

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            checkpoint_load(tmp_path / "nope.json")

    def test_version_mismatch(self, tmp_path):
        model = build_plain(_spec(), rng_stream(27, "init"))
        path = tmp_path / "m.json"
        checkpoint_save(model, path)
        doc = path.read_text().replace('"format_version": 1', '"format_version": 9')
        path.write_text(doc)
        with pytest.raises(CheckpointError):
            checkpoint_load(path)

    def test_dirichlet_head_round_trips(self, tmp_path):
        model = build_plain(_spec(), rng_stream(28, "init"), head="dirichlet")
        path = tmp_path / "m.json"
        checkpoint_save(model, path)
        assert checkpoint_load(path).head == "dirichlet"
