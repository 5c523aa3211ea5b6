import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ew import autograd as ag
from ew.errors import DegenerateNormError, ShapeError
from ew.verify import gradcheck


class TestForwardExamples:
    def test_matmul_identity(self):
        eye = ag.constant(np.eye(2))
        assert np.array_equal(ag.matmul(eye, eye).data, np.eye(2))

    def test_matmul_hand_arithmetic(self):
        a = ag.constant([[1.0, 2.0], [3.0, 4.0]])
        b = ag.constant([[1.0], [1.0]])
        assert np.array_equal(ag.matmul(a, b).data, [[3.0], [7.0]])

    def test_matmul_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            ag.matmul(ag.constant(np.zeros((2, 3))), ag.constant(np.zeros((2, 3))))

    def test_softmax_uniform(self):
        out = ag.softmax(ag.constant([0.0, 0.0, 0.0]), axis=0)
        assert np.allclose(out.data, 1.0 / 3.0)

    def test_softmax_stabilized(self):
        out = ag.softmax(ag.constant([1000.0, 0.0]), axis=0).data
        assert np.all(np.isfinite(out))
        assert np.allclose(out, [1.0, 0.0])

    def test_cosine_identical(self):
        v = ag.constant([1.0, 2.0, 3.0])
        assert ag.cosine_similarity(v, v).item() == pytest.approx(1.0)

    def test_cosine_orthogonal(self):
        c = ag.cosine_similarity(ag.constant([1.0, 0.0]), ag.constant([0.0, 1.0]))
        assert c.item() == pytest.approx(0.0)

    def test_cosine_degenerate_norm(self):
        with pytest.raises(DegenerateNormError):
            ag.cosine_similarity(ag.constant([0.0, 0.0]), ag.constant([1.0, 0.0]))


class TestDetach:
    def test_detach_blocks_gradient(self):
        x = ag.param(np.array([1.0, 2.0, 3.0]))
        w = ag.param(np.array([4.0, 5.0, 6.0]))
        with ag.record() as tape:
            loss = ag.tsum(ag.mul(ag.detach(x), w))
        tape.backward(loss)
        assert np.array_equal(x.grad, np.zeros(3))
        assert np.array_equal(w.grad, [1.0, 2.0, 3.0])

    def test_detach_idempotent_values(self):
        x = ag.param(np.array([1.5, -2.0]))
        y = ag.detach(ag.detach(x))
        assert np.array_equal(y.data, x.data)
        assert y.detached

    def test_gradient_wall_through_deep_graph(self):
        # every tensor reachable only through a detached tensor gets zero grad
        a = ag.param(np.array([[1.0, 2.0], [3.0, 4.0]]))
        b = ag.param(np.array([[0.5, 0.5], [0.5, 0.5]]))
        with ag.record() as tape:
            hidden = ag.matmul(a, b)
            walled = ag.detach(ag.silu(hidden))
            loss = ag.tsum(ag.mul(walled, walled))
        tape.backward(loss)
        assert np.array_equal(a.grad, np.zeros((2, 2)))
        assert np.array_equal(b.grad, np.zeros((2, 2)))


class TestGradcheck:
    rng = np.random.default_rng(42)

    @pytest.mark.parametrize("name,build,shapes,tol", [
        ("matmul", lambda p: ag.tsum(ag.matmul(p[0], p[1])), [(5, 4), (4, 3)], 1e-6),
        ("add", lambda p: ag.tsum(ag.mul(ag.add(p[0], p[1]), p[1])), [(3, 4), (3, 4)], 1e-6),
        ("add_broadcast", lambda p: ag.tsum(ag.mul(ag.add(p[0], p[1]), p[0])), [(3, 4), (4,)], 1e-6),
        ("scalar_mul", lambda p: ag.tsum(ag.mul(p[0], 2.5)), [(3, 3)], 1e-6),
        ("elementwise_mul", lambda p: ag.tsum(ag.mul(p[0], p[1])), [(2, 5), (2, 5)], 1e-6),
        ("sum_axis", lambda p: ag.tsum(ag.mul(ag.tsum(p[0], axis=0), ag.tsum(p[0], axis=1))), [(3, 3)], 1e-5),
        ("mean", lambda p: ag.tmean(ag.mul(p[0], p[0])), [(4, 2)], 1e-6),
        ("mean_axes", lambda p: ag.tsum(ag.mul(ag.tmean(p[0], axis=(1, 2)), 3.0)), [(2, 3, 4)], 1e-6),
        ("silu", lambda p: ag.tsum(ag.silu(p[0])), [(6,)], 1e-6),
        ("concat", lambda p: ag.tsum(ag.mul(ag.concat([p[0], p[1]], axis=0),
                                            ag.concat([p[1], p[0]], axis=0))), [(2, 3), (2, 3)], 1e-6),
        ("reshape_transpose", lambda p: ag.tsum(ag.mul(ag.transpose(ag.reshape(p[0], (3, 4)), (1, 0)),
                                                       ag.transpose(ag.reshape(p[0], (3, 4)), (1, 0)))),
         [(12,)], 1e-6),
        ("slice", lambda p: ag.tsum(ag.mul(ag.slice_axis(p[0], 1, 1, 3), 2.0)), [(2, 4)], 1e-6),
        ("cosine", lambda p: ag.cosine_similarity(p[0], p[1]), [(16,), (16,)], 1e-6),
    ])
    def test_op_matches_central_differences(self, name, build, shapes, tol):
        arrays = [self.rng.standard_normal(s) for s in shapes]
        assert gradcheck(build, arrays) < tol

    def test_softmax_gradcheck(self):
        w = ag.constant(self.rng.standard_normal((3, 4)))
        err = gradcheck(lambda p: ag.tsum(ag.mul(ag.softmax(p[0], axis=1), w)),
                        [self.rng.standard_normal((3, 4))])
        assert err < 1e-6

    def test_layer_norm_gradcheck(self):
        w = ag.constant(self.rng.standard_normal((4, 6)))
        err = gradcheck(lambda p: ag.tsum(ag.mul(ag.layer_norm(p[0], p[1], p[2]), w)),
                        [self.rng.standard_normal((4, 6)),
                         self.rng.standard_normal(6), self.rng.standard_normal(6)])
        assert err < 1e-5

    @pytest.mark.parametrize("k,xshape", [(3, (2, 4, 4)), (1, (2, 4, 4)), (3, (2, 3, 3, 2))])
    def test_conv2d_gradcheck(self, k, xshape):
        arrays = [self.rng.standard_normal(xshape),
                  self.rng.standard_normal((3, 2, k, k)),
                  self.rng.standard_normal(3)]
        assert gradcheck(lambda p: ag.tsum(ag.conv2d(p[0], p[1], p[2])), arrays) < 1e-5

    def test_rotate_pairs_gradcheck(self):
        ang = self.rng.standard_normal((5, 4))
        cos, sin = np.cos(ang), np.sin(ang)
        w = ag.constant(self.rng.standard_normal((5, 8)))
        err = gradcheck(lambda p: ag.tsum(ag.mul(ag.rotate_pairs(p[0], cos, sin), w)),
                        [self.rng.standard_normal((5, 8))])
        assert err < 1e-6


class TestTapeSemantics:
    def test_gradient_accumulates_on_reuse(self):
        x = ag.param(np.array(2.0))
        with ag.record() as tape:
            loss = ag.add(ag.mul(x, x), ag.mul(x, 3.0))  # x^2 + 3x
        tape.backward(loss)
        assert x.grad == pytest.approx(2 * 2.0 + 3.0)

    def test_grad_accumulates_across_backwards_until_zeroed(self):
        x = ag.param(np.array(1.0))
        for expected in (2.0, 4.0):
            with ag.record() as tape:
                loss = ag.mul(x, 2.0)
            tape.backward(loss)
            assert x.grad == pytest.approx(expected)
        x.zero_grad()
        assert x.grad is None

    def test_retain_grad_on_intermediate(self):
        x = ag.param(np.array([1.0, 2.0]))
        with ag.record() as tape:
            mid = ag.mul(x, 3.0)
            mid.retain_grad()
            loss = ag.tsum(mid)
        tape.backward(loss)
        assert np.array_equal(mid.grad, [1.0, 1.0])

    def test_no_grad_outputs_are_detached_by_construction(self):
        x = ag.param(np.array([1.0]))
        with ag.no_grad():
            y = ag.mul(x, 2.0)
        assert not y.requires_grad

    def test_tape_replay_is_reverse_topological(self):
        # append order is topological, so each node is consumed exactly once
        x = ag.param(np.array(1.0))
        with ag.record() as tape:
            y = ag.mul(x, 2.0)
            z = ag.add(y, ag.mul(y, 3.0))
        assert [n.op for n in tape.nodes] == ["scalar_mul", "scalar_mul", "add"]
        tape.backward(z)
        assert x.grad == pytest.approx(8.0)

    def test_forward_deterministic(self):
        rng = np.random.default_rng(0)
        a, b = rng.standard_normal((8, 8)), rng.standard_normal((8, 8))
        out1 = ag.silu(ag.matmul(ag.constant(a), ag.constant(b))).data
        out2 = ag.silu(ag.matmul(ag.constant(a), ag.constant(b))).data
        assert np.array_equal(out1, out2)


class TestProperties:
    @given(st.lists(st.floats(-50, 50), min_size=2, max_size=6))
    @settings(max_examples=50, deadline=None)
    def test_softmax_sums_to_one(self, values):
        out = ag.softmax(ag.constant(values), axis=0)
        assert out.data.sum() == pytest.approx(1.0, abs=1e-12)

    @given(st.integers(0, 2**31), st.integers(2, 32))
    @settings(max_examples=50, deadline=None)
    def test_cosine_in_unit_interval(self, seed, n):
        rng = np.random.default_rng(seed)
        c = ag.cosine_similarity(ag.constant(rng.standard_normal(n)),
                                 ag.constant(rng.standard_normal(n)))
        assert -1.0 - 1e-12 <= c.item() <= 1.0 + 1e-12
