import math

import numpy as np
import pytest

from cmkg import tensor as T
from cmkg.errors import ConfigError, ContractError, DimensionError, LabelError
from cmkg.tensor import Parameter, Tensor

from gradcheck import check, check_op


def naive_matmul(a, b):
    n, k = a.shape
    _, m = b.shape
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


class TestMatmul:
    def test_identity(self):
        out = T.matmul(Tensor([[1, 0], [0, 1]]), Tensor([[3, 4], [5, 6]]))
        assert out.data.tolist() == [[3, 4], [5, 6]]

    def test_scalar_case(self):
        assert T.matmul(Tensor([[2]]), Tensor([[3]])).data.tolist() == [[6]]

    def test_triple_loop_oracle(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, naive_matmul(a, b), atol=1e-12)

    def test_batched(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(2, 3, 4, 5)), rng.normal(size=(5, 6))
        np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, a @ b, atol=1e-12)

    def test_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 2\)"):
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)

    def test_large_logits_do_not_overflow(self):
        with np.errstate(over="raise"):
            out = T.softmax(Tensor([1000.0, 0.0])).data
        assert out[0] == pytest.approx(1.0) and out[1] == pytest.approx(0.0, abs=1e-300)

    def test_direct_evaluation(self):
        e = [math.exp(v) for v in (1, 2, 3)]
        np.testing.assert_allclose(T.softmax(Tensor([1.0, 2.0, 3.0])).data, [v / sum(e) for v in e], atol=1e-9)

    def test_rows_sum_to_one(self):
        x = np.random.default_rng(2).normal(size=(4, 5, 6)) * 10
        np.testing.assert_allclose(T.softmax(Tensor(x), axis=1).data.sum(axis=1), 1.0, atol=1e-12)


class TestElementwise:
    def test_relu(self):
        assert T.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]

    def test_tanh(self):
        assert T.tanh(Tensor(0.0)).item() == 0.0
        assert T.tanh(Tensor(1.0)).item() == pytest.approx(0.7615941559557649, abs=1e-15)

    def test_dispatch(self):
        a, b = Tensor([1.0, 2.0]), Tensor([3.0, 5.0])
        assert T.elementwise("add", a, b).data.tolist() == [4.0, 7.0]
        assert T.elementwise("sub", a, b).data.tolist() == [-2.0, -3.0]
        assert T.elementwise("mul", a, b).data.tolist() == [3.0, 10.0]
        with pytest.raises(ConfigError):
            T.elementwise("div", a, b)

    def test_scalar_operand_allowed(self):
        assert (Tensor([1.0, 2.0]) * 3.0).data.tolist() == [3.0, 6.0]

    def test_implicit_broadcast_rejected(self):
        with pytest.raises(DimensionError):
            T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros(3)))

    def test_explicit_broadcast(self):
        out = T.add(Tensor(np.zeros((2, 3))), T.broadcast_to(Tensor([1.0, 2.0, 3.0]), (2, 3)))
        assert out.data.tolist() == [[1, 2, 3], [1, 2, 3]]


class TestCrossEntropy:
    def test_uniform(self):
        assert T.cross_entropy(Tensor([[0.0, 0.0]]), [0]).item() == pytest.approx(math.log(2), abs=1e-12)

    def test_confident_correct(self):
        assert T.cross_entropy(Tensor([[10.0, -10.0]]), [0]).item() == pytest.approx(0.0, abs=1e-8)

    def test_batch_is_mean_of_examples(self):
        logits = np.array([[1.0, 2.0, 0.5], [0.0, -1.0, 3.0]])
        per = [-(logits[i, t] - math.log(np.exp(logits[i]).sum())) for i, t in enumerate([1, 2])]
        assert T.cross_entropy(Tensor(logits), [1, 2]).item() == pytest.approx(sum(per) / 2, abs=1e-12)

    def test_ignore_index_rows_do_not_count(self):
        logits = np.array([[1.0, 2.0], [5.0, -5.0]])
        full = T.cross_entropy(Tensor(logits[:1]), [0]).item()
        assert T.cross_entropy(Tensor(logits), [0, -100]).item() == pytest.approx(full, abs=1e-15)

    def test_out_of_range_target(self):
        with pytest.raises(LabelError):
            T.cross_entropy(Tensor(np.zeros((1, 3))), [3])


class TestBackward:
    def test_sum_of_squares(self):
        x = Parameter([1.0, 2.0, 3.0], "Head")
        T.new_tape()
        T.backward(T.sum(T.mul(x, x)))
        assert x.grad.tolist() == [2.0, 4.0, 6.0]

    def test_disconnected_parameter_gets_zero(self):
        x, y = Parameter([1.0, 2.0], "Head"), Parameter([5.0], "Visual")
        T.new_tape()
        T.backward(T.sum(x))
        assert y.grad.tolist() == [0.0]

    def test_two_layer_net_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.normal(size=(5, 4)))

        def net(w1, b1, w2):
            h = T.tanh(T.linear(x, w1, b1))
            return T.cross_entropy(T.matmul(h, w2), [0, 1, 2, 1, 0])

        arrays = [rng.normal(size=(4, 6)), rng.normal(size=6), rng.normal(size=(6, 3))]
        assert check(net, arrays) < 1e-5

    def test_gradients_accumulate_across_uses(self):
        x = Parameter([3.0], "Head")
        T.new_tape()
        T.backward(T.sum(x + x + x))
        assert x.grad.tolist() == [3.0]

    def test_non_scalar_loss_rejected(self):
        x = Parameter([1.0, 2.0], "Head")
        T.new_tape()
        with pytest.raises(ContractError):
            T.backward(x * 2.0)

    def test_loss_from_cleared_tape_rejected(self):
        x = Parameter([1.0], "Head")
        T.new_tape()
        loss = T.sum(x * 2.0)
        T.new_tape()
        with pytest.raises(ContractError):
            T.backward(loss)

    def test_tape_cleared_after_backward(self):
        x = Parameter([1.0], "Head")
        tape = T.new_tape()
        T.backward(T.sum(x * 2.0))
        assert len(tape) == 0

    def test_no_grad_records_nothing(self):
        x = Parameter([1.0], "Head")
        tape = T.new_tape()
        with T.no_grad():
            y = x * 2.0
        assert len(tape) == 0 and not y.requires_grad

    def test_item_requires_scalar(self):
        with pytest.raises(ContractError):
            Tensor([1.0, 2.0]).item()


class TestParameter:
    def test_tag_is_immutable(self):
        p = Parameter([1.0], "Visual")
        with pytest.raises(AttributeError):
            p.tag = "Textual"

    def test_unknown_tag_rejected(self):
        with pytest.raises(ConfigError):
            Parameter([1.0], "Audio")


class TestSgdStep:
    def test_direct_rule(self):
        p = Parameter([1.0], "Head")
        p.grad[...] = 0.5
        T.sgd_step([p], 0.1)
        assert p.data.tolist() == [0.95] and p.grad.tolist() == [0.0]

    def test_scaled_decrement(self):
        p = Parameter([0.0], "Visual")
        p.grad[...] = 1.0
        T.sgd_step([p], 0.1, {"Visual": 0.2384})
        assert -p.data[0] == pytest.approx(0.02384, abs=1e-15)

    @pytest.mark.parametrize("scale", [0.0, -0.5, 1.5, float("nan")])
    def test_bad_scale_rejected(self, scale):
        with pytest.raises(ConfigError):
            T.sgd_step([Parameter([1.0], "Visual")], 0.1, {"Visual": scale})

    @pytest.mark.parametrize("lr", [0.0, -1.0, float("inf")])
    def test_bad_lr_rejected(self, lr):
        with pytest.raises(ConfigError):
            T.sgd_step([Parameter([1.0], "Visual")], lr)

    def test_unit_scales_equal_plain_sgd(self):
        rng = np.random.default_rng(4)
        a = [Parameter(rng.normal(size=3), tag) for tag in T.TAGS]
        b = [Parameter(p.data.copy(), p.tag) for p in a]
        for p, q in zip(a, b):
            p.grad[...] = q.grad[...] = rng.normal(size=3)
        T.sgd_step(a, 0.3)
        T.sgd_step(b, 0.3, {tag: 1.0 for tag in T.TAGS})
        for p, q in zip(a, b):
            assert np.array_equal(p.data, q.data)


class TestShapeOps:
    def test_getitem_repeated_index_accumulates(self):
        x = Parameter([1.0, 2.0, 3.0], "Head")
        T.new_tape()
        T.backward(T.sum(T.getitem(x, np.array([0, 0, 2]))))
        assert x.grad.tolist() == [2.0, 0.0, 1.0]

    def test_embedding_repeated_ids(self):
        table = Parameter(np.arange(6.0).reshape(3, 2), "Textual")
        T.new_tape()
        out = T.embedding(table, np.array([[2, 2, 0]]))
        assert out.data.tolist() == [[[4, 5], [4, 5], [0, 1]]]
        T.backward(T.sum(out))
        assert table.grad.tolist() == [[1, 1], [0, 0], [2, 2]]

    def test_layer_norm_statistics(self):
        x = np.random.default_rng(5).normal(size=(4, 8)) * 3 + 2
        out = T.layer_norm(Tensor(x), Tensor(np.ones(8)), Tensor(np.zeros(8))).data
        np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.var(axis=-1), 1.0, rtol=1e-4)

    def test_l2norm_zero_vector_has_zero_subgradient(self):
        x = Parameter(np.zeros(3), "Head")
        T.new_tape()
        T.backward(T.sum(T.l2norm(x)))
        assert x.grad.tolist() == [0.0, 0.0, 0.0]

    def test_broadcast_to_rejects_incompatible(self):
        with pytest.raises(DimensionError):
            T.broadcast_to(Tensor(np.zeros(3)), (2, 4))

    def test_concat_and_split_gradients(self):
        rng = np.random.default_rng(6)
        arrays = [rng.normal(size=(2, 3)), rng.normal(size=(2, 1))]
        assert check_op(lambda a, b: T.concat([a, b], axis=1), arrays, rng) < 1e-5
