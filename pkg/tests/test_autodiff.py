import numpy as np
import pytest

from physiocl import autodiff as ad


def test_gradcheck_every_primitive():
    worst = ad.gradcheck_all(n_seeds=5)
    assert worst, "no primitives registered"
    bad = {k: v for k, v in worst.items() if v >= 1e-4}
    assert not bad, f"primitives over tolerance: {bad}"


def test_grad_check_quadratic_is_tight():
    rng = np.random.default_rng(0)
    x = ad.Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    err = ad.grad_check(lambda x: ad.reduce_sum(ad.hadamard(x, x)), [x])
    assert err < 1e-7


def test_grad_check_skips_relu_kink_at_zero():
    x = ad.Tensor(np.array([0.0, 1.0, -2.0, 0.5]), requires_grad=True)
    err = ad.grad_check(lambda x: ad.reduce_sum(ad.relu(x)), [x])
    assert err < 1e-7  # the exactly-zero component is excluded, the rest are exact


def test_softmax_symmetric_pair():
    out = ad.softmax(ad.tensor([0.0, 0.0]), axis=0)
    np.testing.assert_allclose(out.data, [0.5, 0.5])


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(1)
    out = ad.softmax(ad.tensor(rng.standard_normal((5, 7))), axis=1)
    np.testing.assert_allclose(out.data.sum(axis=1), np.ones(5), atol=1e-12)


def test_relu_backward_definition():
    x = ad.Tensor(np.array([-1.0, 2.0]), requires_grad=True)
    out = ad.reduce_sum(ad.relu(x))  # upstream gradient of ones
    out.backward()
    np.testing.assert_allclose(x.grad, [0.0, 1.0])


def test_batch_norm_train_standardizes():
    rng = np.random.default_rng(2)
    x = ad.tensor(rng.standard_normal((64, 5)) * 3.0 + 1.5)
    gamma = ad.tensor(np.ones(5))
    beta = ad.tensor(np.zeros(5))
    out = ad.batch_norm(x, gamma, beta, ad.BatchNormState(5), train=True)
    np.testing.assert_allclose(out.data.mean(axis=0), np.zeros(5), atol=1e-7)
    np.testing.assert_allclose(out.data.var(axis=0), np.ones(5), atol=1e-3)


def test_batch_norm_eval_uses_running_stats_only():
    state = ad.BatchNormState(3)
    state.running_mean = np.array([1.0, 2.0, 3.0])
    state.running_var = np.array([4.0, 4.0, 4.0])
    x = ad.tensor([[1.0, 2.0, 3.0], [3.0, 4.0, 5.0]])
    out = ad.batch_norm(x, ad.tensor(np.ones(3)), ad.tensor(np.zeros(3)), state, train=False)
    expected = (x.data - state.running_mean) / np.sqrt(4.0 + state.eps)
    np.testing.assert_allclose(out.data, expected)
    # eval mode must not touch the stored statistics
    np.testing.assert_allclose(state.running_mean, [1.0, 2.0, 3.0])


def test_batch_norm_train_needs_two_rows():
    x = ad.tensor(np.ones((1, 3)))
    with pytest.raises(ValueError):
        ad.batch_norm(x, ad.tensor(np.ones(3)), ad.tensor(np.zeros(3)),
                      ad.BatchNormState(3), train=True)


def test_dropout_probability_range_and_determinism():
    x = ad.tensor(np.ones((4, 4)))
    with pytest.raises(ValueError):
        ad.dropout(x, 1.0, np.random.default_rng(0), train=True)
    with pytest.raises(ValueError):
        ad.dropout(x, -0.1, np.random.default_rng(0), train=True)
    a = ad.dropout(x, 0.5, np.random.default_rng(3), train=True)
    b = ad.dropout(x, 0.5, np.random.default_rng(3), train=True)
    np.testing.assert_array_equal(a.data, b.data)
    assert ad.dropout(x, 0.5, None, train=False) is x


def test_matmul_shape_validation():
    a = ad.tensor(np.ones((2, 3)))
    b = ad.tensor(np.ones((4, 2)))
    with pytest.raises(ValueError):
        ad.matmul(a, b)
    with pytest.raises(ValueError):
        ad.hadamard(a, ad.tensor(np.ones((3, 2))))
    with pytest.raises(ValueError):
        ad.add(a, ad.tensor(np.ones((2, 4))))


def test_backward_requires_scalar():
    x = ad.Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ValueError):
        ad.relu(x).backward()


def test_grad_accumulates_across_uses():
    x = ad.Tensor(np.array([1.0, 2.0]), requires_grad=True)
    out = ad.reduce_sum(ad.add(x, x))
    out.backward()
    np.testing.assert_allclose(x.grad, [2.0, 2.0])


def test_checkpoint_roundtrip(tmp_path):
    from physiocl.checkpoint import load_arrays, save_arrays
    rng = np.random.default_rng(4)
    arrays = {
        "enc.w": rng.standard_normal((3, 4)).astype(np.float32),
        "enc.b": rng.standard_normal(4).astype(np.float32),
        "scalar": np.float32(2.5).reshape(()),
    }
    path = tmp_path / "params.ckpt"
    save_arrays(path, arrays)
    loaded = load_arrays(path)
    assert set(loaded) == set(arrays)
    for k in arrays:
        np.testing.assert_array_equal(loaded[k], np.asarray(arrays[k], dtype=np.float32))
    # identical state must produce identical bytes
    path2 = tmp_path / "params2.ckpt"
    save_arrays(path2, arrays)
    assert path.read_bytes() == path2.read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    from physiocl.checkpoint import CheckpointError, load_arrays
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(CheckpointError):
        load_arrays(bad)
    with pytest.raises(FileNotFoundError):
        load_arrays(tmp_path / "missing.ckpt")
