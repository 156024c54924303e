import numpy as np
import pytest

from r2lab import tensor as T
from r2lab.errors import ConfigError, ConsistencyError
from r2lab.models import Model, build, cnn, mlp
from r2lab.tensor import Tensor


def test_mlp_layout():
    m = mlp(seed=0)
    assert [l.name for l in m.layers] == ["fc1", "act1", "fc2", "act2", "fc3"]
    assert [w.shape for w in m.weights().values()] == [(784, 128), (128, 64), (64, 10)]
    assert [n for n, _ in m.named_parameters()][:2] == ["fc1.weight", "fc1.bias"]
    out = m(np.zeros((3, 1, 28, 28)))
    assert out.shape == (3, 10)


def test_cnn_forward_and_backward(rng):
    m = cnn((1, 12, 12), (4, 6), 5, seed=1)
    x = rng.random((2, 1, 12, 12))
    loss = T.softmax_ce(m(x), np.array([1, 4]))
    T.backward(loss)
    assert all(p.grad is not None and p.grad.shape == p.shape for p in m.parameters())


def test_same_seed_same_init():
    a, b = mlp(seed=5).state(), mlp(seed=5).state()
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_spec_round_trip():
    for m in (mlp(seed=0), cnn(seed=0)):
        back = Model.from_spec(m.spec())
        assert back.spec() == m.spec()
        back.load_state(m.state())
        x = np.random.default_rng(0).random((2, 1, 28, 28))
        np.testing.assert_array_equal(back(x).data, m(x).data)


def test_load_state_checks():
    m = mlp(seed=0)
    with pytest.raises(ConsistencyError):
        m.load_state({})
    st = m.state()
    st["fc1.bias"] = np.zeros(3)
    with pytest.raises(ConsistencyError):
        m.load_state(st)


def test_weight_fn_hook_sees_every_weight_layer():
    seen = []

    def hook(name, w):
        seen.append(name)
        return w

    mlp(seed=0)(np.zeros((1, 784)), weight_fn=hook)
    assert seen == ["fc1", "fc2", "fc3"]


def test_build_errors():
    with pytest.raises(ConfigError):
        build("resnet", (1, 28, 28), 10)
    assert build("cnn", (1, 28, 28), 10).arch == "cnn-16-32"
