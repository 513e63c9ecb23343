import numpy as np
import pytest

from ristrack.autodiff import Tensor, tsum
from ristrack.optim import Adam, AdamState, CheckpointError, adam_step, load_checkpoint, save_checkpoint


def test_zero_gradient_keeps_params():
    p = {"w": np.arange(4, dtype=np.float32)}
    out = adam_step(p, {"w": np.zeros(4, np.float32)}, AdamState(), lr=0.1)
    np.testing.assert_array_equal(out["w"], p["w"])


def test_missing_gradient_keeps_params():
    p = {"w": np.ones(3, np.float32), "b": np.ones(2, np.float32)}
    out = adam_step(p, {"w": np.ones(3, np.float32)}, AdamState(), lr=0.1)
    np.testing.assert_array_equal(out["b"], p["b"])


def test_first_step_is_lr_times_sign():
    p = {"w": np.zeros(3)}
    out = adam_step(p, {"w": np.array([2.0, -0.5, 1e-3])}, AdamState(), lr=0.01, eps=0.0)
    np.testing.assert_allclose(out["w"], [-0.01, 0.01, -0.01])


def test_constant_gradient_limit():
    g = np.array([3.0, -0.2, 40.0])
    p, st = {"w": np.zeros(3)}, AdamState()
    prev = p["w"]
    for _ in range(2000):
        p = adam_step(p, {"w": g}, st, lr=1e-3, eps=1e-12)
        step = p["w"] - prev
        prev = p["w"]
    np.testing.assert_allclose(step, -1e-3 * np.sign(g), rtol=1e-6)


def test_per_name_learning_rates():
    p = {"a": np.zeros(1), "b": np.zeros(1)}
    out = adam_step(p, {"a": np.ones(1), "b": np.ones(1)}, AdamState(), lr={"a": 0.1, "b": 0.001}, eps=0)
    assert out["a"][0] == pytest.approx(-0.1)
    assert out["b"][0] == pytest.approx(-0.001)


def test_adam_minimizes_quadratic():
    x = Tensor(np.array([3.0, -2.0], np.float32), requires_grad=True)
    opt = Adam({"x": x}, lr=0.1)
    for _ in range(300):
        opt.zero_grad()
        loss = tsum(x * x)
        loss.backward()
        opt.step()
    assert np.all(np.abs(x.data) < 0.05)


def test_state_roundtrip(tmp_path):
    st = AdamState()
    adam_step({"w": np.ones(2, np.float32)}, {"w": np.ones(2, np.float32)}, st)
    save_checkpoint(tmp_path / "opt.ck", st.to_arrays(), {"note": "x"})
    arrays, meta = load_checkpoint(tmp_path / "opt.ck")
    back = AdamState.from_arrays(arrays)
    assert back.step == 1 and meta == {"note": "x"}
    np.testing.assert_array_equal(back.m["w"], st.m["w"])
    np.testing.assert_array_equal(back.v["w"], st.v["w"])


def test_checkpoint_errors(tmp_path):
    path = tmp_path / "p.ck"
    save_checkpoint(path, {"a": np.arange(6, dtype=np.float32).reshape(2, 3)})
    arrays, _ = load_checkpoint(path)
    assert arrays["a"].shape == (2, 3) and arrays["a"].dtype == np.float32
    data = bytearray(path.read_bytes())
    bad = tmp_path / "bad.ck"
    bad.write_bytes(bytes(data[:-2]))
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)
    data[-1] ^= 0xFF
    bad.write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(bad)
    bad.write_bytes(b"JUNK" + bytes(data[4:]))
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "none.ck")
