"""MLP container, Adam, schedule, and checkpoint round trips."""
import numpy as np
import pytest

from aecnn import autodiff as ad
from aecnn import nn


def rng(seed=0):
    return np.random.default_rng(seed)


class TestMlp:
    def test_registers_parameters(self):
        store = {}
        mlp = nn.Mlp((3, 8, 5), rng(), store, "probe")
        assert set(store) == {"probe.w0", "probe.b0", "probe.w1", "probe.b1"}
        assert store["probe.w0"].values.shape == (3, 8)
        assert mlp.in_width == 3 and mlp.out_width == 5

    def test_forward_matches_manual(self):
        store = {}
        mlp = nn.Mlp((2, 4, 3), rng(1), store, "m")
        x = rng(2).normal(size=(6, 2))
        got = mlp(ad.constant(x)).values
        h = np.maximum(x @ store["m.w0"].values + store["m.b0"].values, 0.0)
        want = h @ store["m.w1"].values + store["m.b1"].values
        assert np.allclose(got, want, atol=1e-15)

    def test_output_layer_has_no_relu(self):
        store = {}
        mlp = nn.Mlp((2, 2), rng(3), store, "m")
        x = -10 * np.ones((4, 2))
        out = mlp(ad.constant(x)).values
        assert (out < 0).any()  # a relu'd output could never be negative

    def test_normalization_layers(self):
        store = {}
        mlp = nn.Mlp((3, 6, 4), rng(4), store, "m", normalize=True)
        assert "m.gamma0" in store and "m.beta0" in store
        assert "m.gamma1" not in store  # never on the output layer
        x = rng(5).normal(size=(2, 10, 3))
        out = mlp(ad.constant(x), set_axes=(1,))
        assert out.shape == (2, 10, 4)

    def test_rejects_bad_widths(self):
        with pytest.raises(ValueError):
            nn.Mlp((3,), rng(), {}, "m")
        with pytest.raises(ValueError):
            nn.Mlp((3, 0, 2), rng(), {}, "m")

    def test_init_reproducible(self):
        a, b = {}, {}
        nn.Mlp((3, 5, 2), rng(7), a, "m")
        nn.Mlp((3, 5, 2), rng(7), b, "m")
        for k in a:
            assert np.array_equal(a[k].values, b[k].values)


class TestAdam:
    def test_single_step_matches_hand_formula(self):
        p = ad.parameter(np.array([1.0, -2.0]), name="p")
        p.grad = np.array([0.5, -0.25])
        params = {"p": p}
        state = nn.adam_init(params)
        nn.adam_step(params, state, lr=0.1)
        g = np.array([0.5, -0.25])
        m = 0.1 * g
        v = 0.001 * g * g
        mhat = m / (1 - 0.9)
        vhat = v / (1 - 0.999)
        want = np.array([1.0, -2.0]) - 0.1 * mhat / (np.sqrt(vhat) + 1e-8)
        assert np.allclose(p.values, want, atol=1e-15)
        assert state.step == 1

    def test_first_step_is_signed_lr(self):
        # With bias correction, step one moves by ~lr in the -sign(g) direction.
        p = ad.parameter(np.array([0.0]))
        p.grad = np.array([3.7])
        state = nn.adam_init({"p": p})
        nn.adam_step({"p": p}, state, lr=0.01)
        assert p.values[0] == pytest.approx(-0.01, rel=1e-6)

    def test_two_steps_match_reference_loop(self):
        g0 = rng(8)
        p = ad.parameter(g0.normal(size=(3, 2)))
        start = p.values.copy()
        grads = [g0.normal(size=(3, 2)) for _ in range(2)]
        state = nn.adam_init({"p": p})
        for gr in grads:
            p.grad = gr.copy()
            nn.adam_step({"p": p}, state, lr=0.05)
        # Plain-python reference.
        val = start.copy()
        m = np.zeros_like(val)
        v = np.zeros_like(val)
        for t, gr in enumerate(grads, start=1):
            m = 0.9 * m + 0.1 * gr
            v = 0.999 * v + 0.001 * gr * gr
            val = val - 0.05 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        assert np.allclose(p.values, val, atol=1e-14)

    def test_zero_grad_leaves_fresh_params_unchanged(self):
        p = ad.parameter(np.array([1.5]))
        state = nn.adam_init({"p": p})
        nn.adam_step({"p": p}, state, lr=0.1)  # grad is None -> zero
        assert np.array_equal(p.values, [1.5])


class TestSchedule:
    def test_paper_scale_boundaries(self):
        assert nn.lr_schedule(0) == pytest.approx(1e-3)
        assert nn.lr_schedule(99) == pytest.approx(1e-3)
        assert nn.lr_schedule(100) == pytest.approx(2e-4)
        assert nn.lr_schedule(199) == pytest.approx(2e-4)
        assert nn.lr_schedule(200) == pytest.approx(4e-5)
        assert nn.lr_schedule(249) == pytest.approx(4e-5)

    def test_desk_scale_boundaries(self):
        lr = lambda e: nn.lr_schedule(e, boundaries=(24, 48))
        assert lr(23) == pytest.approx(1e-3)
        assert lr(24) == pytest.approx(2e-4)
        assert lr(48) == pytest.approx(4e-5)

    def test_rejects_negative_epoch(self):
        with pytest.raises(ValueError):
            nn.lr_schedule(-1)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        g = rng(9)
        arrays = {
            "scalar": np.array(3.141592653589793),
            "vec": g.normal(size=5),
            "mat": g.normal(size=(2, 4)),
            "cube": g.normal(size=(2, 3, 4)),
            "weird/name.w0": g.normal(size=(1, 1)),
        }
        path = tmp_path / "model.ckpt"
        nn.save_checkpoint(path, arrays)
        back = nn.load_checkpoint(path)
        assert list(back) == list(arrays)  # order preserved
        for k in arrays:
            assert back[k].shape == np.asarray(arrays[k]).shape
            assert back[k].tobytes() == np.asarray(arrays[k], dtype="<f8").tobytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOTAEC" + b"\x00" * 16)
        with pytest.raises(nn.CheckpointError):
            nn.load_checkpoint(path)

    def test_truncation_reports_position(self, tmp_path):
        path = tmp_path / "model.ckpt"
        nn.save_checkpoint(path, {"w": np.arange(6.0).reshape(2, 3)})
        blob = path.read_bytes()
        for cut in (7, 10, 12, 20, len(blob) - 1):
            short = tmp_path / f"cut{cut}.ckpt"
            short.write_bytes(blob[:cut])
            with pytest.raises(nn.CheckpointError) as err:
                nn.load_checkpoint(short)
            assert "byte" in str(err.value)

    def test_save_load_save_is_stable(self, tmp_path):
        g = rng(10)
        arrays = {"a": g.normal(size=(3, 3)), "b": g.normal(size=2)}
        p1 = tmp_path / "one.ckpt"
        p2 = tmp_path / "two.ckpt"
        nn.save_checkpoint(p1, arrays)
        nn.save_checkpoint(p2, nn.load_checkpoint(p1))
        assert p1.read_bytes() == p2.read_bytes()
