import numpy as np
import pytest

from taskfusion import autodiff as ad
from taskfusion.autodiff import Tensor
from taskfusion.networks import NetSpec, init_params, fuse, gen_weights, task_forward
from _utils import fd_grad, max_rel_err

RNG = np.random.default_rng(123)

FUSION = NetSpec("fusion", in_channels=2, hidden_channels=16, num_layers=4, out_channels=1)
TASK = NetSpec("task", in_channels=1, hidden_channels=16, num_layers=4, out_channels=3)
LOSSGEN = NetSpec("lossgen", in_channels=2, hidden_channels=16, num_layers=4, out_channels=2)

TINY_FUSION = NetSpec("fusion", 2, 4, 2, 1)
TINY_TASK = NetSpec("task", 1, 4, 2, 3)
TINY_LOSSGEN = NetSpec("lossgen", 2, 4, 2, 2)


class TestInit:
    def test_deterministic(self):
        a = init_params(FUSION, seed=9)
        b = init_params(FUSION, seed=9)
        assert a.tobytes() == b.tobytes()
        assert a.names() == b.names()

    def test_seed_changes_values(self):
        a = init_params(FUSION, seed=1)
        b = init_params(FUSION, seed=2)
        assert a.tobytes() != b.tobytes()

    def test_lossgen_final_layer_zero(self):
        p = init_params(LOSSGEN, seed=5)
        last_w = p.get("conv3.weight")
        last_b = p.get("conv3.bias")
        assert not last_w.data.any()
        assert not last_b.data.any()
        # earlier layers are not zero
        assert p.get("conv0.weight").data.any()

    def test_param_budget(self):
        total = sum(init_params(s, seed=0).param_count() for s in (FUSION, TASK, LOSSGEN))
        assert total <= 50_000

    def test_invalid_spec(self):
        with pytest.raises(ValueError):
            init_params(NetSpec("fusion", 0, 4, 2, 1), seed=0)
        with pytest.raises(ValueError):
            init_params(NetSpec("fusion", 2, 4, 2, 1, kernel_size=4), seed=0)


class TestFuse:
    def test_shape_and_range(self):
        p = init_params(FUSION, seed=3)
        ia = RNG.uniform(0, 1, size=(32, 32))
        ib = RNG.uniform(0, 1, size=(32, 32))
        out = fuse(Tensor(ia), Tensor(ib), p)
        assert out.shape == (32, 32)
        assert out.data.min() >= 0.0 and out.data.max() <= 1.0

    def test_shape_mismatch(self):
        p = init_params(FUSION, seed=3)
        with pytest.raises(ad.ShapeError):
            fuse(Tensor(np.zeros((8, 8))), Tensor(np.zeros((8, 9))), p)

    def test_gradient_wrt_params(self):
        p = init_params(TINY_FUSION, seed=4)
        ia = RNG.uniform(0, 1, size=(7, 7))
        ib = RNG.uniform(0, 1, size=(7, 7))
        target = p.get("conv0.weight")

        def f(w):
            with ad.Tape():
                q = p.replace_tensors(
                    [Tensor(w) if t is target else t for t in p.tensors()]
                )
                return ad.mean_(fuse(Tensor(ia), Tensor(ib), q)).item()

        with ad.Tape():
            out = ad.mean_(fuse(Tensor(ia), Tensor(ib), p))
            (g,) = ad.grad(out, [target])
        assert max_rel_err(g.data, fd_grad(f, target.data)) <= 1e-5


class TestTaskForward:
    def test_channel_count(self):
        p = init_params(TASK, seed=6)
        out = task_forward(Tensor(RNG.uniform(0, 1, size=(16, 16))), p)
        assert out.shape == (3, 16, 16)

    def test_gradient_wrt_input(self):
        p = init_params(TINY_TASK, seed=8)
        img = RNG.uniform(0, 1, size=(6, 6))
        labels = RNG.integers(0, 3, size=(6, 6))

        def f(x):
            with ad.Tape():
                return ad.cross_entropy0(task_forward(Tensor(x), p), labels).item()

        with ad.Tape():
            t = Tensor(img, watched=True)
            loss = ad.cross_entropy0(task_forward(t, p), labels)
            (g,) = ad.grad(loss, [t])
        assert max_rel_err(g.data, fd_grad(f, img)) <= 1e-5


class TestGenWeights:
    def test_zero_init_gives_half(self):
        p = init_params(LOSSGEN, seed=11)
        ia = RNG.uniform(0, 1, size=(12, 12))
        ib = RNG.uniform(0, 1, size=(12, 12))
        w = gen_weights(Tensor(ia), Tensor(ib), p)
        assert np.array_equal(w.w_a.data, np.full((12, 12), 0.5))
        assert np.array_equal(w.w_b.data, np.full((12, 12), 0.5))

    def test_simplex_holds_for_random_params(self):
        spec = TINY_LOSSGEN
        for seed in range(5):
            p = init_params(spec, seed=seed)
            # randomize the zeroed head so the weights are not trivially half
            ts = p.tensors()
            rng = np.random.default_rng(seed + 100)
            ts[-2] = Tensor(rng.normal(0, 1, size=ts[-2].shape), watched=True)
            ts[-1] = Tensor(rng.normal(0, 1, size=ts[-1].shape), watched=True)
            p = p.replace_tensors(ts)
            ia = rng.uniform(0, 1, size=(9, 9))
            ib = rng.uniform(0, 1, size=(9, 9))
            w = gen_weights(Tensor(ia), Tensor(ib), p)
            assert np.max(np.abs(w.w_a.data + w.w_b.data - 1.0)) <= 1e-12
            assert w.w_a.data.min() >= 0.0 and w.w_b.data.min() >= 0.0

    def test_gradient_wrt_params(self):
        p = init_params(TINY_LOSSGEN, seed=13)
        # non-zero head so the softmax jacobian is exercised off-center
        ts = p.tensors()
        rng = np.random.default_rng(5)
        ts[-2] = Tensor(rng.normal(0, 0.5, size=ts[-2].shape), watched=True)
        ts[-1] = Tensor(rng.normal(0, 0.5, size=ts[-1].shape), watched=True)
        p = p.replace_tensors(ts)
        ia = rng.uniform(0, 1, size=(6, 6))
        ib = rng.uniform(0, 1, size=(6, 6))
        target = p.get("conv0.weight")

        def f(w):
            with ad.Tape():
                q = p.replace_tensors([Tensor(w) if t is target else t for t in p.tensors()])
                return ad.mean_(gen_weights(Tensor(ia), Tensor(ib), q).w_a).item()

        with ad.Tape():
            out = ad.mean_(gen_weights(Tensor(ia), Tensor(ib), p).w_a)
            (g,) = ad.grad(out, [target])
        assert max_rel_err(g.data, fd_grad(f, target.data)) <= 1e-5

    def test_forward_is_deterministic(self):
        p = init_params(LOSSGEN, seed=2)
        ia = RNG.uniform(0, 1, size=(10, 10))
        ib = RNG.uniform(0, 1, size=(10, 10))
        w1 = gen_weights(Tensor(ia), Tensor(ib), p)
        w2 = gen_weights(Tensor(ia), Tensor(ib), p)
        assert w1.w_a.data.tobytes() == w2.w_a.data.tobytes()
