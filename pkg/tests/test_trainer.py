import numpy as np
import pytest

from taskfusion import autodiff as ad
from taskfusion import trainer as tr
from taskfusion.autodiff import Tape, Tensor
from taskfusion.losses import FusionWeights, fusion_loss
from taskfusion.networks import init_params
from taskfusion.synthdata import SceneSpec, ImagePair, gen_dataset
from taskfusion.verify import expansion_hypergradient, fd_hypergradient, max_relative_error

TOY_SPEC = SceneSpec(
    height=8, width=8,
    target_count=(1, 2), target_radius=(1, 2),
    texture_count=(1, 1), texture_size=(3, 4),
)


def toy_cfg(**kw):
    base = dict(
        hidden_channels=2,
        conv_layers=2,
        num_classes=3,
        lr_inner_fusion=0.5,
        lr_inner_task=0.25,
        lr_lossgen=10.0,
        lr_fusion=0.5,
        lr_task=0.25,
        epochs=2,
        meta_steps=2,
        fusion_steps=2,
        batch_size=2,
        seed=0,
    )
    base.update(kw)
    return tr.TrainConfig(**base)


def toy_nets(cfg, seeds=(4, 5, 6), randomize_head=None):
    sf, st, sg = tr.network_specs(cfg)
    tf, tt, tg = init_params(sf, seeds[0]), init_params(st, seeds[1]), init_params(sg, seeds[2])
    if randomize_head is not None:
        rng = np.random.default_rng(randomize_head)
        ts = tg.tensors()
        ts[-2] = Tensor(rng.normal(0, 0.4, size=ts[-2].shape), watched=True)
        ts[-1] = Tensor(rng.normal(0, 0.4, size=ts[-1].shape), watched=True)
        tg = tg.replace_tensors(ts)
    return tf, tt, tg


def toy_data(n=4, seed=1):
    return gen_dataset(TOY_SPEC, n, seed=seed)


class TestSampleMetaSets:
    def test_partition_when_tight(self):
        ds = toy_data(4)
        split = tr.sample_meta_sets(ds, 2, np.random.default_rng(0))
        chosen = {id(p) for p in split.meta_train + split.meta_test}
        assert len(chosen) == 4
        assert chosen == {id(p) for p in ds}

    def test_disjoint_and_sized(self):
        ds = toy_data(12)
        split = tr.sample_meta_sets(ds, 4, np.random.default_rng(3))
        tr_ids = {id(p) for p in split.meta_train}
        ts_ids = {id(p) for p in split.meta_test}
        assert len(tr_ids) == len(ts_ids) == 4
        assert not (tr_ids & ts_ids)

    def test_deterministic(self):
        ds = toy_data(8)
        a = tr.sample_meta_sets(ds, 3, np.random.default_rng(7))
        b = tr.sample_meta_sets(ds, 3, np.random.default_rng(7))
        assert [id(p) for p in a.meta_train] == [id(p) for p in b.meta_train]
        assert [id(p) for p in a.meta_test] == [id(p) for p in b.meta_test]

    def test_too_small(self):
        with pytest.raises(ValueError):
            tr.sample_meta_sets(toy_data(4), 3, np.random.default_rng(0))

    def test_every_item_reachable(self):
        # over many resamples every item lands in meta_train at least once
        ds = toy_data(10)
        rng = np.random.default_rng(11)
        seen = set()
        for _ in range(1000):
            split = tr.sample_meta_sets(ds, 2, rng)
            seen.update(id(p) for p in split.meta_train)
            if len(seen) == 10:
                break
        assert len(seen) == 10


class TestInnerUpdate:
    def test_zero_step_keeps_values(self):
        cfg = toy_cfg(lr_inner_fusion=1e-300, lr_inner_task=1e-300)
        tf, tt, tg = toy_nets(cfg)
        inner = tr.inner_update(toy_data()[:2], tf, tt, tg, cfg)
        for a, b in zip(inner.f_prime.tensors(), tf.tensors()):
            assert np.allclose(a.data, b.data, atol=1e-290)

    def test_originals_untouched(self):
        cfg = toy_cfg()
        tf, tt, tg = toy_nets(cfg)
        before_f, before_t = tf.tobytes(), tt.tobytes()
        inner = tr.inner_update(toy_data()[:2], tf, tt, tg, cfg)
        assert tf.tobytes() == before_f
        assert tt.tobytes() == before_t
        assert inner.f_prime.tobytes() != before_f

    def test_matches_hand_computed_update(self):
        # smallest fusion net: one 1x1 conv + bias + sigmoid, intensity term only
        cfg = toy_cfg(hidden_channels=1, conv_layers=1, kernel_size=1, alpha=0.0,
                      lr_inner_fusion=0.3)
        tf, tt, tg = toy_nets(cfg)
        pair = toy_data()[0]
        inner = tr.inner_update([pair], tf, tt, tg, cfg)
        wvec = tf.get("conv0.weight").data.reshape(2)
        b = tf.get("conv0.bias").data[0]
        z = wvec[0] * pair.i_a + wvec[1] * pair.i_b + b
        f = 1.0 / (1.0 + np.exp(-z))
        dl_df = (f - pair.i_a) + (f - pair.i_b)  # w_a = w_b = 1/2
        delta = dl_df * f * (1 - f) / pair.i_a.size
        grads = np.array([(delta * pair.i_a).sum(), (delta * pair.i_b).sum()])
        want_w = wvec - 0.3 * grads
        want_b = b - 0.3 * delta.sum()
        assert np.allclose(inner.f_prime.get("conv0.weight").data.reshape(2), want_w, atol=1e-12)
        assert np.allclose(inner.f_prime.get("conv0.bias").data[0], want_b, atol=1e-12)

    def test_rejects_empty_batch(self):
        cfg = toy_cfg()
        tf, tt, tg = toy_nets(cfg)
        with pytest.raises(ValueError):
            tr.inner_update([], tf, tt, tg, cfg)


class TestOuterUpdate:
    def test_zero_lr_keeps_generator(self):
        cfg = toy_cfg(lr_lossgen=1e-300)
        tf, tt, tg = toy_nets(cfg, randomize_head=9)
        ds = toy_data()
        inner = tr.inner_update(ds[:2], tf, tt, tg, cfg)
        new_g, _ = tr.outer_update(ds[2:], inner.f_prime, inner.t_prime, tg, cfg)
        for a, b in zip(new_g.tensors(), tg.tensors()):
            assert np.allclose(a.data, b.data, atol=1e-290)

    def test_requires_retained_graph(self):
        cfg = toy_cfg()
        tf, tt, tg = toy_nets(cfg)
        ds = toy_data()
        inner = tr.inner_update(ds[:2], tf, tt, tg, cfg, retain=False)
        with pytest.raises(ad.TapeError):
            tr.outer_update(ds[2:], inner.f_prime, inner.t_prime, tg, cfg)

    def test_zero_inner_step_gives_zero_hypergradient(self):
        cfg = toy_cfg(lr_inner_fusion=1e-300)
        tf, tt, tg = toy_nets(cfg, randomize_head=9)
        ds = toy_data()
        hyper = tr.hypergradient(ds[:2], ds[2:], tf, tt, tg, cfg)
        assert max(np.abs(h).max() for h in hyper) <= 1e-290

    def test_hypergradient_matches_full_chain_fd(self):
        cfg = toy_cfg(hidden_channels=1, conv_layers=1, kernel_size=1)
        tf, tt, tg = toy_nets(cfg, randomize_head=2)
        ds = toy_data()
        got = tr.hypergradient(ds[:2], ds[2:], tf, tt, tg, cfg)
        want = fd_hypergradient(ds[:2], ds[2:], tf, tt, tg, cfg)
        assert max_relative_error(got, want) <= 1e-4

    def test_hypergradient_matches_expansion(self):
        cfg = toy_cfg(hidden_channels=1, conv_layers=1, kernel_size=1)
        tf, tt, tg = toy_nets(cfg, randomize_head=2)
        ds = toy_data()
        n_params = sum(p.param_count() for p in (tf, tt, tg))
        assert n_params <= 20
        got = tr.hypergradient(ds[:2], ds[2:], tf, tt, tg, cfg)
        want = expansion_hypergradient(ds[:2], ds[2:], tf, tt, tg, cfg)
        assert max_relative_error(got, want) <= 1e-3


class TestFusionUpdate:
    def test_generator_untouched(self):
        cfg = toy_cfg()
        tf, tt, tg = toy_nets(cfg, randomize_head=1)
        before = tg.tobytes()
        tr.fusion_update(toy_data()[:2], tf, tt, tg, cfg)
        assert tg.tobytes() == before

    def test_single_step_descends(self):
        cfg = toy_cfg(lr_fusion=0.05, lr_task=0.05)
        tf, tt, tg = toy_nets(cfg)
        batch = toy_data()[:2]

        def l_f(theta_f):
            with ad.paused():
                total = 0.0
                for pair in batch:
                    from taskfusion.networks import fuse, gen_weights
                    w = gen_weights(Tensor(pair.i_a), Tensor(pair.i_b), tg)
                    i_f = fuse(Tensor(pair.i_a), Tensor(pair.i_b), theta_f)
                    total += fusion_loss(pair.i_a, pair.i_b, i_f, w, cfg.alpha).total.item()
            return total / len(batch)

        new_f, _, _ = tr.fusion_update(batch, tf, tt, tg, cfg)
        assert l_f(new_f) < l_f(tf)

    def test_zero_init_head_equals_fixed_half_baseline(self):
        cfg = toy_cfg()
        tf, tt, tg = toy_nets(cfg)  # lossgen head zero-initialized
        batch = toy_data()[:2]
        new_f, new_t, _ = tr.fusion_update(batch, tf, tt, tg, cfg)

        # explicit half-weight baseline step on the same tape layout
        with Tape():
            total_f = total_t = None
            for pair in batch:
                from taskfusion.networks import fuse, gen_weights, task_forward
                from taskfusion.losses import task_loss
                ia, ib = Tensor(pair.i_a), Tensor(pair.i_b)
                with ad.paused():
                    w = FusionWeights(*[t for t in gen_weights(ia, ib, tg).__dict__.values()])
                    assert np.array_equal(w.w_a.data, np.full(w.w_a.shape, 0.5))
                i_f = fuse(ia, ib, tf)
                terms = fusion_loss(ia, ib, i_f, w, cfg.alpha)
                lt = task_loss(task_forward(i_f, tt), pair.labels)
                total_f = terms.total if total_f is None else ad.add(total_f, terms.total)
                total_t = lt if total_t is None else ad.add(total_t, lt)
            g_f = ad.grad(ad.mul(total_f, 0.5), tf.tensors())
            g_t = ad.grad(ad.mul(total_t, 0.5), tt.tensors())
        base_f = ad.sgd_step(tf.tensors(), g_f, cfg.lr_fusion)
        base_t = ad.sgd_step(tt.tensors(), g_t, cfg.lr_task)
        for a, b in zip(new_f.tensors(), base_f):
            assert np.array_equal(a.data, b.data)
        for a, b in zip(new_t.tensors(), base_t):
            assert np.array_equal(a.data, b.data)


class TestRun:
    def test_schedule_counts(self):
        cfg = toy_cfg(epochs=2, meta_steps=3, fusion_steps=4)
        state = tr.run(toy_data(8, seed=2), cfg)
        phases = [r.phase for r in state.logs]
        assert phases.count("inner") == 6
        assert phases.count("outer") == 6
        assert phases.count("fusion") == 8
        assert state.logs[-1].step == 8  # per-phase running index

    def test_deterministic(self):
        cfg = toy_cfg(epochs=1, meta_steps=2, fusion_steps=2, seed=5)
        ds = toy_data(6, seed=3)
        a = tr.run(ds, cfg)
        b = tr.run(ds, cfg)
        for pa, pb in zip((a.theta_f, a.theta_t, a.theta_g), (b.theta_f, b.theta_t, b.theta_g)):
            assert pa.tobytes() == pb.tobytes()
        assert [r.format() for r in a.logs] == [r.format() for r in b.logs]

    def test_meta_sets_disjoint_every_epoch(self, monkeypatch):
        seen = []
        orig = tr.sample_meta_sets

        def spy(dataset, m, rng):
            split = orig(dataset, m, rng)
            seen.append(split)
            return split

        monkeypatch.setattr(tr, "sample_meta_sets", spy)
        cfg = toy_cfg(epochs=3, meta_steps=2, fusion_steps=1)
        tr.run(toy_data(6, seed=4), cfg)
        assert len(seen) == 3
        for split in seen:
            tr_ids = {id(p) for p in split.meta_train}
            ts_ids = {id(p) for p in split.meta_test}
            assert not (tr_ids & ts_ids)

    def test_fixed_weights_skips_meta_phase(self):
        cfg = toy_cfg(epochs=2, meta_steps=2, fusion_steps=3, fixed_weights=True)
        state = tr.run(toy_data(6, seed=5), cfg)
        phases = {r.phase for r in state.logs}
        assert phases == {"fusion"}
        assert len(state.logs) == 6
        # generator still at its neutral zero head
        assert not state.theta_g.get("conv1.weight").data.any()

    def test_non_finite_aborts(self):
        ds = toy_data(6, seed=6)
        for pair in ds:
            pair.i_a[0, 0] = np.inf
        cfg = toy_cfg(epochs=1, meta_steps=3, fusion_steps=1)
        with pytest.raises(tr.TrainingAborted):
            tr.run(ds, cfg)

    def test_validates_meta_size(self):
        cfg = toy_cfg(meta_steps=4)
        with pytest.raises(ValueError):
            tr.run(toy_data(6), cfg)

    def test_log_line_format(self):
        cfg = toy_cfg(epochs=1, meta_steps=2, fusion_steps=1)
        lines = []
        tr.run(toy_data(4, seed=7), cfg, log_fn=lines.append)
        assert len(lines) == 5
        first = lines[0]
        for key in ("phase=", "step=", "L_f=", "L_int=", "L_grad=", "L_t=", "w_mean=", "w_min=", "w_max="):
            assert key in first

    def test_adam_variant_runs(self):
        cfg = toy_cfg(epochs=1, meta_steps=2, fusion_steps=2, optimizer="adam")
        state = tr.run(toy_data(6, seed=8), cfg)
        assert state.epoch == 1
        assert state.theta_g.get("conv1.weight").data.any()  # generator moved


class TestEvaluateAccuracy:
    def test_bounds_and_determinism(self):
        cfg = toy_cfg()
        tf, tt, tg = toy_nets(cfg)
        ds = toy_data(4)
        acc1 = tr.evaluate_accuracy(tf, tt, ds)
        acc2 = tr.evaluate_accuracy(tf, tt, ds)
        assert 0.0 <= acc1 <= 1.0
        assert acc1 == acc2
