import math

import numpy as np
import pytest

from eend.model import BlstmConfig, SaEendConfig, init_params
from eend.simulate import gen_corpus, mixture_specs, write_mixture_set
from eend.tensor import Tensor
from eend.train import (
    AdamState,
    TrainConfig,
    TrainingError,
    adam_step,
    adapt,
    average_models,
    averaged_from_fit,
    chunk,
    fit,
    load_dataset,
    noam_lr,
    validation_loss,
)


def toy_dataset(n_items=6, t=24, f=5, c=2, seed=0):
    """Features carry the labels linearly, so the task is learnable."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_items):
        labels = (rng.uniform(size=(t, c)) > 0.5).astype(np.float64)
        noise = 0.05 * rng.standard_normal((t, f))
        feats = np.concatenate([labels * 2 - 1, np.zeros((t, f - c))], axis=1) + noise
        out.append((feats, labels))
    return out


class TestNoam:
    def test_peak_at_warmup(self):
        d, w = 256, 25000
        peak = noam_lr(w, d, w)
        assert abs(peak - d ** -0.5 * w ** -0.5) < 1e-18
        assert noam_lr(w // 2, d, w) < peak
        assert noam_lr(2 * w, d, w) < peak

    def test_reference_value(self):
        assert abs(noam_lr(25000, 256, 25000) - 3.9528e-4) < 1e-7

    def test_monotone_both_sides(self):
        d, w = 64, 100
        ramp = [noam_lr(s, d, w) for s in range(1, w + 1)]
        decay = [noam_lr(s, d, w) for s in range(w, 5 * w, 7)]
        assert all(a < b for a, b in zip(ramp, ramp[1:]))
        assert all(a > b for a, b in zip(decay, decay[1:]))

    def test_step_zero_rejected(self):
        with pytest.raises(ValueError):
            noam_lr(0, 64, 100)


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        p = {"w": Tensor(np.array([1.0, -2.0]), requires_grad=True)}
        before = p["w"].data.copy()
        st = AdamState.for_mode("fixed")
        adam_step(p, {"w": np.zeros(2)}, st, lr=0.1)
        assert np.array_equal(p["w"].data, before)
        assert st.step == 1

    def test_first_step_magnitude(self):
        p = {"w": Tensor(np.array([0.0]), requires_grad=True)}
        st = AdamState.for_mode("fixed")
        adam_step(p, {"w": np.ones(1)}, st, lr=0.01)
        # bias-corrected m/sqrt(v) = 1 at step 1, so the update is ~lr
        assert abs(p["w"].data[0] + 0.01) < 1e-6

    def test_lr_zero_is_bit_identical(self):
        rng = np.random.default_rng(0)
        p = {"w": Tensor(rng.standard_normal((3, 3)), requires_grad=True)}
        before = p["w"].data.copy()
        st = AdamState.for_mode("noam")
        adam_step(p, {"w": rng.standard_normal((3, 3))}, st, lr=0.0)
        assert np.array_equal(p["w"].data, before)

    def test_nonfinite_gradient_reported(self):
        p = {"bad.w": Tensor(np.zeros(2), requires_grad=True)}
        st = AdamState.for_mode("fixed")
        with pytest.raises(TrainingError, match="bad.w"):
            adam_step(p, {"bad.w": np.array([1.0, np.nan])}, st, lr=0.1)

    def test_mode_hyperparameters(self):
        assert AdamState.for_mode("noam").beta2 == 0.98
        assert AdamState.for_mode("noam").eps == 1e-9
        assert AdamState.for_mode("fixed").beta2 == 0.999
        assert AdamState.for_mode("fixed").eps == 1e-8


class TestChunk:
    def test_exact_fit(self):
        ds = [(np.zeros((500, 3)), np.zeros((500, 2)))]
        assert len(chunk(ds, 500)) == 1

    def test_split_with_remainder(self):
        ds = [(np.zeros((1250, 3)), np.zeros((1250, 2)))]
        sizes = [c[0].shape[0] for c in chunk(ds, 500)]
        assert sizes == [500, 500, 250]

    def test_small_remainder_dropped(self):
        ds = [(np.zeros((505, 3)), np.zeros((505, 2)))]
        sizes = [c[0].shape[0] for c in chunk(ds, 500)]
        assert sizes == [500]

    def test_bad_len(self):
        with pytest.raises(ValueError):
            chunk([], 0)


class TestAverage:
    def test_single_is_identity(self):
        ck = {"w": np.array([1.0, 2.0])}
        out = average_models([ck])
        assert np.array_equal(out["w"].data, ck["w"])

    def test_opposites_cancel(self):
        a = {"w": np.array([1.0, -3.0])}
        b = {"w": np.array([-1.0, 3.0])}
        assert np.array_equal(average_models([a, b])["w"].data, np.zeros(2))

    def test_three_point_mean(self):
        cks = [{"w": np.array([float(v)])} for v in (1, 2, 3)]
        assert average_models(cks)["w"].data[0] == 2.0

    def test_mismatch_rejected(self):
        with pytest.raises(ValueError):
            average_models([{"w": np.zeros(2)}, {"v": np.zeros(2)}])
        with pytest.raises(ValueError):
            average_models([{"w": np.zeros(2)}, {"w": np.zeros(3)}])


class TestFit:
    def test_history_length_and_reproducibility(self):
        cfg = SaEendConfig(in_dim=5, model_dim=4, heads=2, ffn_dim=6, blocks=1)
        tc = TrainConfig(batch_size=2, epochs=3, chunk_len=24, warmup_steps=10, seed=4)
        ds = toy_dataset()
        r1 = fit(cfg, tc, ds, ds[:2])
        r2 = fit(cfg, tc, ds, ds[:2])
        assert len(r1.history) == 3
        assert [h.train_loss for h in r1.history] == [h.train_loss for h in r2.history]
        assert [h.valid_loss for h in r1.history] == [h.valid_loss for h in r2.history]
        for k in r1.params:
            assert np.array_equal(r1.params[k].data, r2.params[k].data)

    def test_loss_decreases_on_learnable_problem(self):
        cfg = SaEendConfig(in_dim=5, model_dim=8, heads=2, ffn_dim=16, blocks=1)
        tc = TrainConfig(batch_size=3, epochs=12, chunk_len=24, warmup_steps=30, seed=1)
        ds = toy_dataset(n_items=8)
        res = fit(cfg, tc, ds, ds[:3])
        assert res.history[-1].valid_loss < math.log(2)
        assert res.history[-1].train_loss < res.history[0].train_loss

    def test_lr_zero_keeps_params(self):
        cfg = SaEendConfig(in_dim=5, model_dim=4, heads=2, ffn_dim=6, blocks=1)
        tc = TrainConfig(batch_size=2, epochs=2, chunk_len=24, lr_mode="fixed",
                         lr=0.0, seed=2)
        init = init_params(cfg, tc.seed)
        before = {k: p.data.copy() for k, p in init.items()}
        res = fit(cfg, tc, toy_dataset(), params=init)
        for k in before:
            assert np.array_equal(res.params[k].data, before[k])

    def test_padding_neutral_loss(self):
        # one batch with unequal lengths vs the same sequences alone
        from eend.train import _batch_loss
        cfg = SaEendConfig(in_dim=5, model_dim=4, heads=2, ffn_dim=6, blocks=1)
        params = init_params(cfg, 0)
        ds = [(f[:t], l[:t]) for (f, l), t in zip(toy_dataset(2, t=24), (24, 15))]
        batch_val = float(_batch_loss(ds, params, cfg, 0.5).data)
        singles = [float(_batch_loss([x], params, cfg, 0.5).data) for x in ds]
        expected = (singles[0] * 24 + singles[1] * 15) / 39
        assert abs(batch_val - expected) < 1e-15

    def test_blstm_fit_runs(self):
        cfg = BlstmConfig(in_dim=5, layers=1, hidden=3, dc_layer=1, embed_dim=4)
        tc = TrainConfig(batch_size=2, epochs=2, chunk_len=12, lr_mode="fixed",
                         lr=1e-3, seed=3)
        res = fit(cfg, tc, toy_dataset(3, t=12), toy_dataset(1, t=12, seed=9))
        assert len(res.history) == 2
        assert all(math.isfinite(h.train_loss) for h in res.history)

    def test_empty_train_set_rejected(self):
        cfg = SaEendConfig(in_dim=5, model_dim=4, heads=2, ffn_dim=6, blocks=1)
        with pytest.raises(TrainingError):
            fit(cfg, TrainConfig(epochs=1), [])

    def test_checkpoints_written(self, tmp_path):
        cfg = SaEendConfig(in_dim=5, model_dim=4, heads=2, ffn_dim=6, blocks=1)
        tc = TrainConfig(batch_size=2, epochs=2, chunk_len=24, warmup_steps=10, seed=5)
        fit(cfg, tc, toy_dataset(), toy_dataset(1, seed=8), out_dir=tmp_path)
        assert (tmp_path / "epoch001.eend").exists()
        assert (tmp_path / "epoch002.eend").exists()
        lines = (tmp_path / "history.csv").read_text().strip().splitlines()
        assert lines[0] == "epoch,train_loss,valid_loss,lr"
        assert len(lines) == 3

    def test_optimizer_sidecar_round_trip(self, tmp_path):
        from eend.train import load_optimizer_state
        cfg = SaEendConfig(in_dim=5, model_dim=4, heads=2, ffn_dim=6, blocks=1)
        tc = TrainConfig(batch_size=2, epochs=2, chunk_len=24, warmup_steps=10, seed=6)
        fit(cfg, tc, toy_dataset(), out_dir=tmp_path)
        state = load_optimizer_state(tmp_path / "epoch002.optim", "noam")
        assert state.step == 6   # 3 batches per epoch, 2 epochs
        assert set(state.m) == set(state.v)
        assert state.m["w0"].shape == (5, 4)

    def test_averaged_params_give_valid_posteriors(self):
        from eend.model import forward
        cfg = SaEendConfig(in_dim=5, model_dim=4, heads=2, ffn_dim=6, blocks=1)
        tc = TrainConfig(batch_size=2, epochs=3, chunk_len=24, warmup_steps=10, seed=7)
        res = fit(cfg, tc, toy_dataset())
        avg = averaged_from_fit(res, 3)
        z = forward(toy_dataset(1, seed=11)[0][0], avg, cfg)
        assert np.all(np.isfinite(z.data))
        assert np.all((z.data > 0) & (z.data < 1))


class TestAdapt:
    def test_lr_zero_unchanged(self):
        cfg = SaEendConfig(in_dim=5, model_dim=4, heads=2, ffn_dim=6, blocks=1)
        params = init_params(cfg, 0)
        before = {k: p.data.copy() for k, p in params.items()}
        adapted, result = adapt(params, cfg, toy_dataset(2), lr=0.0, epochs=3)
        for k in before:
            assert np.array_equal(adapted[k].data, before[k])
            assert np.array_equal(params[k].data, before[k])   # input untouched
        assert len(result.history) == 3

    def test_adaptation_reduces_loss_on_new_domain(self):
        cfg = SaEendConfig(in_dim=5, model_dim=8, heads=2, ffn_dim=16, blocks=1)
        tc = TrainConfig(batch_size=3, epochs=8, chunk_len=24, warmup_steps=30, seed=1)
        base = fit(cfg, tc, toy_dataset(6, seed=0), None)
        # shifted domain: stronger noise, different seed
        shifted = [(f + 0.3, l) for f, l in toy_dataset(6, seed=50)]
        held_out = [(f + 0.3, l) for f, l in toy_dataset(3, seed=60)]
        before = validation_loss(held_out, base.params, cfg)
        adapted, _ = adapt(base.params, cfg, shifted, lr=1e-3, epochs=6,
                           train_cfg=tc)
        after = validation_loss(held_out, adapted, cfg)
        assert after < before


def test_load_dataset_round_trip(tmp_path):
    corpus = gen_corpus(n_speakers=4, utt_per_speaker=3, utt_dur_range=(0.4, 0.8),
                        seed=3, noise_dur=1.0)
    specs = mixture_specs(2, seed=5, n_spk=2, n_umin=2, n_umax=3, beta=0.7,
                          snr_choices=(20.0,))
    write_mixture_set(tmp_path, corpus, specs)
    ds = load_dataset(tmp_path, n_speakers=2)
    assert len(ds) == 2
    for feats, labels in ds:
        assert feats.shape[0] == labels.shape[0]
        assert feats.shape[1] == 345
        assert labels.shape[1] == 2
        assert labels.max() <= 1 and labels.min() >= 0
        assert labels.sum() > 0
