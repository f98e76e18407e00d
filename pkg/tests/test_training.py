import numpy as np
import pytest

from heatmark import losses as losses_mod
from heatmark import training as T
from heatmark.data import generate_synthetic_dataset
from heatmark.engine.rng import StreamHub
from heatmark.errors import ConfigError, ContractError, FormatError, TrainingError
from heatmark.models import build_models

SIZE = (32, 32)
K = 3


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("tinyds")
    man = generate_synthetic_dataset(root, 24, SIZE, K, seed=42)
    return man.load_images(), man.points_array()


def make_cfg(**kw):
    base = dict(
        loss_kind=losses_mod.LAPLACE_KL,
        epochs=1,
        batch_labeled=8,
        batch_unlabeled=8,
        channel_scale=0.0625,
        landmarks=K,
        input_size=SIZE,
        seed=0,
    )
    base.update(kw)
    return T.TrainConfig(**base)


def params_equal(a, b):
    return all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)


class TestTrainStep:
    def test_supervised_step_updates_generator_only(self, tiny_data):
        imgs, pts = tiny_data
        cfg = make_cfg()
        gen, disc = build_models(cfg.generator_spec(), cfg.discriminator_spec(), 0)
        disc_before = {k: t.data.copy() for k, t in disc.params.items()}
        gen_before = {k: t.data.copy() for k, t in gen.params.items()}
        report = T.train_step(gen, disc, (imgs[:8], pts[:8], None), None, cfg, 0, StreamHub(0))
        assert np.isfinite(report.gen_total)
        assert all(np.array_equal(disc.params[k].data, disc_before[k]) for k in disc.params)
        assert any(not np.array_equal(gen.params[k].data, gen_before[k]) for k in gen.params)
        assert report.gen_adversarial == 0.0 and np.isnan(report.disc_loss)

    def test_adversarial_step_updates_both_and_orders_disc_first(self, tiny_data):
        imgs, pts = tiny_data
        cfg = make_cfg(adversarial=True)
        gen, disc = build_models(cfg.generator_spec(), cfg.discriminator_spec(), 0)
        disc_before = {k: t.data.copy() for k, t in disc.params.items()}
        report = T.train_step(
            gen, disc, (imgs[:8], pts[:8], None), imgs[8:16], cfg, 0, StreamHub(0)
        )
        assert np.isfinite(report.disc_loss)
        assert any(not np.array_equal(disc.params[k].data, disc_before[k]) for k in disc.params)
        assert disc.step_count == 1 and gen.step_count == 1
        # discriminator grads from the generator phase must not linger
        assert all(t.grad is None for t in disc.params.values())

    def test_adversarial_requires_unlabeled(self, tiny_data):
        imgs, pts = tiny_data
        cfg = make_cfg(adversarial=True)
        gen, disc = build_models(cfg.generator_spec(), cfg.discriminator_spec(), 0)
        with pytest.raises(ContractError):
            T.train_step(gen, disc, (imgs[:8], pts[:8], None), None, cfg, 0, StreamHub(0))

    def test_single_sample_loss_decreases_over_seeds(self, tiny_data):
        imgs, pts = tiny_data
        wins = 0
        for seed in range(5):
            cfg = make_cfg(seed=seed, batch_labeled=1)
            gen, disc = build_models(cfg.generator_spec(), cfg.discriminator_spec(), seed)
            hub = StreamHub(seed)
            batch = (imgs[:1], pts[:1], None)
            first = T.train_step(gen, disc, batch, None, cfg, 0, hub).gen_total
            for step in range(1, 4):
                last = T.train_step(gen, disc, batch, None, cfg, step, hub).gen_total
            if last < first:
                wins += 1
        assert wins == 5

    def test_nan_loss_raises_training_error(self, tiny_data, monkeypatch):
        imgs, pts = tiny_data
        cfg = make_cfg()
        gen, disc = build_models(cfg.generator_spec(), cfg.discriminator_spec(), 0)

        def bad_loss(*args, **kwargs):
            from heatmark.engine.tensor import Tensor

            return losses_mod.LossValue(Tensor(np.float64(np.nan)), {"supervised": float("nan")})

        monkeypatch.setattr(losses_mod, "supervised_loss", bad_loss)
        with pytest.raises(TrainingError) as err:
            T.train_step(gen, disc, (imgs[:4], pts[:4], None), None, cfg, 3, StreamHub(0))
        assert err.value.step == 3
        assert "supervised" in err.value.breakdown


class TestFit:
    def test_zero_epochs_returns_initial_models(self, tiny_data, tmp_path):
        imgs, pts = tiny_data
        cfg = make_cfg(epochs=0)
        gen, disc, history = T.fit((imgs, pts), None, cfg, out_dir=tmp_path)
        assert history == []
        ref_gen, _ = build_models(cfg.generator_spec(), cfg.discriminator_spec(), cfg.seed)
        assert params_equal(gen, ref_gen)
        assert (tmp_path / "model.ckpt").exists()

    def test_same_seed_reproduces_history_and_checkpoint(self, tiny_data, tmp_path):
        imgs, pts = tiny_data
        cfg = make_cfg(epochs=2)
        T.fit((imgs, pts), None, cfg, out_dir=tmp_path / "a")
        T.fit((imgs, pts), None, cfg, out_dir=tmp_path / "b")
        assert (tmp_path / "a" / "history.tsv").read_bytes() == (
            tmp_path / "b" / "history.tsv"
        ).read_bytes()
        assert (tmp_path / "a" / "model.ckpt").read_bytes() == (
            tmp_path / "b" / "model.ckpt"
        ).read_bytes()

    def test_empty_labeled_set_rejected(self):
        cfg = make_cfg()
        with pytest.raises(ContractError):
            T.fit((np.zeros((0, 3, 32, 32), np.float32), np.zeros((0, K, 2), np.float32)), None, cfg)

    def test_periodic_checkpoints_written(self, tiny_data, tmp_path):
        imgs, pts = tiny_data
        cfg = make_cfg(epochs=1, checkpoint_every=2)
        T.fit((imgs, pts), None, cfg, out_dir=tmp_path)
        assert (tmp_path / "checkpoint_000002.ckpt").exists()

    def test_sink_receives_reports(self, tiny_data):
        imgs, pts = tiny_data
        seen = []
        T.fit((imgs, pts), None, make_cfg(), sink=seen.append)
        assert len(seen) == T.steps_per_epoch(len(imgs), 8)
        assert seen[0].step == 0


class TestCheckpoints:
    def test_roundtrip_bit_exact(self, tiny_data, tmp_path):
        imgs, pts = tiny_data
        cfg = make_cfg(epochs=1)
        gen, disc, _ = T.fit((imgs, pts), None, cfg)
        path = tmp_path / "m.ckpt"
        T.save_checkpoint(path, gen, disc, cfg, step=3)
        gen2, disc2, cfg2, step = T.load_checkpoint(path)
        assert step == 3 and cfg2 == cfg
        assert params_equal(gen, gen2) and params_equal(disc, disc2)
        assert all(np.array_equal(gen.adam_m[k], gen2.adam_m[k]) for k in gen.adam_m)
        assert all(np.array_equal(gen.adam_v[k], gen2.adam_v[k]) for k in gen.adam_v)
        assert all(np.array_equal(disc.buffers[k], disc2.buffers[k]) for k in disc.buffers)
        assert gen2.step_count == gen.step_count

    def test_resume_matches_uninterrupted_run(self, tiny_data, tmp_path):
        imgs, pts = tiny_data
        full_cfg = make_cfg(epochs=2, seed=5)
        gen_full, disc_full, _ = T.fit((imgs, pts), None, full_cfg)

        half_cfg = make_cfg(epochs=1, seed=5)
        T.fit((imgs, pts), None, half_cfg, out_dir=tmp_path)
        gen_h, disc_h, loaded_cfg, step = T.load_checkpoint(tmp_path / "model.ckpt")
        resumed_cfg = make_cfg(epochs=2, seed=5)
        gen_res, disc_res, _ = T.fit(
            (imgs, pts), None, resumed_cfg, init=(gen_h, disc_h), start_step=step
        )
        assert params_equal(gen_full, gen_res)
        assert params_equal(disc_full, disc_res)
        assert all(np.array_equal(gen_full.adam_m[k], gen_res.adam_m[k]) for k in gen_full.adam_m)

    def test_truncated_checkpoint_rejected(self, tiny_data, tmp_path):
        imgs, pts = tiny_data
        cfg = make_cfg()
        gen, disc, _ = T.fit((imgs, pts), None, cfg)
        path = tmp_path / "m.ckpt"
        T.save_checkpoint(path, gen, disc, cfg, step=1)
        blob = path.read_bytes()
        (tmp_path / "cut.ckpt").write_bytes(blob[: len(blob) // 2])
        with pytest.raises(FormatError):
            T.load_checkpoint(tmp_path / "cut.ckpt")

    def test_adversarial_resume_matches(self, tiny_data, tmp_path):
        imgs, pts = tiny_data
        unlabeled = imgs[12:]
        full = make_cfg(epochs=2, adversarial=True, seed=2)
        gen_full, disc_full, _ = T.fit((imgs[:12], pts[:12]), unlabeled, full)

        half = make_cfg(epochs=1, adversarial=True, seed=2)
        T.fit((imgs[:12], pts[:12]), unlabeled, half, out_dir=tmp_path)
        gen_h, disc_h, _, step = T.load_checkpoint(tmp_path / "model.ckpt")
        gen_res, disc_res, _ = T.fit(
            (imgs[:12], pts[:12]),
            unlabeled,
            make_cfg(epochs=2, adversarial=True, seed=2),
            init=(gen_h, disc_h),
            start_step=step,
        )
        assert params_equal(gen_full, gen_res) and params_equal(disc_full, disc_res)
        assert all(
            np.array_equal(disc_full.buffers[k], disc_res.buffers[k]) for k in disc_full.buffers
        )


class TestConfigValidation:
    def test_bad_loss_kind(self):
        with pytest.raises(ConfigError):
            make_cfg(loss_kind="wing")

    def test_negative_lambda(self):
        with pytest.raises(ConfigError):
            make_cfg(lambda_adv=-1.0)

    def test_zero_batch(self):
        with pytest.raises(ConfigError):
            make_cfg(batch_labeled=0)

    def test_json_roundtrip(self):
        cfg = make_cfg(adversarial=True, lambda_adv=0.01)
        assert T.TrainConfig.from_json(cfg.to_json()) == cfg
