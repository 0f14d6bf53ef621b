import math
from dataclasses import replace

import numpy as np
import pytest

from clim.augment import AugConfig
from clim.contrastive import ContrastiveConfig, NegativeQueue
from clim.data import SyntheticSpec, generate_synthetic
from clim.encoder import EncoderParams, init_params, EncoderDims
from clim.errors import ValidationError
from clim.neighborhood import NeighborhoodConfig
from clim.numerics import Rng
from clim.trainer import MetricsLog, TrainConfig, cosine_lr, pretrain, sgd_step, _zero_grads


def tiny_dataset(seed=1, classes=4, per_class=20):
    return generate_synthetic(SyntheticSpec(class_count=classes, per_class=per_class, seed=seed))


def tiny_config(**overrides):
    base = dict(
        epochs=2, batch_size=16, strategy="instance", mixing="none", seed=3,
        warmup_epochs_instance_only=0,
        aug=AugConfig(resolutions=(16,)),
        contrastive=ContrastiveConfig(queue_capacity=64),
        neighborhood=NeighborhoodConfig(clusters=4, k=8, positives=4, refresh_every=1),
        hidden=24, feat=12, head_hidden=12, embed=8,
    )
    base.update(overrides)
    return TrainConfig(**base)


class TestCosineLr:
    def test_start(self):
        assert cosine_lr(0.06, 0.0, 100.0) == 0.06

    def test_end(self):
        assert cosine_lr(0.06, 100.0, 100.0) == pytest.approx(0.0, abs=1e-18)

    def test_midpoint(self):
        assert cosine_lr(0.06, 50.0, 100.0) == pytest.approx(0.03, abs=1e-15)

    def test_out_of_range(self):
        with pytest.raises(ValidationError):
            cosine_lr(0.06, 101.0, 100.0)


class TestSgdStep:
    def setup_method(self):
        dims = EncoderDims(in_side=4, channels=1, hidden=4, feat=4, head_hidden=4, embed=2)
        self.params = init_params(Rng(1), dims, dtype=np.float64)
        self.velocity = _zero_grads(self.params)

    def test_zero_grads_no_motion(self):
        grads = _zero_grads(self.params)
        new_p, _ = sgd_step(self.params, grads, self.velocity, lr=0.1, momentum=0.9, weight_decay=0.0)
        for name, tensor in new_p.tensors().items():
            assert np.array_equal(tensor, self.params.tensors()[name])

    def test_plain_gradient_descent(self):
        grads = _zero_grads(self.params)
        grads.w1[:] = 2.0
        new_p, _ = sgd_step(self.params, grads, self.velocity, lr=0.5, momentum=0.0, weight_decay=0.0)
        assert np.allclose(new_p.w1, self.params.w1 - 1.0)

    def test_decay_only(self):
        ones = self.params.copy()
        for t in ones.tensors().values():
            t[:] = 1.0
        grads = _zero_grads(ones)
        new_p, _ = sgd_step(ones, grads, _zero_grads(ones), lr=1.0, momentum=0.0, weight_decay=0.1)
        assert np.allclose(new_p.w1, 0.9)

    def test_momentum_accumulates(self):
        grads = _zero_grads(self.params)
        grads.w1[:] = 1.0
        p1, v1 = sgd_step(self.params, grads, self.velocity, lr=0.1, momentum=0.5, weight_decay=0.0)
        p2, _ = sgd_step(p1, grads, v1, lr=0.1, momentum=0.5, weight_decay=0.0)
        # second step applies v = 0.5*1 + 1 = 1.5
        assert np.allclose(p2.w1, p1.w1 - 0.1 * 1.5)


class TestPretrain:
    def test_epochs_zero(self):
        params, log = pretrain(tiny_dataset(), tiny_config(epochs=0))
        assert log.rows == [] and isinstance(params, EncoderParams)

    def test_deterministic_replay(self):
        ds = tiny_dataset()
        cfg = tiny_config(strategy="clim", mixing="cutmix", epochs=3,
                          warmup_epochs_instance_only=1, dtype="f64")
        _, log1 = pretrain(ds, cfg)
        _, log2 = pretrain(ds, cfg)
        assert log1.to_tsv() == log2.to_tsv()

    def test_worker_count_invariance(self):
        ds = tiny_dataset()
        cfg = tiny_config(strategy="clim", mixing="cutmix", epochs=2,
                          warmup_epochs_instance_only=1, dtype="f64")
        _, log1 = pretrain(ds, cfg)
        _, log3 = pretrain(ds, replace(cfg, workers=3))
        assert log1.to_tsv() == log3.to_tsv()

    def test_queue_size_law_cold_start(self):
        ds = tiny_dataset()
        cfg = tiny_config(queue_warm_start=False, epochs=2, batch_size=16,
                          contrastive=ContrastiveConfig(queue_capacity=48))
        _, log = pretrain(ds, cfg)
        for row in log.rows:
            step, qsize = row[0], row[4]
            assert qsize == min((step + 1) * 16, 48)

    def test_warm_start_fills_queue(self):
        ds = tiny_dataset()
        cfg = tiny_config(epochs=1)
        _, log = pretrain(ds, cfg)
        assert all(row[4] == 64 for row in log.rows)

    def test_pure_instance_run_never_builds_pools(self):
        ds = tiny_dataset()
        cfg = tiny_config(strategy="clim", mixing="cutmix", epochs=2,
                          warmup_epochs_instance_only=2)
        _, log = pretrain(ds, cfg)
        assert all(row[5] == 0.0 for row in log.rows)
        assert log.epoch_stats == []

    def test_omega_stats_appear_after_warmup(self):
        ds = tiny_dataset()
        cfg = tiny_config(strategy="clim", mixing="cutmix", epochs=3,
                          warmup_epochs_instance_only=1)
        _, log = pretrain(ds, cfg)
        post = [row[5] for row in log.rows if row[1] >= 1]
        assert any(v > 0 for v in post)
        assert log.epoch_stats and log.epoch_stats[0][0] == 1

    def test_loss_finite_throughout(self):
        _, log = pretrain(tiny_dataset(), tiny_config(strategy="clim", mixing="cutmix",
                                                      epochs=3, warmup_epochs_instance_only=1))
        assert all(math.isfinite(row[3]) for row in log.rows)

    def test_checkpoints_written(self, tmp_path):
        pretrain(tiny_dataset(), tiny_config(epochs=2, checkpoint_every=1), out_dir=tmp_path)
        assert (tmp_path / "ckpt_epoch1.clim").exists()
        assert (tmp_path / "ckpt_epoch2.clim").exists()

    def test_epochs_zero_still_writes_checkpoint(self, tmp_path):
        pretrain(tiny_dataset(), tiny_config(epochs=0), out_dir=tmp_path)
        assert (tmp_path / "ckpt_epoch0.clim").exists()

    def test_empty_dataset_rejected(self):
        from clim.data import Dataset

        empty = Dataset(images=np.zeros((0, 16, 16, 3), dtype=np.float32))
        with pytest.raises(ValidationError):
            pretrain(empty, tiny_config())


class TestMocoRegression:
    def test_step_zero_matches_hand_reference(self):
        # instance strategy, no mixing, single resolution: the logged loss of
        # the first step must equal a textbook InfoNCE computed from the same
        # views and the same queue snapshot, bitwise at 64-bit.
        ds = tiny_dataset()
        cfg = tiny_config(epochs=1, batch_size=8, dtype="f64",
                          contrastive=ContrastiveConfig(queue_capacity=32))
        _, log = pretrain(ds, cfg)

        from clim.augment import draw_mix_params, draw_view_params, realize_mixed_views_batch, render_view_batch
        from clim.contrastive import NegativeQueue
        from clim.encoder import KeyEncoder, forward, init_params
        from clim.trainer import _warm_fill

        aug_cfg = replace(cfg.aug, mixing=cfg.mixing)
        dims = EncoderDims(in_side=16, channels=3, hidden=cfg.hidden, feat=cfg.feat,
                           head_hidden=cfg.head_hidden, embed=cfg.embed)
        rng = Rng(cfg.seed)
        params = init_params(rng.split("init"), dims, dtype=np.float64)
        key = KeyEncoder(params.copy(), cfg.key_momentum)
        queue = NegativeQueue(32, cfg.embed, dtype=np.float64)
        _warm_fill(queue, key, ds.images, aug_cfg, rng.split("queue_init"), np.float64)

        order = rng.split("order", 0).permutation(len(ds))
        batch = order[:8]
        negs = queue.as_array()
        mixes, keys_params = [], []
        for a in batch:
            child = rng.split("step", 0, "anchor", int(a))
            mixes.append(draw_mix_params(child.split("query"), (16, 16), aug_cfg))
            keys_params.append(draw_view_params(child.split("key_anchor"), (16, 16), aug_cfg))
        imgs = ds.images[batch].astype(np.float64)
        q_views = realize_mixed_views_batch(imgs, imgs, mixes, aug_cfg)[16][0]
        k_views = render_view_batch(imgs, keys_params, 16)
        q_emb = forward(params, q_views)[0]
        k_emb = forward(key.params, k_views)[0]
        tau = cfg.contrastive.tau
        l_neg = (q_emb @ negs.T) / tau
        neg_max = l_neg.max(axis=1)
        sumexp = np.exp(l_neg - neg_max[:, None]).sum(axis=1)
        l_pos = (q_emb * k_emb).sum(axis=1) * (1.0 / tau)
        m = np.maximum(l_pos, neg_max)
        losses = m + np.log(np.exp(l_pos - m) + sumexp * np.exp(neg_max - m)) - l_pos
        reference = float(np.sum(0.0 + 1.0 * losses)) / 8
        assert log.rows[0][3] == reference


class TestChanceLevel:
    def test_first_step_loss_near_ln_k_plus_one(self):
        ds = tiny_dataset(classes=6, per_class=30)
        cfg = tiny_config(epochs=1, batch_size=32,
                          contrastive=ContrastiveConfig(queue_capacity=255))
        _, log = pretrain(ds, cfg)
        target = math.log(256)
        assert abs(log.rows[0][3] - target) < 0.1 * target


class TestMetricsLog:
    def test_tsv_shape(self):
        log = MetricsLog(rows=[(0, 0, 0.06, 1.5, 10, 0.0)])
        line = log.step_lines()[0]
        parts = line.split("\t")
        assert len(parts) == 6 and parts[0] == "0" and parts[4] == "10"
