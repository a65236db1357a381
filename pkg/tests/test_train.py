import hashlib
import math

import numpy as np
import pytest
from conftest import tiny_model

from mlpscale.data import AugmentConfig, SynthSpec, smooth_labels, synth_dataset
from mlpscale.model import ModelConfig, init_model
from mlpscale.tensor import make_rng
from mlpscale.train import (CheckpointError, TrainConfig, append_metrics_csv, cross_entropy_smoothed, dataset_loss,
                            evaluate, fine_tune, linear_probe, load_checkpoint, make_optimizer, read_metrics_csv,
                            save_checkpoint, set_norm_stats, train, train_epoch)

NOAUG = AugmentConfig(flip=False, crop_padding=0, mixup=0.0, label_smoothing=0.0)
# pilot-run setting: the default learning rates barely move desk-scale models in ten epochs
PILOT = dict(batch_size=64, lr=1e-3, augment=NOAUG)


def separable(n=1000, seed=0, split="train"):
    return synth_dataset(SynthSpec(n=n, num_classes=10), seed, split)


def small_model(depth=2, width=32, k=10, shape=(8, 8, 3), seed=0, **kw):
    return init_model(ModelConfig(depth, width, image_shape=shape, num_classes=k, **kw), make_rng(seed))


def body_digest(model):
    h = hashlib.sha256()
    for name, p in model.params.items():
        if not name.startswith("head."):
            h.update(p.tobytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def pretrained():
    spec = SynthSpec(n=3000, num_classes=10, pattern="prototype", noise=0.7, task_seed=1)
    src, test = synth_dataset(spec, 0), synth_dataset(spec, 1, "test")
    model = small_model(width=64)
    train(model, src, TrainConfig(epochs=8, **PILOT))
    return model, src, test


# ---------------------------------------------------------------------------
# loss


def test_uniform_logits_loss_is_log_k(rng):
    targets = smooth_labels(rng.integers(0, 10, 6), 0.3, 10)
    loss, _ = cross_entropy_smoothed(np.full((6, 10), 1.7), targets)
    assert loss == pytest.approx(math.log(10), abs=1e-12)


def test_large_margin_loss_vanishes():
    logits = np.array([[60.0, 0.0, 0.0]])
    loss, _ = cross_entropy_smoothed(logits, np.array([[1.0, 0.0, 0.0]]))
    assert 0.0 <= loss < 1e-25


def test_loss_gradient_finite_difference(rng):
    logits = rng.standard_normal((4, 5))
    targets = smooth_labels(rng.integers(0, 5, 4), 0.3, 5)
    _, d = cross_entropy_smoothed(logits, targets)
    num = np.empty_like(logits)
    for idx in np.ndindex(logits.shape):
        up, down = logits.copy(), logits.copy()
        up[idx] += 1e-6
        down[idx] -= 1e-6
        num[idx] = (cross_entropy_smoothed(up, targets)[0] - cross_entropy_smoothed(down, targets)[0]) / 2e-6
    assert np.abs(num - d).max() / np.abs(d).max() <= 1e-6


def test_non_finite_logits_rejected():
    with pytest.raises(FloatingPointError):
        cross_entropy_smoothed(np.array([[np.inf, 0.0]]), np.array([[1.0, 0.0]]))


# ---------------------------------------------------------------------------
# configuration


def test_mode_defaults():
    s = TrainConfig.for_mode("scratch")
    assert (s.optimizer, s.lr, s.batch_size, s.augment.label_smoothing, s.augment.mixup) == ("lion", 5e-5, 256, 0.3, 0.8)
    p = TrainConfig.for_mode("pretrain")
    assert (p.lr, p.weight_decay, p.batch_size, p.augment.mixup) == (1e-5, 1e-3, 16384, 0.8)
    f = TrainConfig.for_mode("finetune")
    assert (f.optimizer, f.lr_head, f.lr_body, f.momentum, f.epochs) == ("sgd", 0.01, 0.001, 0.9, 50)
    pr = TrainConfig.for_mode("probe")
    assert (pr.lr, pr.epochs) == (1e-5, 50)


@pytest.mark.parametrize("kw", [dict(epochs=0), dict(batch_size=0), dict(mode="x"), dict(optimizer="adam"),
                                dict(lr=-1.0), dict(clip_norm=0.0)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_config_dict_roundtrip():
    cfg = TrainConfig.for_mode("finetune", seed=3)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


# ---------------------------------------------------------------------------
# loops


def test_zero_learning_rate_leaves_parameters():
    ds = separable(200)
    model = small_model()
    before = {k: v.copy() for k, v in model.params.items()}
    cfg = TrainConfig(epochs=1, batch_size=64, lr=0.0)
    train_epoch(model, ds, cfg, make_optimizer(cfg), 0)
    assert all(np.array_equal(before[k], model.params[k]) for k in before)


def test_epoch_keeps_partial_batch_and_counts_compute():
    ds = separable(150)
    model = small_model()
    cfg = TrainConfig(epochs=1, batch_size=64, lr=0.0)
    rec = train_epoch(model, ds, cfg, make_optimizer(cfg), 0, cum_flops=5)
    from mlpscale.model import count_forward_flops
    assert rec.cum_flops == 5 + count_forward_flops(model.config) * 3 * 150
    assert 0.0 <= rec.train_err <= 1.0


def test_run_determinism():
    ds = separable(300)
    test = separable(100, seed=1, split="test")
    cfg = TrainConfig.for_mode("scratch", epochs=2, batch_size=64, augment=AugmentConfig(mixup=0.8))
    runs = []
    for _ in range(2):
        model = small_model(dropout=0.1)
        recs, _ = train(model, ds, cfg, test)
        runs.append(([r.comparable() for r in recs], {k: v.tobytes() for k, v in model.params.items()}))
    assert runs[0] == runs[1]


def test_separable_pilot_run_fits_training_set():
    ds = separable()
    model = small_model(2, 32)
    recs, _ = train(model, ds, TrainConfig(epochs=10, **PILOT))
    assert recs[-1].train_err <= 0.01
    assert evaluate(model, ds) <= 0.01


def test_first_epoch_loss_below_initial_with_defaults():
    ds = separable()
    model = small_model()
    set_norm_stats(model, ds)
    initial = dataset_loss(model, ds, 0.3)
    recs, _ = train(model, ds, TrainConfig.for_mode("scratch", epochs=1))
    assert recs[0].train_loss < initial


def test_untrained_model_is_at_chance():
    noise = synth_dataset(SynthSpec(n=2000, num_classes=10, pattern="prototype", noise=1.0), 0)
    for seed in range(3):
        model = small_model(seed=seed)
        set_norm_stats(model, noise)
        assert abs(evaluate(model, noise) - 0.9) <= 0.03


def test_evaluation_is_repeatable(pretrained):
    model, _, test = pretrained
    assert evaluate(model, test) == evaluate(model.copy(), test)


def test_memorised_training_set_has_zero_error():
    ds = separable(200)
    model = small_model(2, 64)
    train(model, ds, TrainConfig(epochs=15, **PILOT))
    assert evaluate(model, ds) == 0.0


def test_image_shape_mismatch_rejected():
    cfg = TrainConfig(epochs=1)
    with pytest.raises(ValueError):
        train_epoch(small_model(shape=(4, 4, 3)), separable(20), cfg, make_optimizer(cfg), 0)


# ---------------------------------------------------------------------------
# transfer


def test_probe_keeps_body_frozen(pretrained):
    model, src, test = pretrained
    digest = body_digest(model)
    head_before = model.params["head.W"].copy()
    linear_probe(model, src, TrainConfig.for_mode("probe", epochs=2, lr=1e-3))
    assert body_digest(model) == digest
    assert np.array_equal(model.params["head.W"], head_before)


def test_probe_recovers_pretraining_accuracy(pretrained):
    model, src, test = pretrained
    head_err = evaluate(model, test)
    _, probe_err = linear_probe(model, src, TrainConfig.for_mode("probe", epochs=30, lr=1e-3, batch_size=64), test)
    assert (1 - probe_err) >= (1 - head_err) - 0.02


def test_probe_on_separable_features():
    ds, test = separable(), separable(500, 1, "test")
    model = small_model(1, 64)
    set_norm_stats(model, ds)
    _, err = linear_probe(model, ds, TrainConfig.for_mode("probe", epochs=20, lr=1e-3, batch_size=64), test)
    assert err <= 0.01


def test_probe_head_width_mismatch(pretrained):
    model, src, _ = pretrained
    bad = {"head.W": np.zeros((10, 7), np.float32), "head.b": np.zeros(10, np.float32)}
    with pytest.raises(ValueError, match="width"):
        linear_probe(model, src, TrainConfig.for_mode("probe", epochs=1), head=bad)


def _target_task():
    spec = SynthSpec(n=500, num_classes=5, pattern="prototype", noise=0.7, task_seed=2)
    return synth_dataset(spec, 2), synth_dataset(spec, 3, "test")


def test_finetune_beats_probe(pretrained):
    model, _, _ = pretrained
    tgt, tgt_test = _target_task()
    _, probe_err = linear_probe(model, tgt, TrainConfig.for_mode("probe", epochs=10, lr=1e-3), tgt_test)
    tuned, ft_err = fine_tune(model, tgt, TrainConfig.for_mode("finetune", epochs=20, augment=NOAUG), tgt_test)
    assert ft_err <= probe_err
    assert tuned.config.num_classes == 5 and model.config.num_classes == 10


def test_finetune_with_frozen_body_group(pretrained):
    model, _, _ = pretrained
    tgt, _ = _target_task()
    tuned, _ = fine_tune(model, tgt, TrainConfig.for_mode("finetune", epochs=2, lr_body=0.0, augment=NOAUG))
    assert body_digest(tuned) == body_digest(model)
    assert not np.array_equal(tuned.params["head.W"][:5], model.params["head.W"][:5])


def test_finetune_auto_resizes_inputs():
    model = small_model(1, 16, k=4, shape=(8, 8, 3))
    set_norm_stats(model, synth_dataset(SynthSpec(n=40, h=8, w=8, num_classes=4), 0))
    low = synth_dataset(SynthSpec(n=40, h=4, w=4, num_classes=3), 0)
    tuned, err = fine_tune(model, low, TrainConfig.for_mode("finetune", epochs=1, augment=NOAUG))
    assert tuned.config.image_shape == (8, 8, 3) and 0.0 <= err <= 1.0
    with pytest.raises(ValueError, match="auto_resize"):
        fine_tune(model, low, TrainConfig.for_mode("finetune", epochs=1, auto_resize=False))


# ---------------------------------------------------------------------------
# checkpoints and metrics


def _trained(tmp_path, optimizer="lion"):
    ds = separable(100)
    model = small_model(1, 8)
    cfg = TrainConfig(epochs=1, batch_size=32, lr=1e-3, optimizer=optimizer, augment=NOAUG)
    _, opt = train(model, ds, cfg)
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, opt, path, epoch=1, extra={"note": "x"})
    return model, opt, path


@pytest.mark.parametrize("optimizer", ["lion", "sgd"])
def test_checkpoint_bitwise_roundtrip(tmp_path, optimizer):
    model, opt, path = _trained(tmp_path, optimizer)
    ck = load_checkpoint(path)
    assert ck.model.config == model.config and ck.epoch == 1 and ck.extra == {"note": "x"}
    for k, v in model.params.items():
        assert ck.model.params[k].dtype == v.dtype and ck.model.params[k].tobytes() == v.tobytes()
    assert ck.model.norm_mean.tobytes() == model.norm_mean.tobytes()
    assert type(ck.optimizer) is type(opt)
    bufs = opt.momentum if optimizer == "lion" else opt.velocity
    back = ck.optimizer.momentum if optimizer == "lion" else ck.optimizer.velocity
    assert {k: v.tobytes() for k, v in bufs.items()} == {k: v.tobytes() for k, v in back.items()}


def test_checkpoint_without_optimizer(tmp_path):
    model = tiny_model(dtype=np.float64)
    save_checkpoint(model, None, tmp_path / "a.ckpt")
    ck = load_checkpoint(tmp_path / "a.ckpt")
    assert ck.optimizer is None and ck.model.params["emb.W"].dtype == np.float64


@pytest.mark.parametrize("offset", [0, 2, 5, 9, 14])
def test_checkpoint_header_corruption_rejected(tmp_path, offset):
    _, _, path = _trained(tmp_path)
    raw = bytearray(path.read_bytes())
    raw[offset] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_checkpoint_payload_corruption_and_truncation(tmp_path):
    _, _, path = _trained(tmp_path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-1] + bytes([raw[-1] ^ 1]))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(path)
    path.write_bytes(raw[:len(raw) - 10])
    with pytest.raises(CheckpointError) as err:
        load_checkpoint(path)
    assert err.value.offset > 12
    path.write_bytes(raw[:6])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)


def test_resume_matches_uninterrupted_run(tmp_path):
    ds = separable(200)
    cfg = TrainConfig.for_mode("scratch", epochs=3, batch_size=64, lr=1e-3)
    full = small_model(dropout=0.1)
    recs_full, _ = train(full, ds, cfg)

    part = small_model(dropout=0.1)
    recs_a, opt = train(part, ds, TrainConfig.from_dict({**cfg.to_dict(), "epochs": 1}))
    save_checkpoint(part, opt, tmp_path / "e1.ckpt", epoch=1)
    ck = load_checkpoint(tmp_path / "e1.ckpt")
    recs_b, _ = train(ck.model, ds, cfg, opt_state=ck.optimizer, start_epoch=ck.epoch,
                      cum_flops=recs_a[-1].cum_flops)
    assert [r.comparable() for r in recs_a + recs_b] == [r.comparable() for r in recs_full]
    assert all(ck.model.params[k].tobytes() == full.params[k].tobytes() for k in full.params)


def test_metrics_csv_roundtrip(tmp_path):
    ds = separable(64)
    recs, _ = train(small_model(1, 8), ds, TrainConfig(epochs=2, batch_size=32), separable(32, 1, "test"))
    path = tmp_path / "metrics.csv"
    append_metrics_csv(recs[:1], path)
    append_metrics_csv(recs[1:], path)
    assert path.read_text().splitlines()[0] == "epoch,train_loss,train_err,test_err,seconds,cum_flops"
    back = read_metrics_csv(path)
    # seconds are written rounded; everything else must survive exactly
    assert [r.comparable() for r in back] == [r.comparable() for r in recs]
    assert [r.seconds for r in back] == pytest.approx([r.seconds for r in recs], abs=1e-3)
