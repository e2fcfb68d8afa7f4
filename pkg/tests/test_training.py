import dataclasses

import numpy as np
import pytest

from apn.data import generate_synthetic
from apn.model import load_checkpoint, save_checkpoint
from apn.training import (Adam, ConfigError, RunLog, TrainConfig, balanced_order, grid_search, load_config,
                          new_params, parse_config_text, train)
from apn.tensor import Tensor

FAST = dict(epochs=2, channels=(4, 8), batch_size=8, f64=True, zoom=False)


def test_config_defaults():
    cfg = TrainConfig()
    assert (cfg.lambda1, cfg.lambda2, cfg.lambda3) == (0.3, 0.01, 0.2)
    assert (cfg.beta1, cfg.beta2) == (0.5, 0.999)
    assert cfg.dtype == np.float32
    assert TrainConfig(f64=True).dtype == np.float64


@pytest.mark.parametrize("kw", [dict(lambda1=-0.1), dict(lr=0), dict(beta1=1.0), dict(epochs=-1)])
def test_config_rejects(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw)


def test_config_text_round_trip():
    cfg = TrainConfig(lambda1=0.1, zoom=False, channels=(4, 8), seed=3)
    assert parse_config_text(cfg.to_text()) == cfg


def test_config_parsing(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("# comment\nlambda1 = 0.3  # inline\n\nreg = off\nchannels = 8,16\n")
    cfg = load_config(p, epochs=4)
    assert cfg.lambda1 == 0.3 and cfg.reg is False and cfg.channels == (8, 16) and cfg.epochs == 4


@pytest.mark.parametrize("text,match", [("bogus = 1", "unknown key"), ("lambda1 0.3", "key = value"),
                                        ("reg = maybe", "bad value")])
def test_config_parse_errors(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_config_text(text)


def test_adam_first_step_is_lr_sized():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = Adam([p], 0.1, 0.5, 0.999)
    p.grad = np.array([3.0, -0.5])
    opt.step()
    np.testing.assert_allclose(p.data, [0.9, -1.9], atol=1e-6)


def test_adam_skips_params_without_grad():
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = Adam([p], 0.1, 0.5, 0.999)
    opt.step()
    assert p.data[0] == 1.0


def test_balanced_order_is_permutation_and_interleaved():
    labels = np.repeat([0, 1, 2], [10, 10, 10])
    order = balanced_order(labels, np.random.default_rng(0))
    assert sorted(order) == list(range(30))
    first = labels[order[:9]]
    assert all(np.sum(first == c) >= 2 for c in range(3))


def test_zero_epochs_returns_initialisation(tiny_bundle):
    cfg = TrainConfig(**{**FAST, "epochs": 0})
    params, runlog = train(tiny_bundle, cfg)
    assert params.equals(new_params(tiny_bundle, cfg))
    assert runlog.records == []


def test_loss_decreases(tiny_bundle):
    cfg = TrainConfig(**{**FAST, "epochs": 6, "lr": 3e-3})
    _, runlog = train(tiny_bundle, cfg)
    totals = [r.total for r in runlog.records]
    assert totals[-1] < totals[0]


def test_basemod_leaves_prototypes_untouched(tiny_bundle):
    cfg = TrainConfig(**{**FAST, "reg": False, "ad": False, "cpt": False})
    init = new_params(tiny_bundle, cfg)
    params, _ = train(tiny_bundle, cfg)
    assert params.P.data.tobytes() == init.P.data.tobytes()
    assert params.V.data.tobytes() != init.V.data.tobytes()


def test_training_deterministic(tiny_bundle):
    cfg = TrainConfig(**FAST)
    a, la = train(tiny_bundle, cfg)
    b, lb = train(tiny_bundle, cfg)
    assert a.equals(b)
    # NaN validation scores compare equal under assert_equal
    np.testing.assert_equal([dataclasses.astuple(dataclasses.replace(r, seconds=0)) for r in la.records],
                            [dataclasses.astuple(dataclasses.replace(r, seconds=0)) for r in lb.records])


def test_zoom_training_runs(tiny_bundle):
    cfg = TrainConfig(**{**FAST, "epochs": 1, "zoom": True})
    params, runlog = train(tiny_bundle, cfg)
    assert params.all_finite() and len(runlog.records) == 1


def test_checkpoint_round_trip_after_training(tmp_path, tiny_bundle):
    cfg = TrainConfig(**FAST)
    params, _ = train(tiny_bundle, cfg)
    save_checkpoint(tmp_path / "m.ckpt", params, cfg.to_text())
    back, text = load_checkpoint(tmp_path / "m.ckpt")
    assert back.equals(params)
    assert parse_config_text(text) == cfg


def test_runlog_text():
    log = RunLog()
    assert log.to_text().splitlines()[0].split("\t")[0] == "epoch"


def test_validation_selects_best_epoch():
    b = generate_synthetic(n_classes=9, n_unseen=1, n_val=2, k_attrs=6, l_groups=2, image_size=16,
                           imgs_per_class=4, seed=2)
    cfg = TrainConfig(**{**FAST, "epochs": 3})
    _, runlog = train(b, cfg)
    vals = [r.val_t1 for r in runlog.records]
    assert all(np.isfinite(vals))
    assert runlog.best_epoch == int(np.argmax(vals))


def test_grid_search_picks_from_grid():
    b = generate_synthetic(n_classes=9, n_unseen=1, n_val=2, k_attrs=6, l_groups=2, image_size=16,
                           imgs_per_class=4, seed=2)
    res = grid_search(b, TrainConfig(**{**FAST, "epochs": 1}), [0.1, 0.01], [0.0, 0.5])
    assert res.config.lambda1 in (0.01, 0.1)
    assert res.gamma in (0.0, 0.5)
    assert len(res.table) == 4
    assert [row[:2] for row in res.table] == [(0.01, 0.0), (0.01, 0.5), (0.1, 0.0), (0.1, 0.5)]
    assert res.table_text().startswith("lambda1\tgamma")
    best = max(res.table, key=lambda r: (r[2], r[3]))
    assert (res.config.lambda1, res.gamma) == best[:2]


def test_grid_search_errors(tiny_bundle):
    with pytest.raises(ValueError, match="empty"):
        grid_search(tiny_bundle, TrainConfig(**FAST), [], [0.0])
    with pytest.raises(ValueError, match="validation"):
        grid_search(tiny_bundle, TrainConfig(**FAST), [0.1], [0.0])
