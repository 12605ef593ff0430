import csv

import numpy as np
import pytest

from gcmc import tensor as T
from gcmc.codec import CodecModel, ModelConfig, load_state
from gcmc.data import make_dataset, random_crops, synthetic_image
from gcmc.layers import GDN
from gcmc.tensor import Tensor
from gcmc.train import (CURVE_FIELDS, RD_FIELDS, Adam, RDPoint, TrainConfig, TrainingDiverged, compare_convergence,
                        loss, mean_points, rd_sweep, smooth, steps_to_reach, train)

TINY = ModelConfig.desk(N=8, M=8)


def images(n=4, seed=0):
    rng = np.random.default_rng(seed)
    return [synthetic_image(rng) for _ in range(n)]


def test_loss_perfect_reconstruction_one_bpp():
    x = np.random.default_rng(0).random((1, 3, 32, 32))
    pixels = 32 * 32
    out = {"x_hat": Tensor(x), "bits_y": Tensor(np.array(0.75 * pixels)), "bits_z": Tensor(np.array(0.25 * pixels))}
    for lam in (0.0, 2.0, 384.0):
        total, rate, d = loss(x, out, lam)
        assert total.item() == pytest.approx(1.0, abs=1e-12)
        assert rate == pytest.approx(1.0) and d == 1.0


def test_rate_only_loss_falls_as_sigma_shrinks():
    # lam = 0: shrinking the scale head around y = mu lowers the loss
    model = CodecModel(TINY, seed=0)
    x = random_crops(images(), 1, 64, np.random.default_rng(0))
    model.context.zero_()
    # y = 0 = mu everywhere
    model.enc[-1].weight.data[:] = 0
    model.enc[-1].bias.data[:] = 0
    with T.no_grad():
        before = loss(x, model.forward(Tensor(x), np.random.default_rng(1)), 0.0)[0].item()
        model.context.head.bias.data[1] -= 1.0
        after = loss(x, model.forward(Tensor(x), np.random.default_rng(1)), 0.0)[0].item()
    assert after < before


def test_adam_zero_gradient_keeps_params():
    p = T.tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = Adam([[p]])
    p.grad = np.zeros(2)
    for _ in range(5):
        opt.step([1e-2])
    assert p.data.tolist() == [1.0, -2.0]


def test_adam_first_step_moves_by_lr():
    p = T.tensor(np.array([1.0, 1.0]), requires_grad=True)
    opt = Adam([[p]])
    p.grad = np.array([3.0, -0.5])
    opt.step([0.1])
    np.testing.assert_allclose(p.data, [0.9, 1.1], rtol=1e-6)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr_main=0)
    with pytest.raises(ValueError):
        TrainConfig(crop=60)
    with pytest.raises(ValueError):
        TrainConfig(distortion="vgg")


def test_lr_schedule_scales_with_step_cap():
    cfg = TrainConfig(steps=400)
    assert cfg.lr_at(299, 16)[0] == cfg.lr_main
    assert cfg.lr_at(300, 16)[0] == cfg.lr_main_late
    assert cfg.lr_at(399, 16)[1] == cfg.lr_context
    by_epoch = TrainConfig(batch=8)
    assert by_epoch.drop_step(16) == 60
    assert by_epoch.total_steps(16) == 80


def test_empty_dataset(tmp_path):
    with pytest.raises(ValueError):
        train([], TrainConfig(steps=1, model=TINY))
    (tmp_path / "empty").mkdir()
    with pytest.raises(ValueError):
        train(tmp_path / "empty", TrainConfig(steps=1, model=TINY))


def test_short_run_deterministic_and_projected(tmp_path):
    cfg = TrainConfig(steps=6, batch=2, lr_main=1e-2, model=TINY, seed=3)
    a = train(images(), cfg, tmp_path / "a")
    b = train(images(), cfg, tmp_path / "b")
    assert a.curve == b.curve
    assert all(np.isfinite(r[1]) for r in a.curve)
    for m in a.state.model.modules():
        if isinstance(m, GDN):
            assert np.all(m.beta.data >= 1e-6) and np.all(m.gamma.data >= 0)
    with open(tmp_path / "a" / "loss.csv") as f:
        rows = list(csv.reader(f))
    assert tuple(rows[0]) == CURVE_FIELDS and len(rows) == 7
    assert load_state(tmp_path / "a" / "checkpoint").config_hash == a.state.config_hash


def test_train_from_directory(tmp_path):
    make_dataset(tmp_path / "data", 3, 64, seed=1)
    res = train(tmp_path / "data", TrainConfig(steps=2, batch=1, model=TINY))
    assert len(res.curve) == 2


def test_nan_aborts_with_last_good_checkpoint(tmp_path, monkeypatch):
    cfg = TrainConfig(steps=5, batch=1, model=TINY)
    calls = {"n": 0}
    real = CodecModel.forward

    def poisoned(self, x, rng):
        calls["n"] += 1
        out = real(self, x, rng)
        if calls["n"] == 3:
            out["bits_y"] = out["bits_y"] * np.nan
        return out

    monkeypatch.setattr(CodecModel, "forward", poisoned)
    # the first forward call is the initial evaluation, so the third is step 1
    with pytest.raises(TrainingDiverged, match="step 1"):
        train(images(), cfg, tmp_path / "run")
    state = load_state(tmp_path / "run" / "checkpoint")
    assert all(np.all(np.isfinite(p.data)) for p in state.model.parameters())


def test_rd_point_requires_positive_rate():
    with pytest.raises(ValueError):
        RDPoint("a", 2.0, 0.0, 0.9, 10.0, 30.0)


def test_rd_sweep_rows(tmp_path):
    ck = {}
    for lam in (2, 32):
        res = train(images(), TrainConfig(lam=lam, steps=2, batch=1, model=TINY), tmp_path / str(lam))
        ck[lam] = res.checkpoint
    pts = rd_sweep(images(2, seed=5), ck, tmp_path / "rd.csv")
    assert len(pts) == 4
    with open(tmp_path / "rd.csv") as f:
        rows = list(csv.reader(f))
    assert tuple(rows[0]) == RD_FIELDS and len(rows) == 5
    means = mean_points(pts)
    assert sorted(means) == [2.0, 32.0]
    one = rd_sweep(images(1, seed=6), {32: ck[32]})
    assert len(one) == 1 and one[0].bpp > 0


def test_rd_sweep_missing_checkpoint(tmp_path):
    with pytest.raises(FileNotFoundError):
        rd_sweep(images(1), {2: tmp_path / "missing"})


def test_finetune_starts_from_checkpoint(tmp_path):
    base = train(images(), TrainConfig(steps=2, batch=1, model=TINY), tmp_path / "base")
    ft = train(images(), TrainConfig(lam=2, steps=1, batch=1, model=TINY, seed=5), init=base.checkpoint)
    assert ft.initial_eval != train(images(), TrainConfig(lam=2, steps=1, batch=1, model=TINY, seed=5)).initial_eval
    with pytest.raises(ValueError):
        train(images(), TrainConfig(steps=1, batch=1, model=ModelConfig.desk()), init=base.checkpoint)


def test_smooth_is_trailing_mean():
    v = np.array([4.0, 2.0, 6.0, 0.0])
    np.testing.assert_allclose(smooth(v, 2), [4.0, 3.0, 4.0, 3.0])
    np.testing.assert_allclose(smooth(v, 1), v)
    with pytest.raises(ValueError):
        smooth(v, 0)


def test_steps_to_reach_and_compare():
    fast = np.linspace(10, 0, 100)
    slow = np.linspace(10, 5, 100)
    assert steps_to_reach(fast, 5.0, window=1) == 51
    assert steps_to_reach(slow, -1.0) is None
    reached, target = compare_convergence(fast, slow, at=100, window=1)
    assert target == 5.0 and reached == 51
