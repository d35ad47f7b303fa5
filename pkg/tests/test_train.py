import numpy as np
import pytest

from gtasr import tensor as tt
from gtasr.config import Config, ConfigError, parse
from gtasr.model import PredictorNet, load_checkpoint, predict, save_checkpoint
from gtasr.train import (
    AdamState,
    TrainingDiverged,
    optimizer_step,
    train_stage1,
    train_stage2,
)
from gtasr.tensor import Tensor


def small_cfg(**kw):
    base = dict(train__batch_size=2, data__size=16, data__val_count=4, model__width=8, model__mid_depth=1,
                train__sync_period=3)
    base.update(kw)
    return Config().copy(**base)


# ---------------------------------------------------------------- optimizer


def test_zero_gradient_leaves_parameters():
    p = {"w": Tensor(np.array([1.0, -2.0]), requires_grad=True)}
    before = p["w"].data.copy()
    optimizer_step(p, {"w": np.zeros(2)}, AdamState(), 1e-2)
    np.testing.assert_array_equal(p["w"].data, before)


@pytest.mark.parametrize("g", [0.3, -5.0, 1e-3])
def test_first_adam_step(g):
    p = {"w": Tensor(np.array([0.5]), requires_grad=True)}
    lr = 1e-2
    optimizer_step(p, {"w": np.array([g])}, AdamState(), lr)
    # m_hat = g, v_hat = g^2 after bias correction, so the step is lr * g / (|g| + eps)
    expect = 0.5 - lr * g / (abs(g) + 1e-8)
    assert p["w"].data[0] == pytest.approx(expect, rel=1e-6)
    assert abs(p["w"].data[0] - 0.5) == pytest.approx(lr, rel=1e-4)


def test_optimizer_errors():
    p = {"w": Tensor(np.zeros(2), requires_grad=True)}
    with pytest.raises(ValueError):
        optimizer_step(p, {"w": np.zeros(3)}, AdamState(), 1e-3)
    with pytest.raises(KeyError):
        optimizer_step(p, {}, AdamState(), 1e-3)


def test_adam_state_roundtrip():
    p = {"w": Tensor(np.zeros(3), requires_grad=True)}
    s = AdamState()
    optimizer_step(p, {"w": np.ones(3)}, s, 1e-3)
    s2 = AdamState()
    s2.load(s.arrays())
    assert s2.step == 1
    np.testing.assert_array_equal(s2.m["w"], s.m["w"])


# ---------------------------------------------------------------- config


def test_config_parse_and_errors(tmp_path):
    assert parse("a=1 # note\n\n# full comment\nb = x y\n") == {"a": "1", "b": "x y"}
    with pytest.raises(ConfigError):
        parse("no equals sign")
    with pytest.raises(ConfigError):
        Config({"model.depth": "3"})
    f = tmp_path / "c.txt"
    Config().copy(seed=7).save(f)
    assert Config.load(f).get_int("seed") == 7
    assert Config().get_list("data.kinds") == ["grf", "checker", "shapes"]


def test_lr_must_be_positive():
    with pytest.raises(ValueError):
        train_stage1(small_cfg(train__lr=0), iterations=1)


# ---------------------------------------------------------------- stage I


def test_zero_iterations_checkpoint_is_initialization(tmp_path):
    cfg = small_cfg()
    res = train_stage1(cfg, tmp_path, iterations=0)
    arrays, it, stage = load_checkpoint(res.checkpoint)
    init = PredictorNet(res.net.arch, seed=cfg.get_int("model.init_seed") + cfg.get_int("seed"))
    assert (it, stage) == (0, 1)
    for k, p in init.params.items():
        assert arrays[k].tobytes() == p.data.tobytes()


def test_stage1_deterministic_and_logs(tmp_path):
    cfg = small_cfg()
    a = train_stage1(cfg, tmp_path / "a", iterations=10)
    b = train_stage1(cfg, tmp_path / "b", iterations=10)
    assert a.checkpoint.read_bytes() == b.checkpoint.read_bytes()
    header = (tmp_path / "a" / "metrics.csv").read_text().splitlines()
    assert header[0] == "iteration,t,loss_total,loss_ct,loss_ta,wall_time"
    assert len(header) == 11
    c = train_stage1(cfg.copy(seed=43), None, iterations=10)
    assert any(c.net.params[k].data.tobytes() != a.net.params[k].data.tobytes() for k in c.net.params)


def test_stage1_only_online_changes(tmp_path):
    cfg = small_cfg()
    res = train_stage1(cfg, None, iterations=3)
    trip = res.triplet
    # the reference is refreshed before the final update, so it lags the online net by one step
    assert any(trip.reference.params[k].data.tobytes() != p.data.tobytes() for k, p in trip.online.params.items())
    assert all(p.grad is None for p in trip.reference.params.values())
    assert all(not p.requires_grad for p in trip.target.params.values())


def test_nan_loss_aborts_with_dump(tmp_path, monkeypatch):
    import gtasr.train as tr

    real = tr.stage_totals

    def poisoned(losses, stage, lw=None):
        out = real(losses, stage, lw)
        return tt.mul(out, float("nan"))

    monkeypatch.setattr(tr, "stage_totals", poisoned)
    with pytest.raises(TrainingDiverged):
        train_stage1(small_cfg(), tmp_path, iterations=2)
    assert '"iteration": 1' in (tmp_path / "diverged.json").read_text()


# ---------------------------------------------------------------- stage II


@pytest.fixture(scope="module")
def stage1_ckpt(tmp_path_factory):
    d = tmp_path_factory.mktemp("s1")
    return train_stage1(small_cfg(), d, iterations=4).checkpoint


def test_stage2_missing_init(tmp_path):
    with pytest.raises(FileNotFoundError):
        train_stage2(small_cfg(), tmp_path / "nope.gtck", iterations=1)
    with pytest.raises(FileNotFoundError):
        train_stage2(small_cfg(), None, iterations=1)


def test_stage2_sync_period_bound(stage1_ckpt):
    with pytest.raises(ValueError):
        train_stage2(small_cfg(train__sync_period=10), stage1_ckpt, iterations=5)


def test_target_lifecycle(stage1_ckpt):
    probe_x = np.random.default_rng(0).random((1, 1, 16, 16)).astype(np.float32)
    log = []

    def probe(i, trip):
        tgt = predict(trip.target, probe_x, probe_x, 3).data.tobytes()
        onl = predict(trip.online, probe_x, probe_x, 3).data.tobytes()
        log.append((i, tgt, onl))

    train_stage2(small_cfg(), stage1_ckpt, iterations=7, probe=probe)
    synced = [i for i, t, o in log if t == o]
    assert synced == [1, 4, 7]
    for (i, t, _), (j, t2, _) in zip(log, log[1:]):
        if j not in (4, 7):
            assert t == t2, (i, j)
        else:
            assert t != t2


def test_stage2_deterministic_and_roundtrip(tmp_path, stage1_ckpt):
    cfg = small_cfg()
    a = train_stage2(cfg, stage1_ckpt, tmp_path / "a", iterations=4)
    b = train_stage2(cfg, stage1_ckpt, tmp_path / "b", iterations=4)
    assert a.checkpoint.read_bytes() == b.checkpoint.read_bytes()
    arrays, it, stage = load_checkpoint(a.checkpoint)
    assert (it, stage) == (4, 2)
    assert any(k.startswith("target.") for k in arrays) and any(k.startswith("adam.") for k in arrays)
    save_checkpoint(tmp_path / "again.gtck", arrays, it, stage)
    assert (tmp_path / "again.gtck").read_bytes() == a.checkpoint.read_bytes()
    header = (tmp_path / "a" / "metrics.csv").read_text().splitlines()[0]
    assert header == "iteration,t,loss_total,loss_ct,loss_dtm,loss_stab,loss_rect,wall_time"


def test_stage2_ablation_skips_zero_weight_terms(stage1_ckpt):
    res = train_stage2(small_cfg(loss__lambda_stab=0, loss__lambda_rect=0), stage1_ckpt, iterations=3)
    assert all(r["loss_stab"] == 0.0 and r["loss_rect"] == 0.0 for r in res.history)
    assert all(r["loss_dtm"] >= 0.0 for r in res.history)


def test_late_T_switch():
    from gtasr.train import schedule_for

    cfg = small_cfg(schedule__T_late=4)
    assert schedule_for(cfg, 1, 5, 10).T == 5
    assert schedule_for(cfg, 1, 6, 10).T == 4
    assert schedule_for(small_cfg(), 1, 10, 10).T == 5
