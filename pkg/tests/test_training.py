import numpy as np
import pytest

from tmresnet.autodiff import Parameter
from tmresnet.data_io import read_metrics
from tmresnet.errors import ConfigError
from tmresnet.training import SGD, RunConfig, dump_run_config, load_run_config, train

TINY = dict(synth_n=64, synth_test_n=32, synth_size=8, model="inline", channels="4,8", blocks="4,4", stem_channels=4, epochs=2, batch_size=16)


def write_cfg(path, **keys):
    path.write_text("[run]\n" + "".join(f"{k} = {v}\n" for k, v in keys.items()))
    return path


def test_sgd_matches_hand_update():
    p = Parameter(np.array([1.0, -2.0]))
    opt = SGD([p], momentum=0.9, weight_decay=0.1)
    p.grad[...] = [0.5, 0.5]
    opt.step(0.1)
    v1 = np.array([0.5 + 0.1, 0.5 - 0.2])
    np.testing.assert_allclose(p.data, [1.0, -2.0] - 0.1 * v1)
    before = p.data.copy()
    opt.step(0.1)
    v2 = 0.9 * v1 + (np.array([0.5, 0.5]) + 0.1 * before)
    np.testing.assert_allclose(p.data, before - 0.1 * v2)


def test_step_schedule():
    cfg = RunConfig(lr=0.1, lr_schedule="step", lr_step_epochs=2, lr_step_factor=0.5)
    assert [cfg.lr_at(e) for e in (1, 2, 3, 5)] == [0.1, 0.1, 0.05, 0.025]


def test_paper_full_preset():
    cfg = RunConfig.paper_full()
    assert (cfg.epochs, cfg.batch_size, cfg.model) == (120, 256, "tmresnet22-cifar")
    assert cfg.model_config().classes == 10


def test_config_file_round_trip(tmp_path):
    cfg = RunConfig(seed=3, **TINY)
    p = tmp_path / "c.ini"
    p.write_text(dump_run_config(cfg))
    assert load_run_config(p) == cfg


def test_config_rejects_unknown_key(tmp_path):
    with pytest.raises(ConfigError) as info:
        load_run_config(write_cfg(tmp_path / "c.ini", learning_rate=0.1))
    assert info.value.field == "learning_rate"


def test_config_rejects_bad_values(tmp_path):
    for key, val in (("epochs", 0), ("lr", -1), ("batch_size", "x"), ("dataset", "imagenet")):
        with pytest.raises(ConfigError):
            load_run_config(write_cfg(tmp_path / "c.ini", **{key: val}))


def test_config_base_and_overrides(tmp_path):
    p = write_cfg(tmp_path / "c.ini", base="paper-full", epochs=3)
    cfg = load_run_config(p, seed=11)
    assert cfg.epochs == 3 and cfg.batch_size == 256 and cfg.seed == 11


def test_train_writes_artifacts_and_is_deterministic(tmp_path):
    runs = []
    for name in ("a", "b"):
        res = train(RunConfig(seed=5, out_dir=str(tmp_path / name), **TINY))
        runs.append(res)
    a, b = (tmp_path / "a" / "metrics.csv").read_bytes(), (tmp_path / "b" / "metrics.csv").read_bytes()
    assert a == b
    rows = read_metrics(tmp_path / "a" / "metrics.csv")
    assert [(r["epoch"], r["split"]) for r in rows] == [("1", "train"), ("1", "test"), ("2", "train"), ("2", "test")]
    for f in ("final.ckpt", "best.ckpt", "summary.json"):
        assert (tmp_path / "a" / f).is_file()
    assert runs[0].param_count == runs[1].param_count


def test_train_tm_and_euler_same_param_count(tmp_path):
    counts = [
        train(RunConfig(scheme=s, out_dir=str(tmp_path / s), **{**TINY, "epochs": 1})).param_count
        for s in ("euler", "tm")
    ]
    assert counts[0] == counts[1]
