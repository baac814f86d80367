import csv
import subprocess
import sys

import numpy as np
import pytest

from tmresnet.cli import main
from tmresnet.data_io import save_checkpoint
from tmresnet.stacks import build_model, preset


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# bench-ode ----------------------------------------------------------------------


def test_bench_ode_euler_tm(tmp_path, capsys):
    out = tmp_path / "b.csv"
    code, stdout, _ = run(
        capsys, "bench-ode", "--methods", "euler,tm", "--problem", "decay-sin", "--taus", "0.1,0.05,0.025,0.0125", "--csv", str(out)
    )
    assert code == 0
    rows = read_csv(out)
    assert list(rows[0]) == ["method", "tau", "error", "fitted_order"]
    errors = [r for r in rows if r["tau"]]
    orders = {r["method"]: float(r["fitted_order"]) for r in rows if not r["tau"]}
    assert len(errors) == 8 and len(orders) == 2
    assert orders["tm"] > orders["euler"]
    assert "fitted order" in stdout


def test_bench_ode_all_methods(tmp_path, capsys):
    code, _, _ = run(capsys, "--out", str(tmp_path), "bench-ode", "--methods", "all")
    assert code == 0
    rows = read_csv(tmp_path / "bench_ode.csv")
    assert len({r["method"] for r in rows if not r["tau"]}) == 7


def test_bench_ode_out_env(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("TMRESNET_OUT_DIR", str(tmp_path / "env"))
    assert run(capsys, "bench-ode", "--methods", "rk4")[0] == 0
    assert (tmp_path / "env" / "bench_ode.csv").is_file()


@pytest.mark.parametrize(
    "argv, needle",
    [
        (["bench-ode", "--problem", "foo"], "decay-sin"),
        (["bench-ode", "--methods", "euler,midpoint"], "euler"),
        (["bench-ode", "--taus", "0.1,0.05"], "4"),
        (["bench-ode", "--frobnicate"], "unrecognized"),
        ([], "subcommand"),
    ],
)
def test_usage_errors_exit_2(tmp_path, capsys, argv, needle):
    code, _, err = run(capsys, "--out", str(tmp_path), *argv)
    assert code == 2 and needle in err
    assert not any(tmp_path.iterdir())


# count-params -------------------------------------------------------------------


def total_of(stdout):
    return int(next(l for l in stdout.splitlines() if l.startswith("total=")).split("=")[1])


def test_count_params_preact18(capsys):
    code, out, _ = run(capsys, "count-params", "--preset", "preactresnet18-cifar")
    assert code == 0 and 11_060_000 <= total_of(out) <= 11_280_000
    assert "depth=18" in out and "stage4" in out
    _, out100, _ = run(capsys, "count-params", "--preset", "preactresnet18-cifar", "--classes", "100")
    assert total_of(out100) - total_of(out) == 46_170


@pytest.mark.parametrize("tm, euler", [("tmresnet-desk", "preactresnet-desk")])
def test_count_params_parity(capsys, tm, euler):
    assert total_of(run(capsys, "count-params", "--preset", tm)[1]) == total_of(run(capsys, "count-params", "--preset", euler)[1])


def test_count_params_unknown_preset(capsys):
    assert run(capsys, "count-params", "--preset", "resnet50")[0] == 2


# grad-check ---------------------------------------------------------------------


@pytest.mark.parametrize("target", ["conv", "tm-block"])
def test_grad_check_passes(capsys, target):
    code, out, _ = run(capsys, "grad-check", "--target", target, "--samples", "16")
    assert code == 0 and "PASS" in out


def test_grad_check_zero_tolerance_fails(capsys):
    code, out, _ = run(capsys, "grad-check", "--target", "conv", "--tolerance", "0", "--samples", "4")
    assert code == 1 and "FAIL" in out


# eval ---------------------------------------------------------------------------


@pytest.fixture
def fresh_ckpt(tmp_path):
    p = tmp_path / "fresh.ckpt"
    save_checkpoint(build_model(preset("preactresnet-desk", classes=10)), p)
    return p


def eval_argv(ckpt, *extra):
    return ["eval", "--checkpoint", str(ckpt), "--synth-classes", "10", "--synth-n", "500", "--synth-size", "16", *extra]


def test_eval_fresh_model_is_chance(capsys, fresh_ckpt):
    code, out, _ = run(capsys, *eval_argv(fresh_ckpt))
    assert code == 0
    acc = float(out.split("accuracy=")[1].split()[0])
    assert 0.05 <= acc <= 0.20


def test_eval_chance_band_over_seeds(tmp_path, capsys):
    # single inits collapse onto one or two classes, so average over several
    accs = []
    for seed in range(8):
        p = tmp_path / f"s{seed}.ckpt"
        save_checkpoint(build_model(preset("preactresnet-desk", classes=10, seed=seed)), p)
        out = run(capsys, *eval_argv(p, "--synth-n", "200"))[1]
        accs.append(float(out.split("accuracy=")[1].split()[0]))
    assert 0.05 <= np.mean(accs) <= 0.20


def test_eval_repeatable(capsys, fresh_ckpt):
    assert run(capsys, *eval_argv(fresh_ckpt)) == run(capsys, *eval_argv(fresh_ckpt))


def test_eval_channel_mismatch(capsys, fresh_ckpt):
    code, _, err = run(capsys, *eval_argv(fresh_ckpt, "--synth-channels", "1"))
    assert code == 1 and "ShapeMismatch" in err


def test_eval_missing_checkpoint(tmp_path, capsys):
    assert run(capsys, "eval", "--checkpoint", str(tmp_path / "nope.ckpt"))[0] == 1


# train --------------------------------------------------------------------------

TINY_INI = """[run]
synth_n = 64
synth_test_n = 32
synth_size = 8
model = inline
scheme = tm
channels = 4,8
blocks = 4,4
stem_channels = 4
epochs = 2
batch_size = 16
"""


def test_train_cli_deterministic(tmp_path, capsys):
    cfg = tmp_path / "tiny.ini"
    cfg.write_text(TINY_INI)
    for name in ("a", "b"):
        code, out, _ = run(capsys, "--config", str(cfg), "--seed", "3", "train", "--out", str(tmp_path / name))
        assert code == 0 and "best_accuracy=" in out
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    code, out, _ = run(capsys, "eval", "--checkpoint", str(tmp_path / "a" / "final.ckpt"), "--synth-size", "8", "--synth-n", "32")
    assert code == 0 and "accuracy=" in out


def test_train_config_errors_exit_1(tmp_path, capsys):
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[run]\nepochs = 0\n")
    code, _, err = run(capsys, "train", "--config", str(cfg))
    assert code == 1 and "epochs" in err
    cfg.write_text("[run]\nepochz = 3\n")
    assert run(capsys, "train", "--config", str(cfg))[0] == 1


def test_train_without_config_is_usage_error(capsys):
    assert run(capsys, "train")[0] == 2


def test_module_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "tmresnet", "bench-ode", "--problem", "foo"], capture_output=True, text=True, cwd=tmp_path
    )
    assert proc.returncode == 2
