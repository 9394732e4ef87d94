import csv
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from hitpr import cli
from hitpr import numcore as nc
from hitpr.harness import gen_synthetic, write_submap

ROOT = Path(__file__).resolve().parents[1]
QUICKSTART = ROOT / "configs" / "synthetic_quickstart.cfg"
TINY = ["--set", "k=8", "--set", "d_i=8", "--set", "d_a=8", "--set", "d_s=8", "--set", "d_k=4",
        "--set", "d_v=8", "--set", "d_b=8", "--set", "d_g=8", "--set", "pos_hidden=8",
        "--set", "n_neg=2"]


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    out = tmp_path_factory.mktemp("syn")
    gen_synthetic(out, n_places=4, clouds_per_place=3, points_per_cloud=48, seed=2)
    return out


@pytest.fixture(scope="module")
def trained(data, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert cli.main(["train", "--catalog", str(data / "catalog.csv"), "--epochs", "2",
                     "--out", str(out), *TINY]) == 0
    return out / "model.ckpt"


def test_help_exits_zero():
    with pytest.raises(SystemExit) as exc:
        cli.main(["--help"])
    assert exc.value.code == 0


def test_module_entry_point_help():
    res = subprocess.run([sys.executable, "-m", "hitpr.cli", "train", "--help"],
                         capture_output=True, text=True)
    assert res.returncode == 0 and "--catalog" in res.stdout


def test_invalid_flag_exits_nonzero(tmp_path):
    with pytest.raises(SystemExit) as exc:
        cli.main(["train", "--bogus", "--out", str(tmp_path / "x")])
    assert exc.value.code != 0
    assert not (tmp_path / "x").exists()


def test_unknown_config_key_rejected(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("epochs = 1\nlearning_rate = 3\n")
    assert cli.main(["train", "--config", str(cfg)]) == 2
    assert "learning_rate" in capsys.readouterr().err


def test_config_file_and_overrides(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("# comment\nepochs = 3  # trailing\nd_g=16\nsuccess_radius = 10\n")
    rc = cli.load_run_config(cfg, ["epochs=5", "l2_normalize=true"])
    assert rc.model.epochs == 5 and rc.model.d_g == 16 and rc.model.l2_normalize
    assert rc.success_radius == 10.0
    assert cli.load_run_config().model == cli.HiTPRConfig()
    with pytest.raises(nc.ConfigError):
        cli.load_run_config(None, ["k=abc"])
    with pytest.raises(nc.ConfigError):
        cli.load_run_config(None, ["bn_mode=sideways"])


def test_data_dir_from_environment(monkeypatch):
    monkeypatch.setenv(cli.DATA_DIR_ENV, "/somewhere")
    assert cli.load_run_config().data_dir == "/somewhere"


def test_missing_catalog_names_path(tmp_path, capsys):
    missing = tmp_path / "nope.csv"
    assert cli.main(["train", "--catalog", str(missing), "--out", str(tmp_path)]) != 0
    assert str(missing) in capsys.readouterr().err


def test_zero_epochs_writes_initial_checkpoint(data, tmp_path):
    assert cli.main(["train", "--catalog", str(data / "catalog.csv"), "--epochs", "0",
                     "--out", str(tmp_path), *TINY]) == 0
    assert (tmp_path / "model.ckpt").is_file()


def test_quickstart_config_writes_twenty_checkpoints(data, tmp_path):
    assert cli.main(["train", "--config", str(QUICKSTART), "--catalog", str(data / "catalog.csv"),
                     "--out", str(tmp_path), "--set", "n_neg=2"]) == 0
    assert len(list(tmp_path.glob("checkpoint_epoch*.ckpt"))) == 20
    with open(tmp_path / "loss_log.csv") as fh:
        assert {r["epoch"] for r in csv.DictReader(fh)} == {str(e) for e in range(1, 21)}


def test_embed_three_entries_bitwise_rerun(data, trained, tmp_path):
    (tmp_path / "three.csv").write_text(
        "id,northing,easting\n" + "".join(
            line for line in (data / "catalog.csv").read_text().splitlines(keepends=True)[1:4]))
    args = ["embed", "--checkpoint", str(trained), "--catalog", str(tmp_path / "three.csv"),
            "--data-dir", str(data), *TINY]
    assert cli.main([*args, "--out", str(tmp_path / "a")]) == 0
    assert cli.main([*args, "--out", str(tmp_path / "b")]) == 0
    man = (tmp_path / "a" / "descriptors.csv").read_text().splitlines()
    assert man == ["cloud_id,offset", "p000_c00,0", "p000_c01,32", "p000_c02,64"]
    for name in ("descriptors.bin", "descriptors.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_embed_corrupted_checkpoint(data, trained, tmp_path, capsys):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(trained.read_bytes()[:-5])
    assert cli.main(["embed", "--checkpoint", str(bad), "--catalog", str(data / "catalog.csv"),
                     "--out", str(tmp_path), *TINY]) != 0
    assert "error" in capsys.readouterr().err


def test_embed_shape_mismatch(data, trained, tmp_path):
    assert cli.main(["embed", "--checkpoint", str(trained), "--catalog", str(data / "catalog.csv"),
                     "--out", str(tmp_path), *TINY, "--set", "d_g=16"]) != 0


def test_eval_writes_curve(data, trained, tmp_path, capsys):
    assert cli.main(["eval", "--checkpoint", str(trained), "--queries", str(data / "queries.csv"),
                     "--db", str(data / "database.csv"), "--out", str(tmp_path), *TINY]) == 0
    printed = capsys.readouterr().out
    assert "recall@1:" in printed and "recall@1%" in printed
    rows = (tmp_path / "recall_curve.csv").read_text().splitlines()
    assert rows[0] == "n,recall" and len(rows) == 26
    assert (tmp_path / "eval_report.txt").read_text() == printed


def test_eval_radius_zero(data, trained, tmp_path):
    assert cli.main(["eval", "--checkpoint", str(trained), "--queries", str(data / "queries.csv"),
                     "--db", str(data / "database.csv"), "--radius", "0", "--out", str(tmp_path),
                     *TINY]) == 0
    with open(tmp_path / "recall_curve.csv") as fh:
        assert all(float(r["recall"]) == 0.0 for r in csv.DictReader(fh))


def test_retrieve_prints_ranked_ids(data, trained, capsys):
    query = data / "p001_c02.bin"
    assert cli.main(["retrieve", str(query), "--checkpoint", str(trained),
                     "--db", str(data / "database.csv"), "-n", "3", *TINY]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert [line.split("\t")[0] for line in lines] == ["1", "2", "3"]


def test_gen_synthetic_command(tmp_path):
    assert cli.main(["gen-synthetic", "--out", str(tmp_path), "--places", "2",
                     "--clouds-per-place", "2", "--points", "16"]) == 0
    assert (tmp_path / "p001_c01.bin").stat().st_size == 16 * 24
    assert cli.main(["gen-synthetic", "--out", str(tmp_path), "--jitter", "9"]) == 2


def test_param_count_prints_reference(capsys):
    assert cli.main(["param-count"]) == 0
    out = capsys.readouterr().out
    assert "2162560" in out and "2.72M" in out


def test_threads_flag(capsys):
    assert cli.main(["--threads", "1", "param-count", "--set", "d_g=8"]) == 0


@pytest.mark.slow
def test_selftest_passes(capsys):
    assert cli.main(["selftest"]) == 0
    out = capsys.readouterr().out
    assert out.count("[PASS]") == 6 and "[FAIL]" not in out


def test_selftest_gradient_group_catches_broken_backward(monkeypatch):
    def leaky_relu_backward(x):
        x = nc.as_tensor(x)
        mask = x.data > 0
        nc._note_branch(np.packbits(mask))
        return nc._result(np.where(mask, x.data, 0.0), (x,), lambda g: x._accum(g * mask * 1.01))

    from hitpr import selftest
    monkeypatch.setattr(nc, "relu", leaky_relu_backward)
    lines = []
    ok = selftest.run_selftest(groups=[("gradients", selftest.group_gradients)], out=lines.append)
    assert not ok
    assert lines[0].startswith("[FAIL] gradients")


def test_selftest_crashing_group_reported_as_failure():
    from hitpr import selftest

    def boom(seed):
        raise RuntimeError("kaput")

    lines = []
    assert not selftest.run_selftest(groups=[("boom", boom)], out=lines.append)
    assert "kaput" in lines[0]


def test_retrieve_missing_checkpoint(data, tmp_path, capsys):
    write_submap(tmp_path / "q.bin", np.zeros((48, 3)))
    assert cli.main(["retrieve", str(tmp_path / "q.bin"), "--checkpoint",
                     str(tmp_path / "none.ckpt"), "--db", str(data / "database.csv")]) == 2
    assert "none.ckpt" in capsys.readouterr().err
