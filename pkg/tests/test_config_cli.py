import subprocess
import sys
from importlib import resources

import pytest

from deproj.cli import main
from deproj.config import ConfigError, defaults, parse_config
from deproj.evaluate import read_csv

MICRO_CFG = resources.files("deproj") / "configs" / "micro.cfg"
TOY_CFG = resources.files("deproj") / "configs" / "toy.cfg"


# ---------------------------------------------------------------- config


def test_latent_dim_key():
    assert parse_config("model.latent_dim=10\n")["model.latent_dim"] == 10
    assert defaults()["model.latent_dim"] == 10


def test_unknown_key_cites_line():
    with pytest.raises(ConfigError, match=r"line 1: unknown key 'bogus.key'"):
        parse_config("bogus.key=1")


def test_duplicate_and_type_errors():
    with pytest.raises(ConfigError, match=r"line 3: duplicate key 'train.lr'"):
        parse_config("train.lr=1\n# note\ntrain.lr=2\n")
    with pytest.raises(ConfigError, match=r"line 2: key 'train.epochs' expects int"):
        parse_config("\ntrain.epochs=many\n")
    with pytest.raises(ConfigError, match="expected key=value"):
        parse_config("just words")


def test_comments_lists_and_hash_normalization():
    a = parse_config("eval.k_list = 1, 2,5 # trailing\nmodel.beta=0.5\n")
    b = parse_config("# header\n\nmodel.beta=5e-1\neval.k_list=1,2,5\n")
    assert a["eval.k_list"] == (1, 2, 5)
    assert a.digest() == b.digest()
    assert a.digest() != parse_config("model.beta=0.25").digest()
    lines = a.dump().splitlines()
    assert lines == sorted(lines) and "model.beta=0.5" in lines


def test_shipped_configs_parse():
    for path in (MICRO_CFG, TOY_CFG):
        cfg = parse_config(path.read_text())
        cfg.model((1, cfg["data.frames"], cfg["data.height"], cfg["data.width"]))
        cfg.train()


def test_flag_overrides():
    cfg = defaults().override(eval__method="knn", eval__k_list=(1, 3), train__threads=None)
    assert cfg["eval.method"] == "knn" and cfg["eval.k_list"] == (1, 3) and cfg["train.threads"] == 1


# ---------------------------------------------------------------- CLI


def _run(*args):
    return main([str(a) for a in args])


def test_missing_config_is_usage_error(tmp_path, capsys):
    assert _run("train", tmp_path / "nope.cfg", "--out", tmp_path) == 2
    err = capsys.readouterr().err
    assert "usage:" in err and "error: usage:" in err


def test_bad_flags_are_usage_errors(tmp_path, capsys):
    with pytest.raises(SystemExit) as e:
        _run("fly", MICRO_CFG)
    assert e.value.code == 2
    assert _run("eval", MICRO_CFG, "--out", tmp_path, "--k-list", "5,1") == 2
    assert _run("synth", MICRO_CFG, "--out", tmp_path, "--checkpoint", "x") == 2


def test_config_error_is_runtime_error(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("model.latent_dim=10\nbogus.key=1\n")
    assert _run("synth", bad, "--out", tmp_path / "o") == 1
    assert capsys.readouterr().err.strip() == "error: config: line 2: unknown key 'bogus.key'"


def test_missing_checkpoint_is_runtime_error(tmp_path, capsys):
    assert _run("eval", MICRO_CFG, "--out", tmp_path, "--method", "det") == 1
    assert capsys.readouterr().err.startswith("error: missing-checkpoint:")


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    for cmd in (["synth"], ["train"], ["train", "--method", "det"], ["eval"], ["eval", "--method", "det"],
                ["baseline-knn"], ["baseline-lmmse"], ["montage"], ["sample"]):
        assert _run(cmd[0], MICRO_CFG, "--out", out, "--seed", 3, *cmd[1:]) == 0, cmd
    return out


def test_pipeline_outputs(pipeline):
    names = {p.name for p in pipeline.iterdir()}
    assert {"dataset.dpjk", "cvae.dpjk", "det.dpjk", "cvae_history.csv", "curve_cvae.csv", "curve_det.csv",
            "curve_knn.csv", "curve_lmmse.csv", "lmmse.dpjk", "montage_cvae.pgm", "samples_cvae.dpjk"} <= names


def test_pipeline_curves(pipeline):
    det = read_csv(pipeline / "curve_det.csv")
    assert [k for k, _, _ in det] == [1, 2, 4]
    assert len({s for _, s, _ in det}) == 1 and len({r for _, _, r in det}) == 1
    for method in ("cvae", "knn", "lmmse"):
        best = [s for _, s, _ in read_csv(pipeline / f"curve_{method}.csv")]
        assert best == sorted(best)


def test_montage_dimensions(pipeline):
    data = (pipeline / "montage_cvae.pgm").read_bytes()
    header = data.split(b"\n", 3)
    assert header[0] == b"P5" and header[2] == b"255"
    w, h = map(int, header[1].split())
    # 2 examples x (truth + 2 samples) rows of 4 frames of 8x8
    assert (w, h) == (4 * 8, 6 * 8) and len(header[3]) == w * h


def test_eval_k_list_flag_and_det_flat(pipeline, capsys):
    assert _run("eval", MICRO_CFG, "--out", pipeline, "--seed", 3, "--method", "det", "--k-list", "1,3,7") == 0
    rows = read_csv(pipeline / "curve_det.csv")
    assert [k for k, _, _ in rows] == [1, 3, 7] and len({s for _, s, _ in rows}) == 1
    assert "det k=7" in capsys.readouterr().out


def test_tune_beta_command(tmp_path, capsys):
    assert _run("tune-beta", MICRO_CFG, "--out", tmp_path) == 0
    out = capsys.readouterr().out
    assert "tune-beta: beta=" in out and (tmp_path / "beta.json").exists()
    assert out.count("probe ") <= 12


def test_module_entry_point_exit_code(tmp_path):
    res = subprocess.run([sys.executable, "-m", "deproj.cli", "train", str(tmp_path / "missing.cfg")],
                         capture_output=True, text=True)
    assert res.returncode == 2 and "error: usage:" in res.stderr
