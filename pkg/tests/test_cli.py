import json
import os

import pytest

from entcon.cli import main


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    rc = main(["gen-data", "--out", str(d / "data"), "--n-train", "6",
               "--n-val", "2", "--size", "16", "--labeled-ratio", "0.34",
               "--categories", "small", "--seed", "4"])
    assert rc == 0
    return d


def _train_args(d, out, extra=()):
    return ["train", "--manifest", str(d / "data" / "manifest.json"),
            "--out", str(d / out), "--epochs", "1", "--patch-k", "2",
            "--top-k", "2", "--seed", "2"] + list(extra)


def test_no_subcommand_is_usage_error(capsys):
    assert main([]) == 1


def test_unknown_flag_rejected():
    assert main(["train", "--warp-speed", "9"]) == 1


def test_unknown_subcommand_rejected():
    assert main(["transmogrify"]) == 1


def test_missing_config_is_io_error():
    assert main(["train", "--config", "/nonexistent/cfg.json"]) == 3


def test_gen_data_refuses_clobber(workdir):
    rc = main(["gen-data", "--out", str(workdir / "data"), "--size", "16"])
    assert rc == 3


def test_train_and_artifacts(workdir, capsys):
    rc = main(_train_args(workdir, "run1", ["--json"]))
    assert rc == 0
    summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert "best_val_dice" in summary
    out = workdir / "run1"
    for f in ("epoch_log.csv", "timing.csv", "resolved_config.json"):
        assert (out / f).exists()
    assert (out / "checkpoint_final" / "params.bin").exists()


def test_train_refuses_clobber_then_overwrites(workdir):
    assert main(_train_args(workdir, "run1")) == 3
    assert main(_train_args(workdir, "run1", ["--overwrite"])) == 0


def test_config_file_with_flag_override(workdir, tmp_path, capsys):
    cfg = {
        "manifest": str(workdir / "data" / "manifest.json"),
        "out_dir": str(tmp_path / "cfgrun"),
        "epochs": 1, "patch_k": 2, "top_k": 2, "seed": 7,
    }
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    rc = main(["train", "--config", str(path), "--eta", "0.0", "--json"])
    assert rc == 0
    resolved = json.loads((tmp_path / "cfgrun" / "resolved_config.json").read_text())
    assert resolved["eta"] == 0.0
    assert resolved["seed"] == 7


def test_eval_oracle(workdir, capsys):
    rc = main(["eval", "--oracle", "--manifest",
               str(workdir / "data" / "manifest.json"),
               "--out", str(workdir / "eval"), "--json"])
    assert rc == 0
    summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert summary["overall"]["dice"] == 1.0
    assert (workdir / "eval" / "per_volume.csv").exists()


def test_eval_needs_checkpoint_or_oracle(workdir):
    rc = main(["eval", "--manifest", str(workdir / "data" / "manifest.json"),
               "--out", str(workdir / "eval2")])
    assert rc == 1


def test_export_maps(workdir, capsys):
    rc = main(["export-maps", "--checkpoint", str(workdir / "run1" / "checkpoint_final"),
               "--image", str(workdir / "data" / "vol_000_img.bin"),
               "--axis", "D", "--out", str(workdir / "maps"), "--json"])
    assert rc == 0
    summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert summary["slices"] == 16
    assert (workdir / "maps" / "slice_D_0.csv").exists()


def test_ablate_two_cells(workdir, capsys):
    rc = main(["ablate", "--manifest", str(workdir / "data" / "manifest.json"),
               "--out", str(workdir / "abl"), "--epochs", "1",
               "--patch-k", "2", "--top-k", "2",
               "--axis", "use_consistency=true,false", "--seeds", "0", "--json"])
    assert rc == 0
    lines = (workdir / "abl" / "ablation_cells.csv").read_text().splitlines()
    assert len(lines) == 3
    assert lines[0].startswith("use_consistency,")


def test_ablate_bad_axis(workdir):
    rc = main(["ablate", "--manifest", str(workdir / "data" / "manifest.json"),
               "--out", str(workdir / "abl2"), "--axis", "nonsense"])
    assert rc == 1
