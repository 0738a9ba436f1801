import json
import os

import numpy as np
import pytest

from entcon import network
from entcon.errors import ConfigError, TrainingDivergedError
from entcon.synth import GenConfig, build_dataset
from entcon.trainer import (EPOCH_LOG_COLUMNS, RunConfig, ablate, evaluate,
                            load_dataset, train)


@pytest.fixture(scope="module")
def tiny_manifest(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    build_dataset(GenConfig(out_dir=str(out), n_train=6, n_val=2,
                            size=(16, 16, 16), labeled_ratio=0.34,
                            categories=("small",), seed=9))
    return str(out / "manifest.json")


def _cfg(manifest, out, **kw):
    base = dict(manifest=manifest, out_dir=out, epochs=2, patch_k=2, top_k=2,
                features=4, embed_dim=6, seed=5)
    base.update(kw)
    return RunConfig(**base)


# ---------------------------------------------------------------------------
# RunConfig


def test_config_json_roundtrip(tmp_path):
    cfg = _cfg("m.json", "out", gamma=0.8, beta_mode="fixed", beta_fixed=0.5)
    path = str(tmp_path / "cfg.json")
    cfg.to_json(path)
    back = RunConfig.from_json(path)
    assert back == cfg


def test_config_override_on_load(tmp_path):
    cfg = _cfg("m.json", "out")
    path = str(tmp_path / "cfg.json")
    cfg.to_json(path)
    back = RunConfig.from_json(path, seed=99, eta=0.0)
    assert back.seed == 99 and back.eta == 0.0


def test_config_rejects_unknown_keys(tmp_path):
    path = str(tmp_path / "cfg.json")
    with open(path, "w") as fh:
        json.dump({"epochs": 3, "bogus_knob": 1}, fh)
    with pytest.raises(ConfigError):
        RunConfig.from_json(path)


def test_config_validation():
    with pytest.raises(ConfigError):
        _cfg("m", "o", epochs=0).validate()
    with pytest.raises(ConfigError):
        _cfg("m", "o", eta=-1.0).validate()
    with pytest.raises(ConfigError):
        _cfg("m", "o", entropy_mode="both").validate()
    with pytest.raises(ConfigError):
        _cfg("m", "o", ema_alpha=1.5).validate()
    with pytest.raises(ConfigError):
        _cfg("m", "o", tau=0.0).validate()


# ---------------------------------------------------------------------------
# Training loop invariants


def test_determinism_bitwise(tiny_manifest, tmp_path):
    a = train(_cfg(tiny_manifest, str(tmp_path / "a")))
    b = train(_cfg(tiny_manifest, str(tmp_path / "b")))
    log_a = open(os.path.join(str(tmp_path / "a"), "epoch_log.csv"), "rb").read()
    log_b = open(os.path.join(str(tmp_path / "b"), "epoch_log.csv"), "rb").read()
    assert log_a == log_b
    for name in ("checkpoint_final", "checkpoint_best"):
        pa = open(os.path.join(str(tmp_path / "a"), name, "params.bin"), "rb").read()
        pb = open(os.path.join(str(tmp_path / "b"), name, "params.bin"), "rb").read()
        assert pa == pb


def test_seed_changes_results(tiny_manifest, tmp_path):
    a = train(_cfg(tiny_manifest, str(tmp_path / "a"), seed=1))
    b = train(_cfg(tiny_manifest, str(tmp_path / "b"), seed=2))
    pa = open(os.path.join(str(tmp_path / "a"), "checkpoint_final", "params.bin"), "rb").read()
    pb = open(os.path.join(str(tmp_path / "b"), "checkpoint_final", "params.bin"), "rb").read()
    assert pa != pb


def test_teacher_never_optimized(tiny_manifest, tmp_path):
    # with EMA decay 1.0 the teacher can only change if something other
    # than the EMA update touches it; it must stay bitwise at its initial
    # state (= the student's init) while the student trains away
    cfg = _cfg(tiny_manifest, str(tmp_path / "run"), ema_alpha=1.0, epochs=1)
    train(cfg)
    streams = np.random.SeedSequence(cfg.seed).spawn(5)
    init = network.init_params(cfg.features, cfg.embed_dim, cfg.classes,
                               np.random.default_rng(streams[0]))
    final, _ = network.load_checkpoint(os.path.join(str(tmp_path / "run"),
                                                    "checkpoint_final"))
    teacher, _ = network.load_checkpoint(os.path.join(str(tmp_path / "run"),
                                                      "checkpoint_final_teacher"))
    for k in network.PARAM_KEYS:
        assert np.array_equal(teacher[k], init[k])
    assert any(not np.array_equal(init[k], final[k]) for k in network.PARAM_KEYS)


def test_beta_logged_matches_schedule(tiny_manifest, tmp_path):
    cfg = _cfg(tiny_manifest, str(tmp_path / "run"), epochs=3, beta_decay=0.7)
    train(cfg)
    sched = cfg.beta_schedule()
    rows = open(os.path.join(str(tmp_path / "run"), "epoch_log.csv")).read().splitlines()
    assert rows[0] == ",".join(EPOCH_LOG_COLUMNS)
    for i, line in enumerate(rows[1:]):
        beta = float(line.split(",")[1])
        assert beta == sched.beta_at(i)


def test_eta_zero_equals_unlabeled_removed(tiny_manifest, tmp_path):
    cfg_a = _cfg(tiny_manifest, str(tmp_path / "with_unl"), eta=0.0)
    train(cfg_a)

    # same manifest with the unlabeled training volumes dropped
    with open(tiny_manifest) as fh:
        manifest = json.load(fh)
    labeled_ids = {e["id"] for e in manifest["volumes"] if e["labeled"]}
    manifest["split"]["train"] = [v for v in manifest["split"]["train"]
                                  if v in labeled_ids]
    manifest["volumes"] = [e for e in manifest["volumes"]
                           if e["id"] in labeled_ids
                           or e["id"] in manifest["split"]["val"]]
    stripped = str(tmp_path / "stripped_manifest.json")
    base = os.path.dirname(tiny_manifest)
    for e in manifest["volumes"]:
        e["image"] = os.path.join(base, e["image"])
        e["mask"] = os.path.join(base, e["mask"])
    with open(stripped, "w") as fh:
        json.dump(manifest, fh)

    cfg_b = _cfg(stripped, str(tmp_path / "no_unl"), eta=0.0)
    train(cfg_b)
    pa = open(os.path.join(str(tmp_path / "with_unl"), "checkpoint_final", "params.bin"), "rb").read()
    pb = open(os.path.join(str(tmp_path / "no_unl"), "checkpoint_final", "params.bin"), "rb").read()
    assert pa == pb


def test_eta_zero_logs_zero_unlabeled_losses(tiny_manifest, tmp_path):
    train(_cfg(tiny_manifest, str(tmp_path / "run"), eta=0.0))
    rows = open(os.path.join(str(tmp_path / "run"), "epoch_log.csv")).read().splitlines()
    for line in rows[1:]:
        cells = line.split(",")
        assert float(cells[3]) == 0.0  # loss_cons
        assert float(cells[4]) == 0.0  # loss_contrast


def test_divergence_aborts_with_checkpoint(tiny_manifest, tmp_path):
    cfg = _cfg(tiny_manifest, str(tmp_path / "run"), lr=1e155, epochs=6)
    with pytest.raises(TrainingDivergedError) as err:
        train(cfg)
    assert err.value.last_good_checkpoint
    params, _ = network.load_checkpoint(err.value.last_good_checkpoint)
    for k in network.PARAM_KEYS:
        assert np.isfinite(params[k]).all()


def test_resolved_config_persisted(tiny_manifest, tmp_path):
    cfg = _cfg(tiny_manifest, str(tmp_path / "run"))
    train(cfg)
    back = RunConfig.from_json(os.path.join(str(tmp_path / "run"),
                                            "resolved_config.json"))
    assert back.manifest == tiny_manifest
    assert back.labeled_ratio == 0.34  # provenance filled from the manifest


def test_timing_sidecar_separate_from_log(tiny_manifest, tmp_path):
    train(_cfg(tiny_manifest, str(tmp_path / "run")))
    log = open(os.path.join(str(tmp_path / "run"), "epoch_log.csv")).read()
    assert "wall" not in log.splitlines()[0]
    timing = open(os.path.join(str(tmp_path / "run"), "timing.csv")).read()
    assert timing.splitlines()[0] == "epoch,wall_time_s"


# ---------------------------------------------------------------------------
# Ablation


def test_ablate_grid_shape(tiny_manifest, tmp_path):
    base = _cfg(tiny_manifest, "", epochs=1)
    res = ablate(base, {"entropy_mode": ["dual", "student_only", "teacher_only"]},
                 seeds=[0], out_dir=str(tmp_path / "abl"))
    assert len(res["cells"]) == 3
    lines = open(res["cells_csv"]).read().splitlines()
    assert lines[0].startswith("entropy_mode,")
    assert len(lines) == 4


def test_ablate_single_cell_matches_train(tiny_manifest, tmp_path):
    base = _cfg(tiny_manifest, "", epochs=1)
    res = ablate(base, {}, seeds=[5], out_dir=str(tmp_path / "abl"))
    direct = train(_cfg(tiny_manifest, str(tmp_path / "direct"), epochs=1, seed=5))
    assert res["cells"][0]["val_dice"] == direct["final"]["val_dice"]


def test_ablate_rejects_unknown_axis(tiny_manifest, tmp_path):
    base = _cfg(tiny_manifest, "", epochs=1)
    with pytest.raises(ConfigError):
        ablate(base, {"lesion_flavor": [1, 2]}, seeds=[0],
               out_dir=str(tmp_path / "abl"))


# ---------------------------------------------------------------------------
# Evaluation


def test_evaluate_oracle_perfect(tiny_manifest, tmp_path):
    res = evaluate(None, tiny_manifest, group_by=["category", "scatter"],
                   out_dir=str(tmp_path / "eval"), oracle=True)
    assert res["overall"]["dice"] == 1.0
    assert res["overall"]["hd95"] == 0.0
    assert (tmp_path / "eval" / "per_volume.csv").exists()
    assert (tmp_path / "eval" / "groups.csv").exists()


def test_evaluate_grouped_means_match_manual(tiny_manifest, tmp_path):
    ck = train(_cfg(tiny_manifest, str(tmp_path / "run")))["checkpoint_final"]
    res = evaluate(ck, tiny_manifest, group_by=["scatter"])
    rows = res["per_volume"]
    for g, agg in res["groups"].items():
        val = g.split("=")[1]
        manual = [r.dice for r in rows if r.scatter == val]
        assert agg["dice"] == pytest.approx(float(np.mean(manual)))
        assert agg["n"] == len(manual)


def test_evaluate_rejects_unknown_group(tiny_manifest):
    with pytest.raises(ConfigError):
        evaluate(None, tiny_manifest, group_by=["mood"], oracle=True)


def test_load_dataset_split(tiny_manifest):
    data = load_dataset(tiny_manifest)
    assert len(data.labeled) == 2      # 34% of 6 -> 2
    assert len(data.unlabeled) == 4
    assert len(data.val) == 2
    assert data.labeled_ratio == 0.34
