import json
import subprocess
import sys

import numpy as np
import pytest

from cgn import cli

FAST = {"epochs": 2, "batch_size": 16, "generator_blocks": 1, "backbone_width": 8, "feature_channels": 8,
        "fusion_channels": 16, "snapshot_every": 1}


def run(args, capsys):
    code = cli.main(args)
    out = capsys.readouterr()
    return code, out.out, out.err


def last_json(text):
    return json.loads(text.strip().splitlines()[-1])


@pytest.fixture(scope="module")
def trained(tiny_dataset, tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(FAST))
    assert cli.main(["train", "--config", str(cfg), "--data", str(tiny_dataset), "--out", str(root / "run")]) == 0
    return root


def test_no_arguments_prints_usage(capsys):
    code, _, err = run([], capsys)
    assert code == 2 and "usage:" in err


def test_entry_point_no_arguments():
    out = subprocess.run([sys.executable, "-m", "cgn.cli"], capture_output=True, text=True)
    assert out.returncode == 2 and "usage:" in out.stderr


def test_unknown_command(capsys):
    code, _, _ = run(["frobnicate"], capsys)
    assert code == 2


def test_verify_scm_fixture(fixtures_dir, capsys):
    code, out, _ = run(["verify-scm", "--spec", str(fixtures_dir / "symmetric.spec"), "--tolerance", "1e-9"], capsys)
    assert code == 0
    assert out.splitlines()[0] == "pass=true"
    rec = last_json(out)
    assert rec["tv_eq3"] == 0.0 and rec["tv_eq2"] <= 1e-9


def test_verify_scm_broken_fixture(fixtures_dir, capsys):
    code, out, _ = run(["verify-scm", "--spec", str(fixtures_dir / "broken.spec")], capsys)
    assert code == 1 and out.startswith("pass=false")


def test_verify_scm_random(capsys):
    code, out, _ = run(["verify-scm", "--random", "5", "--seed", "3"], capsys)
    assert code == 0 and last_json(out)["specs"] == 5


def test_verify_scm_missing_file(capsys, tmp_path):
    code, _, err = run(["verify-scm", "--spec", str(tmp_path / "none.json")], capsys)
    assert code == 1 and "error" in err


def test_synth_uses_output_root(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv(cli.OUTPUT_ROOT_ENV, str(tmp_path))
    code, out, _ = run(["synth", "--n", "10", "--seed", "4"], capsys)
    assert code == 0
    rec = last_json(out)
    assert rec["out"] == str(tmp_path / "synth-seed4")
    assert (rec["train"], rec["val"], rec["test"]) == (8, 1, 1)


def test_synth_bad_config(tmp_path, capsys):
    cfg = tmp_path / "s.json"
    cfg.write_text(json.dumps({"malign_fraction": 2}))
    code, _, err = run(["synth", "--config", str(cfg), "--out", str(tmp_path / "o")], capsys)
    assert code == 1 and "malign_fraction" in err


def test_preprocess(tmp_path, capsys):
    from cgn import synth_data as sd
    from cgn.preprocess import save_png

    (tmp_path / "in").mkdir()
    save_png(sd.generate_sample(sd.SynthConfig(), 0).x_T, tmp_path / "in" / "a.png")
    code, out, _ = run(["preprocess", "--in", str(tmp_path / "in"), "--out", str(tmp_path / "out")], capsys)
    assert code == 0 and last_json(out)["n"] == 1


def test_train_writes_run(trained):
    run_dir = trained / "run"
    for name in ("checkpoint.pt", "features.npz", "train_log.csv", "metrics.json"):
        assert (run_dir / name).is_file()


def test_train_rejects_unknown_config_key(tiny_dataset, tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"learning_rate": 1.0}))
    code, _, err = run(["train", "--config", str(cfg), "--data", str(tiny_dataset)], capsys)
    assert code == 1 and "learning_rate" in err


def test_eval_with_localization_csv(trained, tiny_dataset, capsys):
    loc = trained / "loc.csv"
    code, out, _ = run(["eval", "--checkpoint", str(trained / "run" / "checkpoint.pt"), "--data", str(tiny_dataset),
                        "--localization", str(loc)], capsys)
    assert code == 0
    rec = last_json(out)
    assert rec["split"] == "test" and 0.0 <= rec["auc"] <= 1.0
    lines = loc.read_text().splitlines()
    assert lines[0] == "id,label_pred,label_gt,iou,correct"
    assert lines[-1] == f"__aggregate__,,,,{rec['localization_error']:.6f}"
    assert len(lines) == 10 + 2


def test_eval_repeat_identical(trained, tiny_dataset, capsys):
    args = ["eval", "--checkpoint", str(trained / "run" / "checkpoint.pt"), "--data", str(tiny_dataset)]
    _, a, _ = run(args, capsys)
    _, b, _ = run(args, capsys)
    assert a == b


def test_eval_missing_checkpoint(tiny_dataset, capsys):
    code, _, err = run(["eval", "--checkpoint", "/nope.pt", "--data", str(tiny_dataset)], capsys)
    assert code == 1 and "checkpoint not found" in err


def test_plot_cam_overlay_counts(trained, capsys):
    code, out, _ = run(["plot", "--run", str(trained / "run"), "--kind", "cam-overlay"], capsys)
    assert code == 0
    n_test = len(np.load(trained / "run" / "features.npz")["ids"])
    assert last_json(out)["n"] == n_test
    assert len(list((trained / "run" / "plots" / "cam-overlay").glob("*.png"))) == n_test


def test_plot_progression(trained, capsys):
    code, out, _ = run(["plot", "--run", str(trained / "run"), "--kind", "progression", "--every", "1"], capsys)
    assert code == 0 and last_json(out)["epochs"] == [1, 2]


def test_plot_bad_kind(trained, capsys):
    code, _, _ = run(["plot", "--run", str(trained / "run"), "--kind", "movie"], capsys)
    assert code == 2


def test_fid_report(trained, capsys):
    code, out, _ = run(["fid-report", "--run", str(trained / "run"), "--couples", "40"], capsys)
    assert code == 0
    rec = last_json(out)
    for key in ("fid_target_reference", "fid_counterfactual_reference", "fid_target_counterfactual",
                "fid_masked_target_counterfactual", "p_value"):
        assert np.isfinite(rec[key])
    assert len(rec["healthy_fids"]) == 2


def test_fid_report_needs_input(capsys):
    code, _, err = run(["fid-report"], capsys)
    assert code == 2 and "--run" in err


def test_ablate_subset(tiny_dataset, tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({**FAST, "epochs": 1}))
    code, out, _ = run(["ablate", "--config", str(cfg), "--data", str(tiny_dataset), "--out", str(tmp_path / "abl"),
                        "--variants", "vanilla,sbf", "--seeds", "0,1"], capsys)
    assert code == 0
    rec = last_json(out)
    assert set(rec["median_test_auc"]) == {"vanilla", "sbf"} and rec["failed"] == []
    assert len((tmp_path / "abl" / "ablation.csv").read_text().splitlines()) == 5


def test_ablate_unknown_variant(tiny_dataset, capsys):
    code, _, err = run(["ablate", "--data", str(tiny_dataset), "--variants", "full,magic"], capsys)
    assert code == 2 and "magic" in err
