import numpy as np
import pytest
from PIL import Image

from cgn import plots
from cgn import trainer as T

FAST = dict(batch_size=16, generator_blocks=1, backbone_width=8, feature_channels=8, fusion_channels=16)


@pytest.fixture(scope="module")
def run_dir(tiny_dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("plots") / "run"
    T.train(T.TrainConfig(epochs=3, snapshot_every=1, snapshot_samples=3, **FAST), tiny_dataset, out)
    return out


def _three_sample_run(src, dst):
    """Copy of a run cut down to its first three test samples."""
    dst.mkdir()
    f = dict(np.load(src / "features.npz"))
    keep = {k: (v[:3] if v.ndim and v.shape[0] == len(f["ids"]) else v) for k, v in f.items()}
    np.savez(dst / "features.npz", **keep)
    return dst, keep


def test_cam_overlay_one_file_per_sample(run_dir, tmp_path):
    d, _ = _three_sample_run(run_dir, tmp_path / "r3")
    paths = plots.plot_cam_overlay(d)
    assert len(paths) == 3
    assert all(p.is_file() and Image.open(p).size[0] > 0 for p in paths)


def test_feature_heatmaps_count_and_values(run_dir, tmp_path):
    d, f = _three_sample_run(run_dir, tmp_path / "r3")
    paths = plots.plot_feature_heatmaps(d)
    assert len(paths) == 3
    panels = plots.heatmap_panels(f, 1)
    assert panels["h_t"][3, 4] == f["h_t"][1][:, 3, 4].max()
    assert panels["h_c"][0, 6] == f["h_c"][1][:, 0, 6].max()


def test_identity_generator_panels_match(run_dir, tmp_path):
    d, f = _three_sample_run(run_dir, tmp_path / "r3")
    f["h_c"] = f["h_t"].copy()
    np.savez(d / "features.npz", **f)
    for k in range(3):
        panels = plots.heatmap_panels(f, k)
        np.testing.assert_array_equal(panels["h_t"], panels["h_c"])


def test_non_finite_features_name_sample(run_dir, tmp_path):
    d, f = _three_sample_run(run_dir, tmp_path / "r3")
    f["h_r"] = f["h_r"].copy()
    f["h_r"][2, 0, 0, 0] = np.nan
    np.savez(d / "features.npz", **f)
    with pytest.raises(plots.PlotError, match=str(f["ids"][2])):
        plots.plot_feature_heatmaps(d)


def test_select_snapshots():
    assert plots.select_snapshots(list(range(1, 51)), 10) == [9, 19, 29, 39, 49]
    assert plots.select_snapshots([1, 2, 3], 10) == [2]
    assert plots.select_snapshots([], 10) == []


def test_progression(run_dir):
    paths, epochs = plots.plot_training_progression(run_dir, every_n_epochs=1)
    assert epochs == [1, 2, 3] and len(paths) == 3
    _, epochs = plots.plot_training_progression(run_dir, every_n_epochs=10, out_dir=run_dir / "p10")
    assert epochs == [3]


def test_progression_cadence_beyond_epochs(tiny_dataset, tmp_path):
    T.train(T.TrainConfig(epochs=2, snapshot_every=10, **FAST), tiny_dataset, tmp_path)
    snaps = np.load(tmp_path / "cam_snapshots.npz")
    assert snaps["epochs"].tolist() == [2]
    _, epochs = plots.plot_training_progression(tmp_path, every_n_epochs=10)
    assert epochs == [2]


def test_missing_run_files(tmp_path):
    with pytest.raises(plots.PlotError, match="not found"):
        plots.plot_cam_overlay(tmp_path)
    with pytest.raises(plots.PlotError, match=">= 1"):
        plots.plot_training_progression(tmp_path, every_n_epochs=0)
