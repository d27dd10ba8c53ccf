"""End-to-end checks of the command-line surface.

Most tests drive main(argv) in-process so assertions can see files and
capture output cheaply; one subprocess smoke test proves the module is
runnable from a shell.
"""

import contextlib
import io
import subprocess
import sys

import numpy as np
import pytest

from facekit import dataio
from facekit.cli import letterbox, main, unletterbox_detection
from facekit.netgraph import build_model, model_config


def run(*argv):
    return main([str(a) for a in argv])


# ---------------------------------------------------------------- letterbox


def test_letterbox_shape_and_padding():
    rng = np.random.default_rng(0)
    img = rng.uniform(0, 1, (1, 3, 100, 60)).astype(np.float32)
    out, scale, pad_x, pad_y = letterbox(img, 128)
    assert out.shape == (1, 3, 128, 128)
    assert scale == 128 / 100
    # long side fills the target, short side is centered
    new_w = round(60 * scale)
    assert pad_x == (128 - new_w) // 2
    assert pad_y == 0
    # borders are mid-gray
    assert np.all(out[:, :, :, :pad_x] == 0.5)
    assert np.all(out[:, :, :, pad_x + new_w :] == 0.5)


def test_letterbox_content_is_nearest_neighbor():
    img = np.arange(2 * 2, dtype=np.float32).reshape(1, 1, 2, 2)
    out, scale, pad_x, pad_y = letterbox(img, 4)
    # 2x2 -> 4x4 exact upsample, no padding
    assert (pad_x, pad_y) == (0, 0)
    expect = img.repeat(2, axis=2).repeat(2, axis=3)
    assert np.array_equal(out, expect)


def test_unletterbox_round_trips_coordinates():
    class Det:
        pass

    d = Det()
    scale, pad_x, pad_y = 0.4, 20.0, 0.0
    d.cx, d.cy, d.w, d.h = 20 + 0.4 * 50, 0.4 * 80, 0.4 * 30, 0.4 * 40
    d.landmarks = np.zeros((68, 3))
    d.landmarks[:, 0] = 20 + 0.4 * 50
    d.landmarks[:, 1] = 0.4 * 80
    unletterbox_detection(d, scale, pad_x, pad_y)
    assert d.cx == pytest.approx(50) and d.cy == pytest.approx(80)
    assert d.w == pytest.approx(30) and d.h == pytest.approx(40)
    assert d.landmarks[0, 0] == pytest.approx(50)
    assert d.landmarks[0, 1] == pytest.approx(80)


# ---------------------------------------------------------------- exit codes


def test_unknown_command_is_usage_error(capsys):
    assert run("definitely-not-a-command") == 2
    capsys.readouterr()


def test_missing_required_flag_is_usage_error(capsys):
    assert run("eval", "--gt", "x.txt") == 2
    capsys.readouterr()


def test_missing_file_is_io_error(tmp_path, capsys):
    code = run("eval", "--gt", tmp_path / "no.txt", "--pred", tmp_path / "no.txt")
    assert code == 3
    assert "I/O error" in capsys.readouterr().err


# ---------------------------------------------------------------- synth


def test_synth_writes_parseable_dataset(tmp_path, capsys):
    out = tmp_path / "gt.txt"
    assert run("synth", "--out", out, "--n-images", 3, "--faces-per-image", 2, "--seed", 5) == 0
    capsys.readouterr()
    recs = dataio.parse_annotations(out)
    assert len(recs) == 3
    assert all(len(r.faces) == 2 for r in recs)
    assert all(f.angles is not None for r in recs for f in r.faces)


def test_synth_same_seed_same_bytes(tmp_path, capsys):
    a, b = tmp_path / "a.txt", tmp_path / "b.txt"
    assert run("synth", "--out", a, "--n-images", 2, "--seed", 9) == 0
    assert run("synth", "--out", b, "--n-images", 2, "--seed", 9) == 0
    capsys.readouterr()
    assert a.read_bytes() == b.read_bytes()


# ---------------------------------------------------------------- infer / pose / eval


@pytest.fixture(scope="module")
def synth_gt(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "gt.txt"
    with contextlib.redirect_stdout(io.StringIO()):
        assert run("synth", "--out", out, "--n-images", 4, "--faces-per-image", 2, "--seed", 11) == 0
    return out


def test_landmark_infer_recovers_pose(synth_gt, tmp_path, capsys):
    pred = tmp_path / "pred.txt"
    assert run("infer", "--input", synth_gt, "--out", pred) == 0
    capsys.readouterr()
    recs = dataio.parse_annotations(pred)
    gt = dataio.parse_annotations(synth_gt)
    assert len(recs) == len(gt)
    for rp, rg in zip(recs, gt):
        for fp, fg in zip(rp.faces, rg.faces):
            assert fp.conf is not None
            # noiseless landmarks: solved angles match generator angles
            assert np.allclose(fp.angles, fg.angles, atol=1e-6)


def test_pose_reports_near_zero_error(synth_gt, tmp_path, capsys):
    pred = tmp_path / "pred.txt"
    run("infer", "--input", synth_gt, "--out", pred)
    capsys.readouterr()
    assert run("pose", "--gt", synth_gt, "--pred", pred, "--report", "kv") == 0
    out = capsys.readouterr().out
    vals = dict(line.split("=") for line in out.splitlines() if "=" in line and not line.startswith(" "))
    assert float(vals["ame_mean"]) < 1e-6


def test_eval_self_comparison_is_perfect(synth_gt, tmp_path, capsys):
    pred = tmp_path / "pred.txt"
    run("infer", "--input", synth_gt, "--out", pred)
    capsys.readouterr()
    report_file = tmp_path / "report.txt"
    assert run("eval", "--gt", synth_gt, "--pred", pred, "--report", "kv", "--out", report_file) == 0
    out = capsys.readouterr().out
    vals = dict(line.split("=") for line in out.splitlines() if "=" in line and not line.startswith(" "))
    assert float(vals["ap50"]) == 1.0
    assert float(vals["nme_mean"]) < 1e-9
    assert report_file.read_text().rstrip() in out.rstrip()


def test_infer_rejects_unknown_extension(tmp_path, capsys):
    src = tmp_path / "input.csv"
    src.write_text("whatever")
    assert run("infer", "--input", src, "--out", tmp_path / "o.txt") == 2
    capsys.readouterr()


def test_network_infer_writes_valid_predictions(tmp_path, capsys):
    img = tmp_path / "img.npy"
    rng = np.random.default_rng(2)
    np.save(img, rng.uniform(0, 1, (3, 80, 64)).astype(np.float32))
    pred = tmp_path / "pred.txt"
    assert run("infer", "--input", img, "--out", pred, "--imgsz", 64, "--conf", 0.002) == 0
    capsys.readouterr()
    recs = dataio.parse_annotations(pred)
    assert len(recs) == 1
    assert (recs[0].width, recs[0].height) == (64, 80)
    for f in recs[0].faces:
        assert 0.0 <= f.conf <= 1.0
        assert f.kpts.shape == (68, 3)


# ---------------------------------------------------------------- weights / fuse


def test_init_weights_round_trip(tmp_path, capsys):
    w = tmp_path / "w.fkmt"
    assert run("init-weights", "--config", "tiny", "--seed", 3, "--out", w) == 0
    capsys.readouterr()
    net_a = build_model(model_config("tiny"), seed=3)
    net_b = build_model(model_config("tiny"), seed=99)
    dataio.load_weights(w, net_b)
    x = np.random.default_rng(0).uniform(0, 1, (1, 3, 32, 32)).astype(np.float32)
    out_a, out_b = net_a.forward(x), net_b.forward(x)
    for ta, tb in zip(out_a.box_logits, out_b.box_logits):
        assert np.array_equal(ta, tb)


def test_fuse_check_passes_and_perturb_fails(capsys):
    assert run("fuse-check", "--imgsz", 64, "--n", 1) == 0
    assert "PASS" in capsys.readouterr().out
    assert run("fuse-check", "--imgsz", 64, "--n", 1, "--perturb") == 1
    assert "FAIL" in capsys.readouterr().out


def test_bench_reports_three_timings(capsys):
    assert run("bench", "--imgsz", 64, "--n", 1) == 0
    out = capsys.readouterr().out
    assert "train form" in out and "deploy form" in out and "postprocess" in out
    assert "fused speedup ratio" in out


# ---------------------------------------------------------------- subprocess


def test_module_is_shell_runnable(tmp_path):
    out = tmp_path / "gt.txt"
    proc = subprocess.run(
        [sys.executable, "-m", "facekit.cli", "synth", "--out", str(out), "--n-images", "1"],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert out.exists()
    assert "run: synth" in proc.stdout
