import csv
import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from stalk_gauge import cli
from stalk_gauge.camera_io import save_depth, save_mask
from stalk_gauge.slicing import PipelineConfig

GOLDEN = Path(__file__).parent / "fixtures" / "histogram_golden.svg"
REFERENCE = Path(cli.__file__).parent / "data" / "reference_pairs.csv"


def run(*argv) -> int:
    return cli.main([str(a) for a in argv])


def tree_digest(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def read_rows(path: Path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert run("synth", "--n", 2, "--seed", 3, "--out-dir", out, "--length-mm", 80) == 0
    return out


def _process_args(d: Path, sid="stalk0", *extra):
    return ["process", "--depth", d / f"{sid}_depth.png", "--mask", d / f"{sid}_mask.png",
            "--intrinsics", d / "intrinsics.json", "--depth-back", d / f"{sid}_depth_back.png",
            "--mask-back", d / f"{sid}_mask_back.png", "--back-pose", d / f"{sid}_back_pose.json",
            *extra]


def test_process_recovers_synthetic_diameter(synth_dir, tmp_path):
    truth = {r["sample_id"]: float(r["true_diameter_m"]) for r in read_rows(synth_dir / "manifest.csv")}
    out = tmp_path / "out"
    code = run(*_process_args(synth_dir, "stalk0", "--no-dbscan", "--out-dir", out,
                              "--ground-truth", truth["stalk0"]))
    assert code == 0
    summary = read_rows(out / "stalk0_depth_summary.csv")[0]
    assert abs(float(summary["predicted_m"]) - truth["stalk0"]) <= 0.01 * truth["stalk0"]
    slices = read_rows(out / "stalk0_depth_slices.csv")
    assert list(slices[0]) == list(cli.SLICES_HEADER)
    assert [s["slice_label"] for s in slices[:2]] == ["1", "2"]
    manifest = json.loads((out / "stalk0_depth_manifest.json").read_text())
    assert manifest["status"] == "ok"
    assert all((out / name).is_file() for name in manifest["outputs"])
    assert "stroke-dasharray" in (out / "stalk0_depth_histogram.svg").read_text()
    axis = (out / "stalk0_depth_axis.ply").read_text().splitlines()
    assert "element vertex 2" in axis and "element edge 1" in axis
    raw = (out / "stalk0_depth_slices.csv").read_bytes()
    assert b"\r" not in raw


def test_process_is_byte_deterministic(synth_dir, tmp_path):
    digests = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert run(*_process_args(synth_dir, "stalk1", "--out-dir", out, "--sample-id", "s")) == 0
        digests.append(tree_digest(out))
    assert digests[0] == digests[1]


def test_all_background_mask_exits_2(synth_dir, tmp_path):
    mask = tmp_path / "empty.png"
    save_mask(np.zeros((480, 640), bool), mask)
    out = tmp_path / "out"
    code = run("process", "--depth", synth_dir / "stalk0_depth.png", "--mask", mask,
               "--intrinsics", synth_dir / "intrinsics.json", "--out-dir", out)
    assert code == 2
    assert not list(out.glob("*.csv"))
    assert json.loads((out / "stalk0_depth_manifest.json").read_text())["status"] == "failed"


def test_usage_errors_exit_1(synth_dir, tmp_path):
    assert run("process", "--depth", synth_dir / "stalk0_depth.png") == 1
    assert run("process", "--depth", tmp_path / "nope.png", "--mask", tmp_path / "m.png",
               "--intrinsics", synth_dir / "intrinsics.json") == 1
    small = tmp_path / "small.png"
    save_depth(np.ones((4, 4), np.uint16), small)
    assert run("process", "--depth", small, "--mask", synth_dir / "stalk0_mask.png",
               "--intrinsics", synth_dir / "intrinsics.json", "--out-dir", tmp_path) == 1
    assert run("process", "--depth-back", "x", "--depth", small, "--mask", small,
               "--intrinsics", synth_dir / "intrinsics.json") == 1
    with pytest.raises(SystemExit) as exc:
        run("process", "--bogus")
    assert exc.value.code == 1


def test_print_config_round_trip(tmp_path, capsys):
    assert run("process", "--print-config", "--dbscan-eps", 0.002, "--set",
               "circle_fit_method=\"median\"", "--no-sor") == 0
    text = capsys.readouterr().out
    cfg = tmp_path / "cfg.json"
    cfg.write_text(text)
    assert run("process", "--print-config", "--config", cfg) == 0
    assert capsys.readouterr().out == text
    parsed = PipelineConfig.from_flat(json.loads(text))
    assert parsed.circle_fit.method == "median" and not parsed.sor_enabled
    assert run("process", "--print-config", "--set", "no_such_key=1") == 1


def test_evaluate_reference_pairs(tmp_path, capsys):
    out = tmp_path / "report.csv"
    assert run("evaluate", "--pairs", REFERENCE, "--out", out) == 0
    printed = capsys.readouterr().out
    assert printed.splitlines() == ["n,mae_m,mape_pct,rmse_m,r2", "10,0.00054,4.08335,0.000680985,0.702166"]
    assert out.read_text() == printed


def test_evaluate_identity_and_single_row(tmp_path, capsys):
    f = tmp_path / "p.csv"
    f.write_text("sample_id,predicted_m,actual_m\na,0.01,0.01\nb,0.02,0.02\n")
    assert run("evaluate", "--pairs", f) == 0
    assert capsys.readouterr().out.splitlines()[1] == "2,0,0,0,1"
    f.write_text("sample_id,predicted_m,actual_m\na,0.010,0.012\n")
    assert run("evaluate", "--pairs", f) == 0
    cap = capsys.readouterr()
    assert cap.out.splitlines()[1] == "1,0.002,16.6667,0.002,"
    assert "r2" in cap.err


def test_evaluate_malformed_exits_1(tmp_path, capsys):
    f = tmp_path / "bad.csv"
    f.write_text("sample_id,predicted_m,actual_m\na,0.01,0.02\nb,zero,0.02\n")
    assert run("evaluate", "--pairs", f) == 1
    assert f"{f}:3:" in capsys.readouterr().err


def test_ablate_rejects_unknown_config(synth_dir, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(["baseline", "no_pca"]))
    assert run("ablate", "--dataset", synth_dir, "--configs", cfg, "--out-dir", tmp_path) == 1
    assert run("ablate", "--dataset", tmp_path, "--out-dir", tmp_path) == 1


def test_ablate_writes_tables(synth_dir, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"names": ["baseline", "no_sor", "fit_mean"],
                               "base": {"dbscan_eps": 0.005}}))
    out = tmp_path / "out"
    assert run("ablate", "--dataset", synth_dir, "--configs", cfg, "--out-dir", out) == 0
    table = read_rows(out / "ablation.csv")
    assert [r["configuration"] for r in table] == ["baseline", "no_sor", "fit_mean"]
    ranking = read_rows(out / "ranking.csv")
    assert list(ranking[0]) == ["component", "rank", "delta_mae_m"]
    assert {r["component"] for r in ranking} == {"sor", "circle_fit"}
    preds = read_rows(out / "predictions.csv")
    assert [p["sample_id"] for p in preds] == ["stalk0", "stalk1"]


def test_synth_fixed_radius(tmp_path):
    assert run("synth", "--n", 2, "--seed", 1, "--radius-mm", 7.5, "--noise-mm", 0,
               "--visibility", "half", "--out-dir", tmp_path) == 0
    rows = read_rows(tmp_path / "manifest.csv")
    assert [r["true_diameter_m"] for r in rows] == ["0.015", "0.015"]
    assert rows[0]["generator"] == "numpy.random.PCG64" and rows[0]["depth_back"] == ""


@pytest.mark.parametrize("flags", [["--outlier-fraction", 1.0], ["--n", 0],
                                   ["--radius-mm", -1], ["--min-abs-z", 0.9, "--max-abs-z", 0.5]])
def test_synth_invalid_ranges_exit_1(tmp_path, flags):
    argv = ["synth", "--n", 1, "--seed", 0, "--out-dir", tmp_path / "x"]
    if flags[0] == "--n":
        argv[2] = flags[1]
    else:
        argv += flags
    assert run(*argv) == 1
    assert not (tmp_path / "x").exists()


def test_synth_reruns_are_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert run("synth", "--n", 10, "--seed", 42, "--visibility", "half", "--length-mm", 60,
                   "--out-dir", tmp_path / name) == 0
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")
    assert len(read_rows(tmp_path / "a" / "manifest.csv")) == 10


def test_synth_pgm_format(tmp_path):
    assert run("synth", "--n", 1, "--seed", 2, "--visibility", "half", "--format", "pgm",
               "--out-dir", tmp_path) == 0
    assert (tmp_path / "stalk0_depth.pgm").read_bytes().startswith(b"P2")


def test_histogram_golden():
    svg = cli._histogram_svg(np.array([0.0100, 0.0102, 0.0102, 0.0105, 0.0111]), 0.0104, "golden")
    assert svg == GOLDEN.read_text()
    assert svg == cli._histogram_svg(np.array([0.0100, 0.0102, 0.0102, 0.0105, 0.0111]), 0.0104, "golden")


def test_no_subcommand_exits_1():
    assert run() == 1
