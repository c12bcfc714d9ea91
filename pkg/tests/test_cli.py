import json

import numpy as np
import pytest

from promptseg.cli import CliError, main, parse_box, parse_range
from promptseg.model import PromptableNet, save_checkpoint
from promptseg.volume import BoundingBox2D, LabelMask, NORMALIZED_0_255, SliceRange, VoxelGrid
from promptseg.volume_io import read_nifti1, read_nifti1_mask, write_nifti1, write_nifti1_mask

from conftest import TINY_CONFIG


@pytest.fixture(scope="module")
def ckpt(tmp_path_factory):
    path = tmp_path_factory.mktemp("model") / "tiny.ckpt"
    save_checkpoint(PromptableNet(TINY_CONFIG, seed=4), path)
    return str(path)


def write_case(tmp_path, name="case", nz=8, seed=0, normalized=True):
    rng = np.random.default_rng(seed)
    vals = np.clip(rng.normal(40, 5, size=(nz, 32, 32)), 0, 255).astype(np.float32)
    labels = np.zeros((nz, 32, 32), dtype=np.uint8)
    labels[2:6, 10:22, 8:20] = 1
    vals[labels == 1] = 210.0
    kind = NORMALIZED_0_255 if normalized else "raw"
    vol_path = tmp_path / f"{name}.nii"
    mask_path = tmp_path / f"{name}_mask.nii"
    vol_path.write_bytes(write_nifti1(VoxelGrid(vals, (1, 1, 1), kind)))
    mask_path.write_bytes(write_nifti1_mask(LabelMask(labels, (1, 1, 1))))
    return vol_path, mask_path


def test_parse_box_and_range():
    box = parse_box("z=4,8,8,24,24")
    assert box == BoundingBox2D(4, 8, 8, 24, 24)
    assert parse_range("2:7") == SliceRange(2, 7)
    with pytest.raises(CliError):
        parse_box("4,8,8,24,24")
    with pytest.raises(CliError):
        parse_box("z=4,8,8")
    with pytest.raises(CliError):
        parse_range("7")


def test_unknown_flag_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["segment", "--nope"])
    assert exc.value.code == 2


def test_runtime_error_prints_json(tmp_path, capsys, ckpt):
    rc = main(["segment", "--volume", str(tmp_path / "missing.nii"), "--box", "z=1,2,2,6,6",
               "--model", ckpt, "--out", str(tmp_path / "o.nii")])
    assert rc == 1
    err = json.loads(capsys.readouterr().err)
    assert "error" in err and "detail" in err


def test_preprocess_cli(tmp_path, capsys):
    vol_path, _ = write_case(tmp_path, normalized=False)
    out_path = tmp_path / "norm.nii"
    rc = main(["preprocess", "--volume", str(vol_path), "--out", str(out_path),
               "--preset", "abdomen"])
    assert rc == 0
    out = read_nifti1(out_path.read_bytes())
    assert out.values.min() >= 0.0 and out.values.max() <= 255.0
    payload = json.loads(capsys.readouterr().out)
    assert payload["kind"] == "normalized_0_255"


def test_preprocess_requires_mode(tmp_path, capsys):
    vol_path, _ = write_case(tmp_path, normalized=False)
    rc = main(["preprocess", "--volume", str(vol_path), "--out", str(tmp_path / "o.nii")])
    assert rc == 1
    assert json.loads(capsys.readouterr().err)["error"] == "bad_request"


def test_segment_cli_writes_mask_and_scores(tmp_path, capsys, ckpt):
    vol_path, mask_path = write_case(tmp_path)
    out_path = tmp_path / "pred.nii"
    rc = main(["segment", "--volume", str(vol_path), "--box", "z=4,8,10,20,22",
               "--range", "2:5", "--model", ckpt, "--out", str(out_path),
               "--ref", str(mask_path)])
    assert rc == 0
    payload = json.loads(capsys.readouterr().out)
    assert "dsc" in payload and "nsd" in payload
    pred = read_nifti1_mask(out_path.read_bytes())
    assert pred.dims == (32, 32, 8)
    assert pred.labels[:2].sum() == 0 and pred.labels[6:].sum() == 0


def test_segment_with_plan_json(tmp_path, capsys, ckpt):
    vol_path, mask_path = write_case(tmp_path)
    plan = {
        "prompt_slice": 4,
        "range": [2, 5],
        "box": [4, 8, 10, 20, 22],
        "directions": "both",
        "refined_masks": {"4": mask_path.name},
    }
    plan_path = tmp_path / "plan.json"
    plan_path.write_text(json.dumps(plan))
    out_path = tmp_path / "pred.nii"
    rc = main(["segment", "--volume", str(vol_path), "--plan", str(plan_path),
               "--model", ckpt, "--out", str(out_path)])
    assert rc == 0
    pred = read_nifti1_mask(out_path.read_bytes())
    ref = read_nifti1_mask(mask_path.read_bytes())
    # the refined prompt slice is emitted verbatim from the referenced mask
    assert np.array_equal(pred.labels[4] != 0, ref.labels[4] != 0)


def test_segment_rejects_unnormalized(tmp_path, capsys, ckpt):
    vol_path, _ = write_case(tmp_path, normalized=False)
    vals = read_nifti1(vol_path.read_bytes()).values * 10  # push outside [0,255]
    vol_path.write_bytes(write_nifti1(VoxelGrid(vals, (1, 1, 1), "raw")))
    rc = main(["segment", "--volume", str(vol_path), "--box", "z=4,8,10,20,22",
               "--model", ckpt, "--out", str(tmp_path / "o.nii")])
    assert rc == 1
    assert json.loads(capsys.readouterr().err)["error"] == "not_normalized"


def test_segment_video_cli(tmp_path, capsys, ckpt):
    vol_path, mask_path = write_case(tmp_path, nz=4)
    rc = main(["segment-video", "--clip", str(vol_path), "--box", "z=0,8,10,20,22",
               "--model", ckpt, "--out", str(tmp_path / "video.nii"),
               "--ref", str(mask_path)])
    assert rc == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["frames"] == 4 and "dsc" in payload


def test_evaluate_cli_csv(tmp_path, capsys):
    pred_dir = tmp_path / "pred"
    ref_dir = tmp_path / "ref"
    pred_dir.mkdir()
    ref_dir.mkdir()
    rng = np.random.default_rng(3)
    for i in range(3):
        labels = (rng.random((4, 8, 8)) < 0.3).astype(np.uint8)
        ref = (rng.random((4, 8, 8)) < 0.3).astype(np.uint8)
        (pred_dir / f"c{i}.nii").write_bytes(write_nifti1_mask(LabelMask(labels, (1, 1, 1))))
        (ref_dir / f"c{i}.nii").write_bytes(write_nifti1_mask(LabelMask(ref, (1, 1, 1))))
    out_csv = tmp_path / "scores.csv"
    rc = main(["evaluate", "--pred", str(pred_dir), "--ref", str(ref_dir),
               "--out", str(out_csv), "--spacing-from-header"])
    assert rc == 0
    lines = out_csv.read_text().splitlines()
    assert lines[0] == "case_id,target,dsc,nsd"
    assert len([l for l in lines if l.startswith("c") and not l.startswith("case_id")]) == 3
    assert any(l.startswith("median") for l in lines)
    assert any(l.startswith("iqr") for l in lines)
    summary = json.loads(capsys.readouterr().out)
    assert summary["n"] == 3


def test_evaluate_missing_reference(tmp_path, capsys):
    pred_dir = tmp_path / "pred"
    ref_dir = tmp_path / "ref"
    pred_dir.mkdir()
    ref_dir.mkdir()
    (pred_dir / "c0.nii").write_bytes(
        write_nifti1_mask(LabelMask(np.zeros((2, 4, 4), dtype=np.uint8), (1, 1, 1)))
    )
    rc = main(["evaluate", "--pred", str(pred_dir), "--ref", str(ref_dir),
               "--out", str(tmp_path / "s.csv")])
    assert rc == 1
    assert json.loads(capsys.readouterr().err)["error"] == "missing_ref"


def manifest_for(tmp_path, cases):
    entries = []
    for name, (vol, mask) in cases.items():
        entries.append({"case_id": name, "volume_path": vol.name, "mask_path": mask.name,
                        "modality": "CT", "object_id": 1,
                        "box": "z=4,8,10,20,22"})
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps(entries))
    return path


def test_train_cli_reproducible(tmp_path, capsys):
    cases = {f"c{i}": write_case(tmp_path, f"c{i}", seed=i) for i in range(2)}
    manifest = manifest_for(tmp_path, cases)
    rc = main(["train", "--manifest", str(manifest), "--out-dir", str(tmp_path / "run1"),
               "--epochs", "1", "--input-size", "32", "--seed", "5"])
    assert rc == 0
    out1 = json.loads(capsys.readouterr().out)
    rc = main(["train", "--manifest", str(manifest), "--out-dir", str(tmp_path / "run2"),
               "--epochs", "1", "--input-size", "32", "--seed", "5"])
    assert rc == 0
    out2 = json.loads(capsys.readouterr().out)
    assert out1["checkpoint_id"] == out2["checkpoint_id"]  # bit-exact given --seed
    assert (tmp_path / "run1" / "loss_log.csv").exists()


def test_finetune_cli(tmp_path, capsys, ckpt):
    cases = {"c0": write_case(tmp_path, "c0")}
    manifest = manifest_for(tmp_path, cases)
    rc = main(["finetune", "--manifest", str(manifest), "--model", ckpt,
               "--round-index", "2", "--out-dir", str(tmp_path / "ft")])
    assert rc == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["epochs"] == 6


def test_bad_manifest_reports_location(tmp_path, capsys, ckpt):
    bad = tmp_path / "bad.json"
    bad.write_text('[{"volume_path": "x.nii"}]')
    rc = main(["train", "--manifest", str(bad), "--out-dir", str(tmp_path / "o")])
    assert rc == 1
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "bad_manifest" and "mask_path" in err["detail"]
    bad.write_text("not json {")
    rc = main(["train", "--manifest", str(bad), "--out-dir", str(tmp_path / "o")])
    assert rc == 1
    err = json.loads(capsys.readouterr().err)
    assert f"{bad}:1" in err["detail"]  # path + line


def test_hitl_round_cli(tmp_path, capsys, ckpt):
    cases = {f"c{i}": write_case(tmp_path, f"c{i}", seed=i) for i in range(2)}
    manifest = manifest_for(tmp_path, cases)
    out_dir = tmp_path / "round1"
    rc = main(["hitl-round", "--manifest", str(manifest), "--model", ckpt,
               "--round-index", "1", "--out-dir", str(out_dir)])
    assert rc == 0
    assert (out_dir / "c0.nii").exists() and (out_dir / "events.jsonl").exists()
    report = json.loads((out_dir / "round.json").read_text())
    assert report["rounds"][0]["cases"] == 2
    # scripted ground-truth oracle: accepted masks equal the references
    accepted = read_nifti1_mask((out_dir / "c0.nii").read_bytes())
    ref = read_nifti1_mask((tmp_path / "c0_mask.nii").read_bytes())
    assert np.array_equal(accepted.labels != 0, ref.labels != 0)


def test_hitl_select_cli(tmp_path, capsys, ckpt):
    entries = []
    for i in range(2):
        vol, mask = write_case(tmp_path, f"s{i}", seed=10 + i)
        entries.append({
            "case_id": f"s{i}", "volume_path": vol.name, "mask_path": mask.name,
            "box3d": [8, 10, 20, 22, 2, 6],
            "boxes2d": {str(z): f"z={z},8,10,20,22" for z in range(2, 6)},
            "patient": "p0",
        })
    manifest = tmp_path / "sel.json"
    manifest.write_text(json.dumps(entries))
    rc = main(["hitl-select", "--manifest", str(manifest), "--model", ckpt,
               "--out", str(tmp_path / "sel_out.json")])
    assert rc == 0
    payload = json.loads((tmp_path / "sel_out.json").read_text())
    assert len(payload["selected"]) == 1  # one per patient group
    assert len(payload["records"]) == 2


def test_report_cli_merges_rounds(tmp_path, capsys):
    r1 = {"rounds": [{"round": 1, "cases": 2, "mean_seconds_per_case": 100.0,
                      "cumulative_cases": 2, "checkpoint": "x"}], "warnings": []}
    r2 = {"rounds": [{"round": 2, "cases": 3, "mean_seconds_per_case": 50.0,
                      "cumulative_cases": 3, "checkpoint": "y"}], "warnings": []}
    p1, p2 = tmp_path / "r1.json", tmp_path / "r2.json"
    p1.write_text(json.dumps(r1))
    p2.write_text(json.dumps(r2))
    rc = main(["report", str(p1), str(p2), "--out", str(tmp_path / "merged.csv")])
    assert rc == 0
    merged = json.loads(capsys.readouterr().out)
    assert [r["cumulative_cases"] for r in merged["rounds"]] == [2, 5]
