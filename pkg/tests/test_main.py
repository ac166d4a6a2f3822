import json
import shutil
from pathlib import Path

import pytest

from config import PipelineConfig, apply_overrides
from main import command_paths, create_parser, main
from reporting import EVALUATION_FILES, read_report

DATA = Path(__file__).resolve().parent.parent / "data"


def _write_config(tmp_path, **sections):
    paths = {
        "data_dir": str(tmp_path / "data"),
        "study_plan": str(tmp_path / "plan.json"),
        "manifest": str(tmp_path / "data" / "manifest.jsonl"),
        "nutrient_table": str(tmp_path / "foods.csv"),
        "weights_dir": str(tmp_path / "models"),
        "autoencoder": str(tmp_path / "models" / "autoencoder.pntw"),
        "head_registry": str(tmp_path / "models" / "heads.json"),
        "report_dir": str(tmp_path / "reports"),
    }
    config = {"paths": paths, **sections}
    path = tmp_path / "app_config.json"
    path.write_text(json.dumps(config), encoding="utf-8")
    return path


def test_parser_knows_every_stage():
    parser = create_parser()
    args = parser.parse_args(["--seed", "3", "--threads", "2", "train-meal", "--meal", "a", "--meal", "b"])
    assert (args.seed, args.threads, args.command, args.meal) == (3, 2, "train-meal", ["a", "b"])


@pytest.mark.parametrize("argv", [[], ["fly"], ["--threads", "x", "evaluate"]])
def test_usage_errors_exit_1(argv):
    with pytest.raises(SystemExit) as info:
        main(argv)
    assert info.value.code == 1


def test_bad_config_exits_1(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{", encoding="utf-8")
    assert main(["--config", str(path), "evaluate"]) == 1
    assert main(["--config", str(_write_config(tmp_path)), "--threads", "0", "evaluate"]) == 1


def test_missing_manifest_exits_2(tmp_path):
    assert main(["--config", str(_write_config(tmp_path)), "evaluate"]) == 2


def test_empty_manifest_writes_header_only_reports(tmp_path):
    config = _write_config(tmp_path)
    (tmp_path / "data").mkdir()
    (tmp_path / "data" / "manifest.jsonl").write_text("", encoding="utf-8")

    assert main(["--config", str(config), "evaluate"]) == 0
    for name in EVALUATION_FILES.values():
        header, frame = read_report(tmp_path / "reports" / name)
        assert header.startswith("# plate-nutrient-tracker config_sha256=")
        assert header.endswith(" seed=0")
        assert frame.empty


def test_missing_models_exit_3(tmp_path):
    config = _write_config(tmp_path)
    (tmp_path / "data").mkdir()
    (tmp_path / "data" / "manifest.jsonl").write_text(json.dumps({
        "series_id": "s", "intake_index": 0, "meal_id": "breakfast", "color_path": "c.png",
        "depth_path": "d.png", "mask_path": "m.png", "mass_g": {"0": 1.0}}) + "\n", encoding="utf-8")
    shutil.copy(DATA / "foods.csv", tmp_path / "foods.csv")
    shutil.copy(DATA / "study_plan.json", tmp_path / "plan.json")
    assert main(["--config", str(config), "evaluate"]) == 3


def test_report_without_evaluation_exits_2(tmp_path):
    assert main(["--config", str(_write_config(tmp_path)), "report"]) == 2


def _tiny_study(tmp_path, **sections):
    shutil.copy(DATA / "foods.csv", tmp_path / "foods.csv")
    plan = {
        "nutrient_table": "foods.csv",
        "meals": [{
            "meal_id": "breakfast", "dataset": "regular_texture", "series_count": 2,
            "items": [
                {"food": "scrambled_eggs", "profile": "slab", "radius_cm": 0.8, "height_cm": 1.0,
                 "color": [232, 188, 58]},
                {"food": "oatmeal", "profile": "dome", "radius_cm": 0.8, "height_cm": 1.0,
                 "color": [120, 80, 50]},
            ],
        }],
    }
    (tmp_path / "plan.json").write_text(json.dumps(plan), encoding="utf-8")
    return str(_write_config(
        tmp_path,
        generator={"image_size": 72, "plate_radius_cm": 2.9, "noise_sigma_cm": 0.05},
        augmentation={"n_images": 8},
        autoencoder={"encoder_channels": [4], "batch_size": 4, "patch_size": 8, "patches_per_image": 1,
                     "max_epochs": 2, "learning_rate": 0.001},
        meal_head={"max_epochs": 2, "pixels_per_image": 32, "batch_size": 4},
        **sections,
    ))


def test_subcommand_flags_route_to_config():
    parser = create_parser()

    args = parser.parse_args(["train-ae", "--manifest", "m.jsonl", "--config", "c.json", "--out", "w.pntw"])
    assert args.config == "c.json"
    paths = apply_overrides(PipelineConfig(), paths=command_paths(args)).paths
    assert (paths.manifest, paths.autoencoder) == ("m.jsonl", "w.pntw")

    args = parser.parse_args(["train-meal", "--meal", "lunch", "--manifest", "m.jsonl", "--ae", "w.pntw",
                              "--out", "heads"])
    paths = apply_overrides(PipelineConfig(), paths=command_paths(args)).paths
    assert (paths.manifest, paths.autoencoder, paths.weights_dir) == ("m.jsonl", "w.pntw", "heads")
    assert paths.report_dir == "reports"

    args = parser.parse_args(["--seed", "1", "gen-data", "--plan", "p.json", "--out", "d", "--seed", "3",
                              "--noise-sigma", "0.2"])
    config = apply_overrides(PipelineConfig(), seed=args.seed, paths=command_paths(args),
                             noise_sigma_cm=args.noise_sigma)
    assert (config.seed, config.paths.study_plan, config.generator.noise_sigma_cm) == (3, "p.json", 0.2)
    assert parser.parse_args(["--seed", "4", "gen-data"]).seed == 4


def test_gen_data_seed_flag_matches_global_seed(tmp_path):
    config = _tiny_study(tmp_path)
    assert main(["--config", config, "gen-data", "--seed", "5", "--noise-sigma", "0",
                 "--out", str(tmp_path / "a")]) == 0
    assert main(["--config", config, "--seed", "5", "gen-data", "--noise-sigma", "0",
                 "--out", str(tmp_path / "b")]) == 0
    manifest = (tmp_path / "a" / "manifest.jsonl").read_bytes()
    assert manifest == (tmp_path / "b" / "manifest.jsonl").read_bytes()
    for image in (tmp_path / "a" / "images").iterdir():
        assert image.read_bytes() == (tmp_path / "b" / "images" / image.name).read_bytes()

    assert main(["--config", config, "gen-data", "--noise-sigma", "-1"]) == 1
    # the manifest flag wins over paths.manifest; the weights it names do not exist
    assert main(["--config", config, "train-meal", "--manifest", str(tmp_path / "a" / "manifest.jsonl"),
                 "--ae", str(tmp_path / "none.pntw")]) == 3


@pytest.mark.slow
def test_every_stage_end_to_end(tmp_path):
    config = _tiny_study(tmp_path)
    manifest = str(tmp_path / "data" / "manifest.jsonl")
    weights = str(tmp_path / "models" / "autoencoder.pntw")

    stages = [
        ["gen-data", "--plan", str(tmp_path / "plan.json"), "--out", str(tmp_path / "data"),
         "--seed", "0", "--noise-sigma", "0.05"],
        ["train-ae", "--manifest", manifest, "--out", weights],
        ["train-meal", "--meal", "breakfast", "--manifest", manifest, "--ae", weights,
         "--out", str(tmp_path / "models")],
        ["evaluate"], ["report"], ["timing"],
    ]
    for stage in stages:
        assert main(["--config", config] + stage) == 0, stage[0]

    _, plates = read_report(tmp_path / "reports" / "plates.csv")
    assert len(plates) == 2 * 5
    assert set(plates["series_id"]) == {"breakfast-000", "breakfast-001"}
    _, summary = read_report(tmp_path / "reports" / "summary_bulk_intake.csv")
    assert list(summary["row_type"]) == ["meal", "subtotal", "total"]
    assert (tmp_path / "reports" / "plots" / "calories.svg").exists()
    assert (tmp_path / "reports" / "timing.csv").exists()
    assert json.loads((tmp_path / "models" / "heads.json").read_text(encoding="utf-8"))["breakfast"]

    reports = sorted(EVALUATION_FILES.values())
    before = {name: (tmp_path / "reports" / name).read_bytes() for name in reports}
    for threads in ("1", "4"):
        assert main(["--config", config, "--threads", threads, "evaluate"]) == 0
        for name in reports:
            assert (tmp_path / "reports" / name).read_bytes() == before[name], (threads, name)
