import json

import pytest
from PIL import Image

from cogsem.cli import build_parser, main
from cogsem.datamodel import item_ids, read_manifest
from cogsem.synthetic import make_toy_dataset

TINY = {
    "data": {"image_size": 32, "group_size": 3},
    "model": {
        "vq": {"num_embeddings": 8, "embedding_dim": 8, "hidden_channels": 8, "v_channels": 4},
        "prior": {"hidden_channels": 8, "n_layers": 1, "samples": 2},
        "branch": {"embed_dim": 16, "depth": 1, "token_depth": 1, "heads": 2},
    },
    "train": {"vqvae": {"steps": 1}, "prior": {"steps": 1}, "full": {"steps": 1}},
}


@pytest.fixture
def toy(tmp_path):
    return make_toy_dataset(tmp_path / "toy", categories=2, per_category=6, image_size=32)


def _run(tmp_path, *argv):
    return main([*argv, "--out", str(tmp_path / "runs"), "--quiet"])


def _only(tmp_path, pattern):
    matches = sorted((tmp_path / "runs").glob(pattern))
    assert len(matches) == 1, matches
    return matches[0]


class TestParser:
    """Argument surface"""

    def test_train_requires_a_stage(self):
        """--stage is mandatory and restricted"""
        with pytest.raises(SystemExit):
            build_parser().parse_args(["train"])
        with pytest.raises(SystemExit):
            build_parser().parse_args(["train", "--stage", "everything"])

    def test_overrides_accumulate(self):
        """--set is repeatable"""
        args = build_parser().parse_args(["eval", "--set", "gsem.k=0", "--set", "seed=3"])
        assert args.overrides == ["gsem.k=0", "seed=3"]


class TestExitCodes:
    """Errors map to their category exit codes"""

    def test_validate_config_ok_and_invalid(self):
        """Defaults pass, k=3 with N=5 fails with exit 2"""
        assert main(["validate-config"]) == 0
        assert main(["validate-config", "--set", "gsem.k=3"]) == 2

    def test_validate_config_missing_file(self, tmp_path):
        """An absent config file is a load error"""
        assert main(["validate-config", "--config", str(tmp_path / "absent.json")]) == 4

    def test_bad_config_stops_before_work(self, tmp_path):
        """A schema error exits 2 and creates no run directory"""
        assert _run(tmp_path, "eval", "--set", "model.vq.codebook=3") == 2
        assert not (tmp_path / "runs").exists()

    def test_full_stage_without_checkpoints(self, tmp_path):
        """train --stage full needs the prior checkpoint"""
        assert _run(tmp_path, "train", "--stage", "full") == 3

    def test_missing_manifest_setting(self, tmp_path):
        """eval without a manifest is a config error"""
        assert _run(tmp_path, "eval") == 2


class TestCommands:
    """End-to-end command runs on toy data"""

    def test_make_toy_dataset(self, tmp_path):
        """The toy manifest lands in the run directory"""
        overrides = ("--set", "toy.per_category=3", "--set", "toy.image_size=16")
        assert _run(tmp_path, "make-toy-dataset", *overrides) == 0
        manifest = read_manifest(_only(tmp_path, "*/0/toy/manifest.json"))
        assert len(manifest.groups) == 2
        assert manifest.item_count() == 6
        assert _only(tmp_path, "*/0/config.json").is_file()

    def test_stdout_is_the_json_result(self, tmp_path, capsys, monkeypatch):
        """Console logging stays off stdout, which parses as JSON"""
        monkeypatch.setenv("SMART_LOGGER_CONSOLE_OUTPUT", "True")
        monkeypatch.setenv("SMART_LOGGER_MIN_LEVEL", "INFO")
        overrides = ("--set", "toy.per_category=2", "--set", "toy.image_size=16")
        assert _run(tmp_path, "make-toy-dataset", *overrides) == 0
        captured = capsys.readouterr()
        assert json.loads(captured.out)["command"] == "make-toy-dataset"
        assert "[INFO]" in captured.err

    def test_build_owdataset_is_reproducible(self, tmp_path, toy):
        """Two builds with one seed write byte-identical manifests"""
        argv = ("build-owdataset", "--set", f"owdata.base_manifest={toy}", "--seed", "5")
        assert _run(tmp_path, *argv) == 0
        path = _only(tmp_path, "*/5/owdataset/manifest.json")
        first = path.read_bytes()
        assert _run(tmp_path, *argv) == 0
        assert path.read_bytes() == first
        report = json.loads((path.parent / "report.json").read_text())
        assert report["passed"] and report["total_noise"] > 0

        assert _run(tmp_path, "validate-owdataset", "--manifest", str(path)) == 0

    def test_eval_of_perfect_predictions(self, tmp_path, toy):
        """Masks used as predictions score MAE 0"""
        pred_dir = tmp_path / "pred"
        manifest = read_manifest(toy)
        for group in manifest.groups:
            for item in group.items:
                target = pred_dir / group.category / item.image_path.split("/")[-1]
                target.parent.mkdir(parents=True, exist_ok=True)
                Image.open(toy.parent / item.mask_path).save(target)
        overrides = ("--set", f"data.manifest={toy}", "--set", f"metrics.pred_dir={pred_dir}")
        assert _run(tmp_path, "eval", *overrides) == 0
        summary = json.loads(_only(tmp_path, "*/0/eval/summary.json").read_text())
        assert summary["mae"] == 0.0
        assert summary["count"] == 12

    def test_missing_predictions_exit_4(self, tmp_path, toy):
        """eval names the absent ids through a load error"""
        overrides = ("--set", f"data.manifest={toy}", "--set", f"metrics.pred_dir={tmp_path}")
        assert _run(tmp_path, "eval", *overrides) == 4

    def test_staged_pipeline(self, tmp_path, toy):
        """vqvae, prior, full, then predict, eval, score-difficulty and sample-prior"""
        config = tmp_path / "config.json"
        config.write_text(json.dumps(TINY), encoding="utf-8")
        common = ("--config", str(config), "--set", f"data.manifest={toy}")
        for stage in ("vqvae", "prior", "full"):
            assert _run(tmp_path, "train", "--stage", stage, *common) == 0
            assert _only(tmp_path, f"*/0/stage-{stage}/step-1/checkpoint.pt").is_file()

        assert _run(tmp_path, "predict", *common) == 0
        predictions = sorted(p for p in (tmp_path / "runs").glob("*/0/predictions/*/*.png"))
        assert len(predictions) == len(item_ids(read_manifest(toy)))

        assert _run(tmp_path, "eval", *common) == 0
        assert _only(tmp_path, "*/0/eval/curves.csv").is_file()

        assert _run(tmp_path, "score-difficulty", *common) == 0
        sidecars = sorted((tmp_path / "runs").glob("*/0/difficulty/*/group-*.json"))
        assert len(sidecars) == 4

        assert _run(tmp_path, "sample-prior", *common) == 0
        assert len(sorted((tmp_path / "runs").glob("*/0/samples/sample-*.png"))) == 2
        assert _only(tmp_path, "*/0/samples/indices.npy").is_file()
