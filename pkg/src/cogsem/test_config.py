import json

import pytest

from cogsem.config import (
    RunConfig,
    StageConfig,
    apply_overrides,
    config_hash,
    load_config,
    run_directory,
    validate_config,
    write_snapshot,
)
from cogsem.errors import ConfigError, LoadError


def _write(tmp_path, document):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(document), encoding="utf-8")
    return path


class TestSchema:
    """Schema validation with key paths"""

    def test_defaults_follow_the_published_settings(self):
        """N=5, k=1, mu=0.5, codebook 128x384"""
        config = load_config(None)
        assert config.data.group_size == 5
        assert config.gsem.k == 1
        assert config.gsem.mu == 0.5
        assert (config.model.vq.num_embeddings, config.model.vq.embedding_dim) == (128, 384)
        assert config.train.full.lambdas == (0.0, 0.0, 1.0)

    def test_unknown_keys_are_rejected_with_their_path(self, tmp_path):
        """extra keys fail at any depth"""
        with pytest.raises(ConfigError) as info:
            load_config(_write(tmp_path, {"model": {"vq": {"codebook_size": 3}}}))
        assert any(key == "model.vq.codebook_size" for key, _ in info.value.issues)

    def test_non_one_hot_lambdas_are_rejected(self):
        """lambdas (1, 1, 0) cannot define a stage"""
        with pytest.raises(ConfigError) as info:
            load_config(None, ["train.vqvae.lambdas=[1, 1, 0]"])
        assert any(key.startswith("train.vqvae") for key, _ in info.value.issues)

    def test_stage_blocks_take_their_name_from_the_key(self):
        """A partial stage override needs no explicit stage field"""
        config = load_config(None, ["train.prior.steps=5"])
        assert config.train.prior.stage == "prior"
        assert config.train.prior.steps == 5

    def test_lambdas_must_match_the_stage(self):
        """The active term belongs to the stage"""
        with pytest.raises(ValueError):
            StageConfig(stage="prior", lambdas=(1.0, 0.0, 0.0))

    def test_image_size_must_fit_the_token_grid(self):
        """image_size is a multiple of 16"""
        with pytest.raises(ConfigError):
            load_config(None, ["data.image_size=40"])

    def test_heads_must_divide_width(self):
        """embed_dim % heads == 0"""
        with pytest.raises(ConfigError):
            load_config(None, ["model.branch.embed_dim=30", "model.branch.heads=4"])

    def test_missing_file_is_a_load_error(self, tmp_path):
        """An absent config file names its path"""
        with pytest.raises(LoadError) as info:
            load_config(tmp_path / "absent.json")
        assert info.value.path.endswith("absent.json")

    def test_invalid_json_is_a_config_error(self, tmp_path):
        """Malformed JSON is reported, not raised raw"""
        path = tmp_path / "broken.json"
        path.write_text("{not json", encoding="utf-8")
        with pytest.raises(ConfigError):
            load_config(path)


class TestCrossField:
    """Checks spanning several sections"""

    def test_exchange_count_must_stay_a_minority(self):
        """k=3 with N=5 fails k < N/2"""
        report = validate_config(None, ["gsem.k=3"])
        assert not report.ok
        assert report.issues[0][0] == "gsem.k"

    def test_stage_level_gsem_is_checked_too(self):
        """Per-stage GSEM blocks obey the same bound"""
        report = validate_config(None, ['train.full.gsem={"k": 3}'])
        assert [key for key, _ in report.issues] == ["train.full.gsem.k"]

    def test_disabled_exchange_passes(self):
        """k=0 turns GSEM off"""
        assert validate_config(None, ["gsem.k=0", "data.group_size=2"]).ok

    def test_missing_checkpoint_is_reported(self, tmp_path):
        """An explicit checkpoint path must exist"""
        report = validate_config(None, [f"checkpoints.vqvae={tmp_path / 'none.pt'}"])
        assert [key for key, _ in report.issues] == ["checkpoints.vqvae"]

    def test_defaults_pass(self):
        """The default configuration validates"""
        report = validate_config(None)
        assert report.ok
        assert report.to_dict() == {"ok": True, "issues": []}


class TestOverrides:
    """Flat key.path=value overrides"""

    def test_values_parse_as_json_when_possible(self):
        """Numbers and booleans are typed, other text stays a string"""
        document = apply_overrides({}, ["a.b=3", "a.c=true", "d=hello"])
        assert document == {"a": {"b": 3, "c": True}, "d": "hello"}

    def test_input_document_is_not_mutated(self):
        """Overrides work on a copy"""
        original = {"a": {"b": 1}}
        apply_overrides(original, ["a.b=2"])
        assert original == {"a": {"b": 1}}

    def test_malformed_override_is_rejected(self):
        """An override needs '='"""
        with pytest.raises(ConfigError):
            apply_overrides({}, ["gsem.k"])

    def test_override_through_a_scalar_is_rejected(self):
        """A scalar cannot be descended into"""
        with pytest.raises(ConfigError):
            apply_overrides({"seed": 1}, ["seed.value=2"])


class TestRunDirectory:
    """Config hash and run layout"""

    def test_hash_ignores_the_seed(self):
        """Seeds share a hash and split by directory"""
        a, b = RunConfig(seed=1), RunConfig(seed=2)
        assert config_hash(a) == config_hash(b)
        assert run_directory(a, "out") != run_directory(b, "out")
        assert run_directory(a, "out").parts[-1] == "1"

    def test_hash_tracks_the_rest(self):
        """Any other change moves the run"""
        assert config_hash(RunConfig()) != config_hash(load_config(None, ["gsem.mu=0.25"]))

    def test_out_falls_back_to_environment(self, monkeypatch, tmp_path):
        """COGSEM_OUT is the default output root"""
        monkeypatch.setenv("COGSEM_OUT", str(tmp_path))
        assert run_directory(RunConfig()).parent.parent == tmp_path

    def test_snapshot_reloads_to_the_same_config(self, tmp_path):
        """config.json round-trips through load_config"""
        config = load_config(None, ["seed=7", "gsem.mu=0.3"])
        path = write_snapshot(config, tmp_path / "run")
        assert load_config(path) == config

    def test_stage_inherits_seed_and_gsem(self):
        """Stage blocks fall back to the top-level seed and GSEM settings"""
        config = load_config(None, ["seed=11", "gsem.k=0", "data.group_size=2"])
        stage = config.stage("full")
        assert stage.seed == 11
        assert stage.gsem.k == 0
