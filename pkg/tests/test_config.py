import pytest
import yaml

from selfcollab.config import VARIANTS, ConfigError, ExperimentConfig, load_config


def test_defaults_roundtrip(tmp_path):
    cfg = ExperimentConfig()
    cfg.save(tmp_path / "c.yaml")
    back = load_config(tmp_path / "c.yaml")
    assert back == cfg
    assert back.hash() == cfg.hash()


def test_reference_defaults():
    cfg = ExperimentConfig()
    assert (cfg.data.batch_size, cfg.data.patch_size) == (6, 112)
    assert cfg.optimizer.lr == 2e-4
    assert (cfg.schedule.s1, cfg.schedule.s2, cfg.schedule.s3, cfg.schedule.sc_iterations) == (4, 12, 14, 8)
    assert cfg.losses.bgm == 6.0


def test_repo_config_loads():
    cfg = load_config("configs/toy_denoise.yaml")
    assert cfg.schedule.rebsc_folds == [2, 4]


def test_unknown_key_rejected():
    with pytest.raises(ConfigError) as exc:
        ExperimentConfig.from_dict({"schedule": {"s1": 1, "bogus": 2}})
    assert exc.value.path == "schedule.bogus"


@pytest.mark.parametrize("bad,path", [
    ({"schedule": {"s1": 5, "s2": 4}}, "schedule"),
    ({"schedule": {"rebsc_folds": [3]}}, "schedule.rebsc_folds"),
    ({"schedule": {"rebsc_folds": []}}, "schedule.rebsc_folds"),
    ({"optimizer": {"lr": 0}}, "optimizer.lr"),
    ({"optimizer": {"beta1": 1.0}}, "optimizer.beta1"),
    ({"data": {"batch_size": "six"}}, "data.batch_size"),
    ({"networks": {"restorer": {"backbone": "vit"}}}, "networks.restorer.backbone"),
    ({"networks": {"channels": 2}}, "networks.channels"),
    ({"variants": ["V9"]}, "variants"),
    ({"losses": {"bgm": -1.0}}, "losses"),
    ({"stop_grad_prompt": 1}, "stop_grad_prompt"),
])
def test_invalid_values_name_field(bad, path):
    with pytest.raises(ConfigError) as exc:
        ExperimentConfig.from_dict(bad)
    assert exc.value.path == path


def test_non_mapping_yaml(tmp_path):
    (tmp_path / "c.yaml").write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError, match="mapping"):
        load_config(tmp_path / "c.yaml")


def test_hash_stable_under_key_order(tmp_path):
    d = ExperimentConfig().to_dict()
    rev = {k: d[k] for k in reversed(list(d))}
    (tmp_path / "a.yaml").write_text(yaml.safe_dump(d, sort_keys=True))
    (tmp_path / "b.yaml").write_text(yaml.safe_dump(rev, sort_keys=False))
    assert load_config(tmp_path / "a.yaml").hash() == load_config(tmp_path / "b.yaml").hash()


def test_hash_ignores_output_dir_only():
    cfg = ExperimentConfig()
    assert cfg.replace(output_dir="elsewhere").hash() == cfg.hash()
    assert cfg.replace(seed=1).hash() != cfg.hash()


def test_replace_dotted_and_revalidates():
    cfg = ExperimentConfig().replace(**{"schedule.s1": 2, "networks.restorer.width": 16})
    assert cfg.schedule.s1 == 2 and cfg.networks.restorer.width == 16
    with pytest.raises(ConfigError):
        cfg.replace(**{"schedule.s3": 1})


def test_variant_grid():
    on = {k: (v.self_synthesis_branch, v.bgm_loss, v.pl_module, v.parallel_branches) for k, v in VARIANTS.items()}
    assert on == {
        "V1": (False, False, False, False),
        "V2": (False, True, False, False),
        "V3": (False, True, True, False),
        "V4": (True, True, True, False),
        "V5": (False, True, True, True),
    }
    assert ExperimentConfig().variants == ["V1", "V2", "V3", "V4", "V5"]
