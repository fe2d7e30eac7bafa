import pytest

from udaseg import config as C


def test_defaults_validate_and_roundtrip(tmp_path):
    cfg = C.TrainConfig().validate()
    p = tmp_path / "c.yaml"
    p.write_text(C.dump_config(cfg))
    back = C.load_config(p)
    assert back == cfg
    assert C.config_hash(back) == C.config_hash(cfg)


def test_hash_changes_with_any_key():
    base = C.TrainConfig()
    h = C.config_hash(base)
    assert C.config_hash(C.apply_overrides(base, ["mask.ratio=0.5"])) != h
    assert C.config_hash(C.apply_overrides(base, ["seed=8"])) != h
    assert C.config_hash(C.apply_overrides(base, ["seed=7"])) == h


def test_unknown_key_rejected_and_lists_valid_keys(tmp_path):
    with pytest.raises(C.ConfigError, match="valid keys") as e:
        C.apply_overrides(C.TrainConfig(), ["mask.ration=0.5"])
    assert "mask.ratio" in str(e.value)
    p = tmp_path / "c.yaml"
    p.write_text("mix:\n  fractoin: 0.3\n")
    with pytest.raises(C.ConfigError, match="mix.fractoin"):
        C.load_config(p)
    p.write_text("bogus: 1\n")
    with pytest.raises(C.ConfigError, match="bogus"):
        C.load_config(p)


def test_override_types():
    cfg = C.apply_overrides(C.TrainConfig(), [
        "mix.prior_guided=false", "optim.lr=1e-4", "max_iterations=10",
        "mix.active_groups=[flat, nature]", "contrastive.stages=[source]", "optim.lr=0"])
    assert cfg.mix.prior_guided is False
    assert cfg.optim.lr == 0.0 and isinstance(cfg.optim.lr, float)
    assert cfg.max_iterations == 10 and isinstance(cfg.max_iterations, int)
    assert cfg.mix.active_groups == ["flat", "nature"]
    assert cfg.contrastive.stages == ["source"]


@pytest.mark.parametrize("item", [
    "max_iterations=-1", "crop=0", "mask.ratio=1.5", "ema.alpha=1.0", "ema.alpha=-0.1",
    "contrastive.temperature=0", "contrastive.stages=[source, bogus]", "mix.prior_guided=3",
    "max_iterations=2.5", "format_version=2", "noequals",
])
def test_invalid_values(item):
    with pytest.raises(C.ConfigError):
        C.apply_overrides(C.TrainConfig(), [item])


def test_builtin_configs_load():
    toy = C.resolve_config("toy")
    assert toy.seed == 7 and toy.max_iterations == 3000
    full_scale = C.resolve_config("gta2cityscapes")
    assert full_scale.crop == 952 and full_scale.batch_size == 1
    assert full_scale.data.taxonomy == "cityscapes"
    with pytest.raises(C.ConfigError):
        C.resolve_config("no-such-config")


def test_valid_keys_cover_sections():
    keys = set(C.valid_keys())
    for k in ["seed", "mix.prior_guided", "mask.ratio", "contrastive.lambda_pix",
              "ema.alpha", "pseudo.threshold", "optim.lr", "adapt_start"]:
        assert k in keys
