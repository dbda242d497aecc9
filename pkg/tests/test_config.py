import pytest

from plandiff.attention import MaskMode
from plandiff.config import RunConfig, dump_config, load_config, section_fields
from plandiff.diffusion import UnmaskMode
from plandiff.errors import ConfigError


def test_defaults_resolve():
    cfg = RunConfig()
    g = cfg.generation_config()
    assert g.policy.mode == UnmaskMode.ENTROPY and g.mask_mode == MaskMode.SPAN_ISOLATED
    assert cfg.train_config("ar").method == "ar"
    assert cfg.model_config(700).vocab_size == 700
    assert {c.method for c in cfg.bench_config().cells()} == {"ar", "diffusion", "pd", "pd-da", "pd-tau"}


def test_set_coerces_types():
    cfg = RunConfig().set("generate", "confidence", "0.7").set("bench", "steps_ratios", "0.25, 0.5,1")
    cfg = cfg.set("train", "clean_plan_pass", "yes").set("generate", "method", "pd-da")
    assert cfg.generate.confidence == 0.7
    assert cfg.bench.steps_ratios == (0.25, 0.5, 1.0)
    assert cfg.train.clean_plan_pass is True
    g = cfg.generation_config()
    assert g.policy.mode == UnmaskMode.CONFIDENCE and g.mask_mode == MaskMode.DENSE


@pytest.mark.parametrize("section,key,value", [("nope", "x", 1), ("train", "nope", 1),
                                               ("train", "steps", "many"), ("train", "clean_plan_pass", "maybe")])
def test_set_rejects(section, key, value):
    with pytest.raises(ConfigError):
        RunConfig().set(section, key, value)


def test_ini_round_trip(tmp_path):
    cfg = RunConfig().set("corpus", "n_train", 17).set("bench", "methods", "pd,ar")
    path = tmp_path / "run.ini"
    path.write_text(dump_config(cfg))
    back = load_config(path)
    assert back == cfg and back.digest() == cfg.digest()
    assert RunConfig().digest() != cfg.digest()


def test_ini_unknown_key(tmp_path):
    path = tmp_path / "bad.ini"
    path.write_text("[train]\nlearning_rate = 1\n")
    with pytest.raises(ConfigError):
        load_config(path)


def test_section_fields():
    assert "steps_ratio" in section_fields("generate")
    assert "n_heldout" in section_fields("corpus")
