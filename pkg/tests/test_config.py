import json

import pytest

from msmedcap.config import RunConfig, StagePlan, config_from_dict, load_config
from msmedcap.errors import ConfigError


def test_defaults_are_explicit_in_resolved_config():
    d = RunConfig().validate().to_dict()
    assert d["pretrain"]["epochs"] == 3 and d["finetune"]["epochs"] == 3
    assert d["pretrain"]["branch_mixes"] == {"clip": "G", "sam": "G+M"}
    assert d["finetune"]["mix"] == "M"
    assert d["pretrain"]["optimizer"]["lr"] == 1e-3 and d["finetune"]["optimizer"]["lr"] == 5e-4
    assert d["qformer"]["num_queries"] == 8 and d["qformer"]["hidden"] == 64 and d["qformer"]["temp_init"] == 0.07
    assert d["decode"] == {"strategy": "beam", "beam_size": 3, "alpha": 0.7, "max_len": 32}
    assert d["general_encoder"]["blur_kernel"] == 9 and d["detail_encoder"]["blur_kernel"] is None
    assert d["prompt"] == "a picture of" and d["max_caption_tokens"] == 32


def test_resolved_config_round_trips(tmp_path):
    cfg = RunConfig().validate()
    p = tmp_path / "c.json"
    p.write_text(cfg.dumps())
    assert load_config(p).to_dict() == cfg.to_dict()


def test_partial_override_merges():
    cfg = config_from_dict({"seed": 4, "finetune": {"epochs": 9}})
    assert cfg.seed == 4 and cfg.finetune.epochs == 9 and cfg.finetune.mix == "M"


def test_mix_replaced_not_merged():
    cfg = config_from_dict({"pretrain": {"branch_mixes": {"sam": "G+M"}}})
    assert cfg.pretrain.branch_mixes == {"sam": "G+M"}


@pytest.mark.parametrize(
    "doc",
    [
        {"sead": 1},
        {"pretrain": {"epochs": 0}},
        {"finetune": {"mix": "X"}},
        {"pretrain": {"branch_mixes": {"vit": "G"}}},
        {"decode": {"strategy": "sample"}},
        {"seed": "zero"},
        {"pretrain": {"branch_mixes": {"clip": {"general": -1}}}},
    ],
)
def test_invalid_configs(doc):
    with pytest.raises(ConfigError):
        config_from_dict(doc)


def test_stage_plan_invariants():
    with pytest.raises(ConfigError):
        StagePlan("finetune", mix=None).validate()
    with pytest.raises(ConfigError):
        StagePlan("pretrain", branch_mixes={"clip": "G"}, mix="M").validate()
    StagePlan("finetune", mix={"medical": 1.0, "general": 0.5}).validate()


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    with pytest.raises(ConfigError):
        load_config(bad)
    bad.write_text(json.dumps([1]))
    with pytest.raises(ConfigError):
        load_config(bad)
