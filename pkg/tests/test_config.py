import pytest

from pixalign.config import RunConfig, apply_override, parse_value
from pixalign.errors import ConfigError

BASE = """\
[model]
image_size = 16
patch_size = 4
depth = 3
hidden_dim = 32
heads = 2
num_classes = 3
in_context_start_block = 2

[data]
kind = "shapes"
num_classes = 3
image_size = 16

[alignment]
variant = "mlp"
lambda = 0.5
"""


def test_defaults_are_explicit_after_canonicalisation():
    text = RunConfig.from_text("").canonical_text()
    for needle in ("[alignment]", "lambda = 0.1", "mask_ratio = 0.2", "steps = 50", "guidance_interval = [0.1, 1.0]",
                   "alignment_depth = 2", "ema_decays = [0.9996, 0.9998, 0.9999]", "betas = [0.9, 0.95]"):
        assert needle in text


def test_roundtrip_structure_and_hash():
    cfg = RunConfig.from_text(BASE)
    again = RunConfig.from_text(cfg.canonical_text())
    assert again.to_dict() == cfg.to_dict() and again.config_hash == cfg.config_hash
    assert cfg.alignment.lam == 0.5 and cfg.model.alignment_depth == 1


def test_hash_stable_under_key_reordering():
    sections = [block.strip().splitlines() for block in BASE.split("\n\n")]
    shuffled = [[lines[0]] + lines[1:][::-1] for lines in sections[::-1]]
    text = "\n\n".join("\n".join(lines) for lines in shuffled) + "\n"
    assert text != BASE
    assert RunConfig.from_text(text).config_hash == RunConfig.from_text(BASE).config_hash
    changed = RunConfig.from_text(BASE.replace("lambda = 0.5", "lambda = 0.25"))
    assert changed.config_hash != RunConfig.from_text(BASE).config_hash


def test_unknown_key_reports_line():
    bad = BASE.replace("heads = 2", "heads = 2\nwidth = 7")
    with pytest.raises(ConfigError, match=r"line 7: unknown key 'width' in \[model\]"):
        RunConfig.from_text(bad)
    with pytest.raises(ConfigError, match="unknown section"):
        RunConfig.from_text(BASE + "\n[optimizer]\nlr = 1.0\n")
    with pytest.raises(ConfigError, match="unknown key 'lam'"):
        RunConfig.from_text("[alignment]\nlam = 0.1\n")


def test_invalid_values_report_line():
    with pytest.raises(ConfigError, match="line 4"):
        RunConfig.from_text(BASE.replace("depth = 3", 'depth = "three"'))
    with pytest.raises(ConfigError, match="line 17: .*must be a number"):
        RunConfig.from_text(BASE.replace('variant = "mlp"', 'variant = "mlp"\nmask_ratio = true'))
    with pytest.raises(ConfigError, match="lambda"):
        RunConfig.from_text(BASE.replace("lambda = 0.5", "lambda = 0.0"))
    with pytest.raises(ConfigError, match="invalid TOML"):
        RunConfig.from_text("[model\n")
    with pytest.raises(ConfigError, match="num_classes"):
        RunConfig.from_text(BASE.replace("num_classes = 3\nimage_size = 16", "num_classes = 4\nimage_size = 16"))


def test_overrides():
    cfg = RunConfig.from_text(BASE, ["alignment.variant=mta", "train.steps=7", "sampler.guidance_interval=[0.2, 0.9]"])
    assert cfg.alignment.variant == "mta" and cfg.train.steps == 7 and cfg.sampler.guidance_interval == (0.2, 0.9)
    assert RunConfig.from_text(BASE, ["alignment.lambda=0.3"]).alignment.lam == 0.3
    assert parse_value("mta") == "mta" and parse_value("3") == 3 and parse_value("true") is True
    with pytest.raises(ConfigError):
        apply_override({}, "novalue")
    with pytest.raises(ConfigError, match="unknown key"):
        RunConfig.from_text(BASE, ["train.bogus=1"])


def test_from_file(tmp_path):
    p = tmp_path / "run.toml"
    p.write_text(BASE)
    assert RunConfig.from_file(p).config_hash == RunConfig.from_text(BASE).config_hash
    with pytest.raises(ConfigError, match="not found"):
        RunConfig.from_file(tmp_path / "nope.toml")
