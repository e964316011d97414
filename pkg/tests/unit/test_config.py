"""
Tests for configuration loading and precedence.
"""

import json

import pytest

from ownership.config import Settings, load_settings
from ownership.errors import ConfigurationError


def test_settings_defaults():
    """Test that default values are set correctly in Settings."""
    settings = load_settings()

    assert settings.chaff_ratio == 0.5
    assert settings.k_default == 9
    assert settings.seed == 0
    assert settings.ports.api == 8000
    assert settings.dedup_key == "insurance_number"
    assert settings.chaff_generator == "distributional"
    assert settings.shuffle_tumble_batches is True
    assert [c.name for c in settings.custodians] == ["custodian-a", "custodian-b"]
    assert "name" in settings.identifying_fields


def test_custodian_addresses_follow_seeds():
    settings = load_settings()
    assert settings.custodian("custodian-a").address == settings.custodian_addresses[0]
    with pytest.raises(ConfigurationError):
        settings.custodian("missing")


@pytest.mark.parametrize("ratio", [-0.1, 1.0, 1.5])
def test_chaff_ratio_out_of_range(ratio):
    with pytest.raises(ConfigurationError, match="chaff_ratio"):
        load_settings(chaff_ratio=ratio)


def test_log_level_is_normalised():
    assert load_settings(log_level="debug").log_level == "DEBUG"
    with pytest.raises(ConfigurationError):
        load_settings(log_level="chatty")


def test_dedup_key_must_be_identifying():
    with pytest.raises(ConfigurationError, match="dedup_key"):
        load_settings(dedup_key="mark")


def test_duplicate_custodian_names_rejected():
    custodian = {"name": "a", "seed": "a", "endpoint_url": "ids://a"}
    with pytest.raises(ConfigurationError):
        load_settings(custodians=[custodian, custodian])


def test_json_file_is_read(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"k_default": 4, "chaff_ratio": 0.25}))
    settings = load_settings(path)
    assert settings.k_default == 4
    assert settings.chaff_ratio == 0.25


def test_environment_beats_file_and_flags_beat_environment(tmp_path, monkeypatch):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"k_default": 4}))
    monkeypatch.setenv("OWNERSHIP_K_DEFAULT", "6")
    assert load_settings(path).k_default == 6
    assert load_settings(path, k_default=8).k_default == 8


def test_nested_environment_keys(monkeypatch):
    monkeypatch.setenv("OWNERSHIP_PORTS__API", "9100")
    assert load_settings().ports.api == 9100


def test_json_syntax_error_names_the_line(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text('{\n  "k_default": 4,\n  oops\n}')
    with pytest.raises(ConfigurationError) as excinfo:
        load_settings(path)
    assert "line 3" in excinfo.value.message
    assert excinfo.value.details["line"] == 3


def test_unknown_file_keys_rejected(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"k_defualt": 4}))
    with pytest.raises(ConfigurationError, match="k_defualt"):
        load_settings(path)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigurationError, match="cannot read"):
        load_settings(tmp_path / "absent.json")


def test_settings_class_direct():
    settings = Settings(seed=3)
    assert settings.seed == 3
