from datetime import date

import pytest

from clustertmle.config import (ConfigError, config_hash, parse_config, plan_from_config,
                                sim_from_config)


def _write(path, text):
    path.write_text(text)
    return path


def test_parse_comments_include_and_override(tmp_path):
    _write(tmp_path / "base.cfg", "name = base\nthreshold = 400  # default\n")
    cfg = parse_config(_write(tmp_path / "p.cfg", "include = base.cfg\n\nthreshold = 50\n"))
    assert cfg == {"name": "base", "threshold": "50"}


def test_include_cycle(tmp_path):
    _write(tmp_path / "a.cfg", "include = b.cfg\n")
    _write(tmp_path / "b.cfg", "include = a.cfg\n")
    with pytest.raises(ConfigError, match="cycle"):
        parse_config(tmp_path / "a.cfg")


@pytest.mark.parametrize("text", ["just words\n", " = value\n"])
def test_malformed_lines(tmp_path, text):
    with pytest.raises(ConfigError):
        parse_config(_write(tmp_path / "x.cfg", text))


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        parse_config(tmp_path / "nope.cfg")


def test_plan_from_config():
    plan = plan_from_config({"name": "s", "population": "secondary", "missing_handling": "adjust",
                             "stage1": "tmle_sequential", "adaptive": "false",
                             "clinic_candidates": "none, both", "weights": "size",
                             "enrollment_cutoff": "2019-12-01", "threshold": "50"})
    assert plan.population.population == "secondary"
    assert plan.population.enrollment_cutoff == date(2019, 12, 1)
    assert plan.population.missing_handling == "adjust"
    assert plan.clinic_candidates == ("none", "both") and not plan.adaptive
    assert plan.endpoint.threshold == 50


def test_plan_subgroup_and_no_cutoff():
    plan = plan_from_config({"name": "g", "estimator": "single_stage", "subgroup": "sex = female",
                             "enrollment_cutoff": "none"})
    assert plan.subgroup == ("sex", "female") and plan.population.enrollment_cutoff is None


@pytest.mark.parametrize("cfg", [
    {"threshold": "400"},
    {"name": "x", "colour": "red"},
    {"name": "x", "threshold": "abc"},
    {"name": "x", "population": "tertiary"},
    {"name": "x", "adaptive": "maybe"},
    {"name": "x", "subgroup": "sex"},
    {"name": "x", "endpoint": "height"},
])
def test_plan_errors(cfg):
    with pytest.raises(ConfigError):
        plan_from_config(cfg)


def test_primary_population_cannot_include_transfers():
    with pytest.raises(ConfigError, match="excludes transfers"):
        plan_from_config({"name": "x", "transfer_handling": "include"})
    plan = plan_from_config({"name": "x", "population": "secondary", "transfer_handling": "include"})
    assert plan.population.transfer_handling == "include"


def test_sim_from_config():
    spec, an = sim_from_config({"relative_effect": "1.24", "m_range": "30, 60", "replicates": "5",
                                "estimators": "two_stage", "sided": "two", "alpha": "0.1"})
    assert spec.pi1 == pytest.approx(0.65 * 1.24) and spec.m_range == (30, 60)
    assert [a.estimator for a in an] == ["two_stage"] and an[0].alpha == 0.1


@pytest.mark.parametrize("cfg", [{"pi1": "0.7", "relative_effect": "1.1"}, {"estimators": "magic"},
                                 {"k": "-1"}, {"bogus": "1"}])
def test_sim_errors(cfg):
    with pytest.raises(ConfigError):
        sim_from_config(cfg)


def test_config_hash_is_order_free():
    assert config_hash({"a": "1", "b": "2"}) == config_hash({"b": "2", "a": "1"})
    assert config_hash({"a": "1"}) != config_hash({"a": "2"})
