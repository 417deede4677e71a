import pytest

from tirkit import config as cf
from tirkit.errors import ConfigError


class TestDefaults:
    def test_schema_defaults_visible(self):
        cfg = cf.load_config(env={})
        assert cfg.get("sampling", "m") == 10
        assert cfg.get("sampling", "temperature") == 1.0
        assert cfg.get("tool", "per_tool_limit") == 4
        assert cfg.get("curation", "hard_easy_ratio") == (2, 1)
        assert cfg.get("curation", "strategy_mix") == (13, 7)
        assert cfg.get("loop", "max_loops") == 2

    def test_typed_views(self):
        cfg = cf.load_config(env={})
        sc = cfg.sampler_config()
        assert sc.rollouts == 10 and sc.branch_k == 3 and sc.branch_b == 2
        cc = cfg.criteria_config()
        assert cc.entropy_hard_max == 0.5


class TestFileLoading:
    def test_ini_values_parsed(self, tmp_path):
        path = tmp_path / "cfg.ini"
        path.write_text("[sampling]\nm = 5\ntemperature = 0.7\n"
                        "[curation]\nhard_easy_ratio = 3:1\n")
        cfg = cf.load_config(str(path), env={})
        assert cfg.get("sampling", "m") == 5
        assert cfg.get("sampling", "temperature") == 0.7
        assert cfg.get("curation", "hard_easy_ratio") == (3, 1)

    def test_missing_file_rejected(self):
        with pytest.raises(ConfigError):
            cf.load_config("/nonexistent/cfg.ini", env={})

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "cfg.ini"
        path.write_text("[sampling]\nbogus = 1\n")
        with pytest.raises(ConfigError):
            cf.load_config(str(path), env={})

    def test_unknown_section_rejected(self, tmp_path):
        path = tmp_path / "cfg.ini"
        path.write_text("[mystery]\nx = 1\n")
        with pytest.raises(ConfigError):
            cf.load_config(str(path), env={})

    def test_bad_typed_value_rejected(self, tmp_path):
        path = tmp_path / "cfg.ini"
        path.write_text("[sampling]\nm = lots\n")
        with pytest.raises(ConfigError):
            cf.load_config(str(path), env={})


class TestEnvOverrides:
    def test_env_overrides_file(self, tmp_path):
        path = tmp_path / "cfg.ini"
        path.write_text("[sampling]\nm = 5\n")
        cfg = cf.load_config(str(path), env={"TIRKIT_SAMPLING__M": "7"})
        assert cfg.get("sampling", "m") == 7

    def test_dotted_key_flattened(self):
        cfg = cf.load_config(env={"TIRKIT_TOOL__CODE_TIMEOUT_MS": "2000"})
        assert cfg.get("tool", "code.timeout_ms") == 2000

    def test_unrelated_env_ignored(self):
        cfg = cf.load_config(env={"PATH": "/usr/bin", "TIRKIT_NOUNDERSCORE": "x"})
        assert cfg.get("sampling", "m") == 10

    def test_bad_env_value_rejected(self):
        with pytest.raises(ConfigError):
            cf.load_config(env={"TIRKIT_SAMPLING__M": "many"})

    def test_loop_endpoint_env(self):
        cfg = cf.load_config(env={"TIRKIT_LOOP__ENDPOINT_2": "http://host:1"})
        assert cfg.loop_endpoints() == {2: "http://host:1"}


class TestOverridesAndViews:
    def test_explicit_overrides_win(self):
        cfg = cf.load_config(env={"TIRKIT_SAMPLING__M": "7"},
                             overrides={("sampling", "m"): "3"})
        assert cfg.get("sampling", "m") == 3

    def test_loop_endpoints_dynamic_keys(self):
        cfg = cf.load_config(env={}, overrides={
            ("loop", "endpoint.1"): "http://a", ("loop", "endpoint.2"): "http://b"})
        assert cfg.loop_endpoints() == {1: "http://a", 2: "http://b"}

    def test_unknown_get_rejected(self):
        with pytest.raises(ConfigError):
            cf.load_config(env={}).get("sampling", "bogus")

    def test_effective_merges_defaults_and_values(self):
        cfg = cf.load_config(env={}, overrides={("sampling", "m"): "4"})
        eff = cfg.effective()
        assert eff["sampling"]["m"] == 4
        assert eff["sampling"]["branch_k"] == 3

    def test_snapshot_serializable(self):
        import json
        cfg = cf.load_config(env={}, overrides={("loop", "endpoint.1"): "http://a"})
        snap = cfg.snapshot()
        json.dumps(snap)
        assert snap["curation.hard_easy_ratio"] == "2:1"
        assert snap["loop.endpoint.1"] == "http://a"


class TestRatioParser:
    @pytest.mark.parametrize("raw", ["2", "a:b", "1:2:3", ""])
    def test_bad_ratio_rejected(self, raw):
        with pytest.raises(ConfigError):
            cf.load_config(env={}, overrides={("curation", "strategy_mix"): raw})

    def test_good_ratio(self):
        cfg = cf.load_config(env={}, overrides={("curation", "strategy_mix"): "13:7"})
        assert cfg.get("curation", "strategy_mix") == (13, 7)
