import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from catprior.config import (
    PRESETS, SCHEMA, STREAMS, default_config, format_value, load_config, parse_value, run_root, stream_rng,
)
from catprior.errors import ConfigurationError


class TestParsing:
    def test_defaults_cover_schema(self):
        cfg = default_config()
        assert set(cfg.values) == set(SCHEMA)

    def test_file_include_and_override(self, tmp_path):
        (tmp_path / "base.cfg").write_text("imitation.k = 16\nseed = 3\n")
        (tmp_path / "run.cfg").write_text("include base.cfg  # shared\nimitation.k = 8\nimitation.hidden = 4, 5\n")
        cfg = load_config(str(tmp_path / "run.cfg"), {"seed": "9"})
        assert cfg["imitation.k"] == 8
        assert cfg["imitation.hidden"] == (4, 5)
        assert cfg["seed"] == 9

    def test_preset_applies_before_own_keys(self, tmp_path):
        (tmp_path / "p.cfg").write_text("preset = full\nimitation.k = 64\n")
        cfg = load_config(str(tmp_path / "p.cfg"))
        assert cfg["imitation.k"] == 64
        assert cfg["imitation.d"] == PRESETS["full"]["imitation.d"]

    def test_errors_name_location(self, tmp_path):
        (tmp_path / "bad.cfg").write_text("seed = 1\nimitation.k = many\n")
        with pytest.raises(ConfigurationError, match="bad.cfg:2"):
            load_config(str(tmp_path / "bad.cfg"))

    @pytest.mark.parametrize("text", ["nokey\n", "unknown.key = 1\n", "preset = huge\n", "ppo.gamma = 1.5\n",
                                      "imitation.k = 0\n", "imitation.k = 2.5\n", "imitation.hidden = 0\n",
                                      "compete.damage_low = 90\n", "imitation.normalize_obs = maybe\n"])
    def test_rejects(self, tmp_path, text):
        (tmp_path / "c.cfg").write_text(text)
        with pytest.raises(ConfigurationError):
            load_config(str(tmp_path / "c.cfg"))

    def test_include_cycle(self, tmp_path):
        (tmp_path / "a.cfg").write_text("include b.cfg\n")
        (tmp_path / "b.cfg").write_text("include a.cfg\n")
        with pytest.raises(ConfigurationError, match="cycle"):
            load_config(str(tmp_path / "a.cfg"))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigurationError):
            load_config(str(tmp_path / "absent.cfg"))

    @given(st.sampled_from(sorted(SCHEMA)))
    def test_format_parse_round_trip(self, key):
        v = SCHEMA[key][1]
        assert parse_value(key, format_value(v)) == v


class TestIdentity:
    def test_digest_tracks_values(self):
        a = default_config()
        assert a.digest() == default_config().digest()
        assert a.with_overrides({"seed": "1"}).digest() != a.digest()

    def test_structural_fields(self):
        s = default_config().structural()
        assert set(s) == {"imitation.k", "imitation.d", "imitation.hidden", "data.skills"}


class TestStreams:
    def test_streams_independent_and_reproducible(self):
        draws = {s: stream_rng(0, s).integers(0, 2**62) for s in STREAMS}
        assert len(set(draws.values())) == len(STREAMS)
        assert stream_rng(0, "sim").integers(0, 2**62) == draws["sim"]
        assert stream_rng(1, "sim").integers(0, 2**62) != draws["sim"]
        np.testing.assert_array_equal(default_config().rng("league").random(3), stream_rng(0, "league").random(3))

    def test_unknown_stream(self):
        with pytest.raises(ConfigurationError):
            stream_rng(0, "weather")


class TestRunRoot:
    def test_precedence(self, monkeypatch, tmp_path):
        monkeypatch.setenv("CATPRIOR_RUN_DIR", str(tmp_path / "env"))
        assert run_root("explicit") == "explicit"
        assert run_root() == str(tmp_path / "env")
        monkeypatch.delenv("CATPRIOR_RUN_DIR")
        monkeypatch.chdir(tmp_path)
        assert run_root() == str(tmp_path / "runs")
