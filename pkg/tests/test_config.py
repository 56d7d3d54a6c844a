import pytest

from dnet.config import apply_overrides, flatten, format_value, parse_value, read_config_file, split_keys
from dnet.errors import ConfigError, ParseError
from dnet.model import ModelConfig


class TestParseValue:
    @pytest.mark.parametrize("text,value", [
        ("true", True), ("Off", False), ("none", None), ("20", 20), ("0.001", 0.001),
        ("64,64,128", (64, 64, 128)), ("P_R+P_H", "P_R+P_H"), ("1e-3", 1e-3),
    ])
    def test_values(self, text, value):
        assert parse_value(text) == value

    @pytest.mark.parametrize("value", [True, None, 3, 0.25, (8, 16), "sps"])
    def test_format_round_trip(self, value):
        assert parse_value(format_value(value)) == value


class TestReadFile:
    def test_comments_dotted_and_last_wins(self, tmp_path):
        p = tmp_path / "run.cfg"
        p.write_text("# header\nepochs = 3  # inline\n\nsgc.k = 20\nsgc.k = 10\nsets = P_R+P_H\n")
        assert read_config_file(p) == {"epochs": 3, "sgc.k": 10, "sets": "P_R+P_H"}

    def test_missing_equals_reports_line(self, tmp_path):
        p = tmp_path / "bad.cfg"
        p.write_text("epochs = 3\nsgc.k 20\n")
        with pytest.raises(ParseError) as e:
            read_config_file(p)
        assert e.value.line == 2

    def test_bad_key(self, tmp_path):
        p = tmp_path / "bad.cfg"
        p.write_text("a b = 1\n")
        with pytest.raises(ParseError):
            read_config_file(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            read_config_file(tmp_path / "absent.cfg")


class TestOverrides:
    def test_split_keys(self):
        model, run = split_keys({"sgc.k": 5, "epochs": 2, "seed": 1, "fusion": "max"})
        assert model == {"sgc.k": 5, "fusion": "max"}
        assert run == {"epochs": 2, "seed": 1}

    def test_apply(self):
        cfg = apply_overrides(None, {"sgc.k": 5, "sgc.widths": 16, "head_widths": (32, 16), "sets": "P_H"})
        assert cfg.sgc.k == 5 and cfg.sgc.widths == (16,)
        assert cfg.head_widths == (32, 16) and cfg.sets == ("P_H",)

    def test_base_untouched(self):
        base = ModelConfig()
        apply_overrides(base, {"fusion": "mean"})
        assert base.fusion == "learned"

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            apply_overrides(None, {"sgc.depth": 3})

    def test_flatten_round_trip(self):
        cfg = apply_overrides(None, {"sgc.k": 7, "n1": 12})
        assert apply_overrides(None, {k: v for k, v in flatten(cfg).items()}) == cfg
