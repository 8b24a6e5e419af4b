import pytest

from nvrc import config as cm
from nvrc.errors import ConfigurationError


class TestParse:
    def test_round_trip(self):
        cfg = cm.FullConfig().with_overrides(rd_lambda=2.0, grid_block=(8, 4, 4), level2_coding=False)
        again = cm.parse_text(cfg.to_text())
        assert again == cfg

    def test_values_and_comments(self):
        cfg = cm.parse_text("rd_lambda = 0.5  # weight\nstrides = 2,2,2\nalternating = false\nloss = yuv\n")
        assert cfg.train.rd_lambda == 0.5 and cfg.model.strides == (2, 2, 2)
        assert cfg.train.alternating is False and cfg.train.loss == "yuv"

    @pytest.mark.parametrize(
        "text",
        ["bogus = 1", "rd_lambda", "rd_lambda = abc", "frames = 2.5", "rd_lambda = 1\nrd_lambda = 2", "alternating = maybe"],
    )
    def test_errors(self, text):
        with pytest.raises(ConfigurationError):
            cm.parse_text(text)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigurationError):
            cm.load(tmp_path / "none.cfg")

    def test_keys_are_unique_across_sections(self):
        seen = set()
        for _, cls in cm.SECTIONS:
            names = {f for f in cls.__dataclass_fields__}
            assert not names & seen
            seen |= names


class TestAblations:
    def test_variants(self):
        assert cm.ablation("v4") == {"level2_coding": False}
        assert set(cm.ABLATIONS) == {"v1", "v2", "v3", "v4", "v5"}

    def test_v3_combines_v1_and_v2(self):
        assert cm.ablation("v3") == {**cm.ablation("v1"), **cm.ablation("v2")}

    def test_unknown(self):
        with pytest.raises(ConfigurationError):
            cm.ablation("v9")
