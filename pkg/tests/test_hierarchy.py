import numpy as np
import pytest
import torch

from conftest import randomize_codec, tiny_model_config, tiny_options
from nvrc import hierarchy as hy
from nvrc.errors import ChecksumError, DecodeError, TruncatedError, VersionError


def _codec(seed=0, **opts):
    return randomize_codec(hy.Codec(tiny_model_config(), tiny_options(**opts), seed=seed), seed)


@pytest.fixture(scope="module")
def encoded():
    codec = _codec(1)
    return codec, hy.encode_codec(codec)


def _same_symbols(a, b):
    assert a.keys() == b.keys()
    for level in a:
        assert a[level].keys() == b[level].keys()
        for k in a[level]:
            assert np.array_equal(np.asarray(a[level][k]), np.asarray(b[level][k])), (level, k)


class TestRoundTrip:
    def test_symbols_psi_and_video(self, encoded):
        codec, res = encoded
        dec = hy.decode_stream(res.data)
        _same_symbols(res.symbols, dec.symbols)
        assert res.psi_half.view(np.uint16).tobytes() == dec.psi_half.view(np.uint16).tobytes()
        assert torch.equal(res.reconstruction, dec.video)

    @pytest.mark.parametrize(
        "opts",
        [dict(grid_em="per_tensor"), dict(layer_em="per_tensor"), dict(level2_coding=False), dict(grid_step="fixed")],
    )
    def test_ablation_layouts(self, opts):
        res = hy.encode_codec(_codec(2, **opts))
        dec = hy.decode_stream(res.data)
        _same_symbols(res.symbols, dec.symbols)
        assert torch.equal(res.reconstruction, dec.video)

    def test_encode_is_deterministic(self):
        assert hy.encode_codec(_codec(3), render=False).data == hy.encode_codec(_codec(3), render=False).data

    def test_python_and_compiled_backends_agree(self, encoded):
        _, res = encoded
        py = hy.encode_codec(_codec(1), backend="python", render=False)
        assert py.data == res.data
        dec = hy.decode_stream(res.data, backend="python", render=False)
        _same_symbols(res.symbols, dec.symbols)


class TestContainer:
    def test_magic(self, encoded):
        assert encoded[1].data[:4] == bytes([0x4E, 0x56, 0x52, 0x43])

    def test_reserialize_is_identical(self, encoded):
        data = encoded[1].data
        ps = hy.parse(data)
        again = hy.serialize(ps.model_config, ps.options, ps.sections["psi"], ps.sections["phi"], ps.sections["theta"])
        assert again == data

    def test_truncation_names_section(self, encoded):
        data = encoded[1].data
        ps = hy.parse(data)
        off, length = ps.section_layout["theta"]
        with pytest.raises(TruncatedError) as info:
            hy.decode_stream(data[: off + length // 2])
        assert info.value.section == "theta"
        with pytest.raises(TruncatedError) as info:
            hy.parse(data[:10])
        assert info.value.section == "header"

    def test_flipped_byte_fails_checksum(self, encoded):
        data = bytearray(encoded[1].data)
        off, _ = hy.parse(bytes(data)).section_layout["phi"]
        data[off + 1] ^= 0x10
        with pytest.raises(ChecksumError) as info:
            hy.decode_stream(bytes(data))
        assert info.value.section == "phi"

    def test_wrong_version(self, encoded):
        data = bytearray(encoded[1].data)
        data[4] = 9
        with pytest.raises(VersionError):
            hy.parse(bytes(data))

    def test_bad_magic(self, encoded):
        with pytest.raises(DecodeError):
            hy.parse(b"XXXX" + encoded[1].data[4:])

    def test_trailing_bytes(self, encoded):
        with pytest.raises(DecodeError):
            hy.parse(encoded[1].data + b"\0")

    def test_varint_round_trip(self):
        for n in (0, 1, 127, 128, 300, 2 ** 31):
            buf = bytearray()
            hy.write_varint(buf, n)
            assert hy.read_varint(bytes(buf), 0, "phi") == (n, len(buf))

    def test_segments_are_independent(self):
        payloads = [b"abc", b"", b"\x01" * 200]
        data, _ = hy.pack_segments(payloads)
        segs, _ = hy.unpack_segments(data, 3, "theta")
        assert [bytes(s) for s in segs] == payloads


class TestRateAccounting:
    def test_report_categories_sum_to_stream(self, encoded):
        data = encoded[1].data
        rep = hy.rate_report(data)
        assert sum(rep["bits"].values()) == 8 * len(data) == rep["total_bits"]
        cfg = tiny_model_config()
        assert rep["bpp"] == 8 * len(data) / (cfg.frames * cfg.height * cfg.width)

    def test_estimates_track_payloads(self, encoded):
        _, res = encoded
        for section in ("phi", "theta"):
            est, act = res.estimates[section], res.actual[section]
            assert abs(act - est) <= 0.02 * est + 512, section

    def test_raw_phi_has_no_coded_bits(self):
        rep = hy.rate_report(hy.encode_codec(_codec(4, level2_coding=False), render=False).data)
        assert rep["phi_coded_bits"] == 0 and rep["bits"]["psi"] == 0

    def test_psi_is_six_bytes_per_group(self, encoded):
        codec, res = encoded
        assert hy.rate_report(res.data)["bits"]["psi"] == 48 * len(codec.psi.group_names)

    def test_training_estimate_matches_coder(self, encoded):
        codec, res = encoded
        est = codec.rate_estimate()
        assert est["grids"] + est["layers"] == pytest.approx(res.estimates["theta"], rel=0.05, abs=256)


class TestGroups:
    def test_canonical_order(self):
        names = _codec().phi.group_names()
        assert names[0].startswith("grid.log_delta")
        assert names.index("layer.log_delta_out") < names.index("layer.mu_out")
        assert "context.weight" in names and "context.gain" in names and "context.bias" in names

    def test_per_tensor_grid_groups(self):
        names = _codec(grid_em="per_tensor").phi.group_names()
        assert "grid.mu" in names and "grid.log_sigma" in names and "context.weight" not in names

    def test_initial_steps(self):
        assert hy.initial_step("grid.log_delta.0") == 1 / 16
        assert hy.initial_step("layer.mu_out") == 1e-3
        assert hy.initial_step("context.weight") == 1e-2
