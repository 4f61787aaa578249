import json

import numpy as np
import pytest

from msvq import bitstream, quantizer, rate
from msvq.errors import CorruptionError


@pytest.fixture(scope="module")
def table(model, corr_data):
    return rate.build_table(model, corr_data)


@pytest.fixture(scope="module")
def ec_table(ec_model, corr_data):
    return rate.build_table(ec_model, corr_data)


class TestFeatureFiles:
    def test_round_trip(self, tmp_path, corr_data):
        path = str(tmp_path / "x.fmat")
        bitstream.write_features(path, corr_data)
        back = bitstream.read_features(path)
        assert np.array_equal(back, corr_data.astype(np.float32))

    def test_header_layout(self, tmp_path):
        path = str(tmp_path / "x.fmat")
        bitstream.write_features(path, np.zeros((2, 3), dtype=np.float32))
        blob = open(path, "rb").read()
        assert blob[:4] == b"FMAT"
        assert int.from_bytes(blob[4:8], "little") == 1
        assert int.from_bytes(blob[8:12], "little") == 2
        assert int.from_bytes(blob[12:16], "little") == 3
        assert len(blob) == 16 + 2 * 3 * 4

    def test_rejects_bad_magic_and_truncation(self, tmp_path):
        path = str(tmp_path / "x.fmat")
        bitstream.write_features(path, np.zeros((2, 3), dtype=np.float32))
        blob = bytearray(open(path, "rb").read())
        (tmp_path / "bad1.fmat").write_bytes(b"XMAT" + bytes(blob[4:]))
        with pytest.raises(CorruptionError):
            bitstream.read_features(str(tmp_path / "bad1.fmat"))
        (tmp_path / "bad2.fmat").write_bytes(bytes(blob[:-3]))
        with pytest.raises(CorruptionError):
            bitstream.read_features(str(tmp_path / "bad2.fmat"))


class TestModelFiles:
    @pytest.mark.parametrize("which", ["plain", "ec"])
    def test_round_trip_and_reserialization(self, tmp_path, model, ec_model, which):
        m = model if which == "plain" else ec_model
        path = str(tmp_path / "m.msvq")
        bitstream.write_model(path, m, table_digest=0xDEADBEEF)
        back, info = bitstream.read_model(path)
        assert info.table_digest == 0xDEADBEEF
        assert bitstream.model_to_bytes(back, 0xDEADBEEF) == \
            bitstream.model_to_bytes(m, 0xDEADBEEF)
        assert back.ec_enabled == m.ec_enabled
        assert np.array_equal(back.layout.perm, m.layout.perm)

    def test_stamp_rewrites_only_digest(self, tmp_path, model):
        path = str(tmp_path / "m.msvq")
        bitstream.write_model(path, model)
        before = open(path, "rb").read()
        bitstream.stamp_table_digest(path, 0x1234)
        after = open(path, "rb").read()
        assert len(before) == len(after)
        _, info = bitstream.read_model(path)
        assert info.table_digest == 0x1234
        assert before[:28] == after[:28]
        assert before[36:] == after[36:]

    def test_rejects_unknown_version(self, tmp_path, model):
        path = str(tmp_path / "m.msvq")
        bitstream.write_model(path, model)
        blob = bytearray(open(path, "rb").read())
        blob[4] = 99
        (tmp_path / "v.msvq").write_bytes(bytes(blob))
        with pytest.raises(CorruptionError):
            bitstream.read_model(str(tmp_path / "v.msvq"))

    def test_rejects_truncated_and_trailing(self, tmp_path, model):
        path = str(tmp_path / "m.msvq")
        bitstream.write_model(path, model)
        blob = open(path, "rb").read()
        (tmp_path / "t1.msvq").write_bytes(blob[:-5])
        with pytest.raises(CorruptionError):
            bitstream.read_model(str(tmp_path / "t1.msvq"))
        (tmp_path / "t2.msvq").write_bytes(blob + b"\x00\x00")
        with pytest.raises(CorruptionError):
            bitstream.read_model(str(tmp_path / "t2.msvq"))


class TestTableFiles:
    def test_round_trip_and_format_marker(self, tmp_path, table):
        path = str(tmp_path / "t.json")
        bitstream.write_table(path, table)
        doc = json.load(open(path))
        assert doc["format"] == "MLT1"
        assert set(doc) >= {"n", "t_max", "mode", "loss", "step_bits"}
        back = bitstream.read_table(path)
        assert np.array_equal(back.loss, table.loss)
        assert np.array_equal(back.step_bits, table.step_bits)

    def test_rejects_non_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("not json at all")
        with pytest.raises(CorruptionError):
            bitstream.read_table(str(path))


class TestPayloadFiles:
    def test_zero_budget_payload_is_header_only(self, tmp_path, model, table, corr_data):
        path = str(tmp_path / "p.msvp")
        info = bitstream.write_payload(path, model, 7, table, corr_data[:10], b_cap=0)
        assert info.plan.stages.tolist() == [0, 0, 0, 0]
        assert len(open(path, "rb").read()) == bitstream.PAYLOAD_HEADER_SIZE
        z_hat, back = bitstream.read_payload(path, model, 7, table)
        assert back.count == 10
        assert np.array_equal(z_hat, quantizer.encode_batch(
            model, corr_data[:10], quantizer.zero_plan(model.layout))[1])

    def test_end_to_end_bit_exact(self, tmp_path, model, table, corr_data):
        path = str(tmp_path / "p.msvp")
        data = corr_data[:200]
        info = bitstream.write_payload(path, model, 7, table, data, b_cap=40)
        z_hat_rx, rx = bitstream.read_payload(path, model, 7, table)
        _, z_hat_tx = quantizer.encode_batch(model, data, rx.plan)
        assert np.array_equal(z_hat_rx, z_hat_tx)
        assert np.array_equal(rx.plan.stages, info.plan.stages)

    def test_exact_bits_accounting_and_padding(self, tmp_path, model, table, corr_data):
        path = str(tmp_path / "p.msvp")
        data = corr_data[:50]
        info = bitstream.write_payload(path, model, 7, table, data, b_cap=37)
        assert np.all(info.bits_per_vector == info.plan.exact_bits)
        per_vector = (info.plan.exact_bits + 7) // 8
        expected = bitstream.PAYLOAD_HEADER_SIZE + 50 * per_vector
        assert len(open(path, "rb").read()) == expected

    def test_model_digest_mismatch(self, tmp_path, model, table, corr_data):
        path = str(tmp_path / "p.msvp")
        bitstream.write_payload(path, model, 7, table, corr_data[:5], b_cap=20)
        with pytest.raises(CorruptionError):
            bitstream.read_payload(path, model, 8, table)

    def test_header_mutations_never_decode_silently(self, tmp_path, model, table,
                                                    corr_data):
        path = str(tmp_path / "p.msvp")
        bitstream.write_payload(path, model, 7, table, corr_data[:5], b_cap=20)
        blob = bytearray(open(path, "rb").read())
        for pos in range(bitstream.PAYLOAD_HEADER_SIZE):
            tampered = bytearray(blob)
            tampered[pos] ^= 0xFF
            bad = tmp_path / f"bad{pos}.msvp"
            bad.write_bytes(bytes(tampered))
            with pytest.raises(CorruptionError):
                bitstream.read_payload(str(bad), model, 7, table)

    def test_truncated_body_raises(self, tmp_path, model, table, corr_data):
        path = str(tmp_path / "p.msvp")
        bitstream.write_payload(path, model, 7, table, corr_data[:5], b_cap=30)
        blob = open(path, "rb").read()
        (tmp_path / "trunc.msvp").write_bytes(blob[:-1])
        with pytest.raises(CorruptionError):
            bitstream.read_payload(str(tmp_path / "trunc.msvp"), model, 7, table)

    def test_ec_payload_round_trip(self, tmp_path, ec_model, ec_table, corr_data):
        path = str(tmp_path / "p.msvp")
        data = corr_data[:100]
        info = bitstream.write_payload(path, ec_model, 3, ec_table, data, b_cap=40)
        z_hat_rx, rx = bitstream.read_payload(path, ec_model, 3, ec_table)
        _, z_hat_tx = quantizer.encode_batch(ec_model, data, rx.plan)
        assert np.array_equal(z_hat_rx, z_hat_tx)
        assert np.array_equal(info.bits_per_vector, rx.bits_per_vector)

    def test_ec_mean_bits_track_plan_average(self, tmp_path, ec_model, ec_table,
                                             corr_data):
        # over the table's own training set, realized mean bits sit within 2%
        path = str(tmp_path / "p.msvp")
        info = bitstream.write_payload(path, ec_model, 3, ec_table, corr_data, b_cap=40)
        assert info.plan.avg_bits is not None and info.plan.avg_bits > 0
        mean_bits = float(info.bits_per_vector.mean())
        assert abs(mean_bits - info.plan.avg_bits) <= 0.02 * info.plan.avg_bits

    def test_strict_mode_caps_every_vector(self, tmp_path, ec_model, ec_table, corr_data):
        data = corr_data[:200]
        loose = str(tmp_path / "loose.msvp")
        info = bitstream.write_payload(loose, ec_model, 3, ec_table, data, b_cap=40)
        assert info.bits_per_vector.max() > 40  # average-bit plans can overshoot
        strict = str(tmp_path / "strict.msvp")
        sinfo = bitstream.write_payload(strict, ec_model, 3, ec_table, data, b_cap=40,
                                        strict=True)
        assert sinfo.mode == bitstream.MODE_EXPLICIT
        assert sinfo.bits_per_vector.max() <= 40
        z_hat_rx, rx = bitstream.read_payload(strict, ec_model, 3, ec_table)
        assert np.array_equal(rx.plan.stages, sinfo.plan.stages)
        _, z_hat_tx = quantizer.encode_batch(ec_model, data, rx.plan)
        assert np.array_equal(z_hat_rx, z_hat_tx)
