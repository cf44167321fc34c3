import io
import random
import struct

import pytest
from hypothesis import given, settings, strategies as st

from canopy.records import (
    CorruptRecordError,
    ExamplePayload,
    RecordFormatError,
    SplitPlan,
    crc32c,
    decode_example,
    encode_example,
    iter_records,
    mask_crc,
    masked_crc32c,
    read_record,
    read_record_file,
    read_shards,
    round_half_away,
    shard_name,
    split_train_eval,
    unmask_crc,
    write_record,
    write_shards,
)

from oracles import crc32c_bitwise


class TestCrc:
    def test_check_value(self):
        assert crc32c(b"123456789") == 0xE3069283
        assert crc32c_bitwise(b"123456789") == 0xE3069283

    def test_empty(self):
        assert crc32c(b"") == 0
        assert masked_crc32c(b"") == 0xA282EAD8

    @settings(max_examples=200)
    @given(st.binary(max_size=300))
    def test_matches_bitwise_oracle(self, data):
        assert crc32c(data) == crc32c_bitwise(data)

    def test_incremental(self):
        assert crc32c(b"6789", crc32c(b"12345")) == crc32c(b"123456789")

    def test_mask_roundtrip(self):
        rng = random.Random(7)
        for _ in range(100_000):
            c = rng.getrandbits(32)
            assert unmask_crc(mask_crc(c)) == c
        assert unmask_crc(mask_crc(0xFFFFFFFF)) == 0xFFFFFFFF


class TestFraming:
    def test_empty_payload_is_16_bytes(self):
        buf = io.BytesIO()
        assert write_record(buf, b"") == 16
        assert len(buf.getvalue()) == 16

    def test_layout(self):
        buf = io.BytesIO()
        assert write_record(buf, b"x" * 100) == 116
        raw = buf.getvalue()
        assert struct.unpack("<Q", raw[:8]) == (100,)
        assert struct.unpack("<I", raw[8:12]) == (masked_crc32c(raw[:8]),)
        assert raw[12:112] == b"x" * 100
        assert struct.unpack("<I", raw[112:]) == (masked_crc32c(b"x" * 100),)

    def test_sequence_roundtrip(self):
        payloads = [b"", b"a", bytes(range(256)), b"\x00" * 1000]
        buf = io.BytesIO()
        for p in payloads:
            write_record(buf, p)
        buf.seek(0)
        assert list(iter_records(buf)) == payloads

    def test_clean_eof(self):
        assert read_record(io.BytesIO(b"")) is None

    def test_payload_flip_detected(self):
        buf = io.BytesIO()
        write_record(buf, b"hello world")
        raw = bytearray(buf.getvalue())
        raw[14] ^= 0x01
        with pytest.raises(CorruptRecordError, match="payload crc"):
            read_record(io.BytesIO(bytes(raw)))

    def test_length_flip_detected(self):
        buf = io.BytesIO()
        write_record(buf, b"hello")
        raw = bytearray(buf.getvalue())
        raw[0] ^= 0x80
        with pytest.raises(CorruptRecordError, match="length crc"):
            read_record(io.BytesIO(bytes(raw)))

    @pytest.mark.parametrize("cut", [3, 10, 14, 18])
    def test_truncation(self, cut):
        buf = io.BytesIO()
        write_record(buf, b"abcdefgh")
        with pytest.raises(CorruptRecordError, match="truncated"):
            read_record(io.BytesIO(buf.getvalue()[:cut]))

    def test_offset_reported(self):
        buf = io.BytesIO()
        write_record(buf, b"first")
        write_record(buf, b"second")
        raw = bytearray(buf.getvalue())
        raw[21 + 12] ^= 0x04
        with pytest.raises(CorruptRecordError) as err:
            list(iter_records(io.BytesIO(bytes(raw))))
        assert err.value.offset == 21


def sample(**kw):
    base = dict(file_name="img1.jpg", width=640, height=480, image_bytes=b"\x89PNG fake",
                boxes=((1, 10.0, 20.0, 110.0, 220.0),), labels=("red_rust",))
    base.update(kw)
    return ExamplePayload(**base)


class TestPayload:
    def test_roundtrip(self):
        p = sample()
        assert decode_example(encode_example(p)) == p

    def test_empty_boxes(self):
        p = sample(boxes=(), labels=())
        assert decode_example(encode_example(p)) == p

    def test_unicode_labels(self):
        p = sample(file_name="feuille_é.jpg", labels=("rouille_rouge",))
        assert decode_example(encode_example(p)) == p

    def test_length_mismatch(self):
        with pytest.raises(RecordFormatError, match="length mismatch"):
            encode_example(sample(labels=()))

    def test_box_outside_image(self):
        with pytest.raises(RecordFormatError, match="boxes\\[0\\]"):
            encode_example(sample(boxes=((1, 10.0, 20.0, 700.0, 220.0),)))

    def test_trailing_bytes(self):
        with pytest.raises(RecordFormatError, match="trailing"):
            decode_example(encode_example(sample()) + b"\x00")

    def test_truncated_names_field(self):
        data = encode_example(sample())
        with pytest.raises(RecordFormatError, match="labels"):
            decode_example(data[:-3])

    def test_bad_magic(self):
        with pytest.raises(RecordFormatError, match="magic"):
            decode_example(b"XXXX" + encode_example(sample())[4:])


def random_payload(rng, k):
    w, h = rng.randint(1, 4000), rng.randint(1, 4000)
    boxes, labels = [], []
    for _ in range(rng.randint(0, 6)):
        x0, y0 = rng.uniform(0, w * 0.9), rng.uniform(0, h * 0.9)
        x1 = min(float(w), x0 + rng.uniform(0.05, 1.0) * (w - x0))
        y1 = min(float(h), y0 + rng.uniform(0.05, 1.0) * (h - y0))
        boxes.append((rng.randint(1, 3), x0, y0, x1, y1))
        labels.append(rng.choice(["red_rust", "helopeltis", "red_spider_mite"]))
    return ExamplePayload(f"img{k:05d}.jpg", w, h, rng.randbytes(rng.randint(0, 64)),
                          tuple(boxes), tuple(labels))


class TestShards:
    def test_name(self):
        assert shard_name("train", 0, 3) == "train-00000-of-00003"

    def test_round_robin_counts(self, tmp_path):
        rng = random.Random(0)
        examples = [random_payload(rng, k) for k in range(10)]
        shards = write_shards(examples, tmp_path, "train", 3)
        assert [s.record_count for s in shards] == [4, 3, 3]
        assert [len(read_record_file(s.path)) for s in shards] == [4, 3, 3]
        assert read_shards([s.path for s in shards]) == examples

    def test_zero_examples(self, tmp_path):
        shards = write_shards([], tmp_path, "eval", 2)
        assert [s.record_count for s in shards] == [0, 0]
        assert all(read_record_file(s.path) == [] for s in shards)

    def test_workers_do_not_change_bytes(self, tmp_path):
        rng = random.Random(1)
        examples = [random_payload(rng, k) for k in range(40)]
        a = write_shards(examples, tmp_path / "a", "train", 4, workers=1)
        b = write_shards(examples, tmp_path / "b", "train", 4, workers=8)
        for sa, sb in zip(a, b):
            assert open(sa.path, "rb").read() == open(sb.path, "rb").read()

    def test_rejects_zero_shards(self, tmp_path):
        with pytest.raises(ValueError):
            write_shards([], tmp_path, "x", 0)


class TestSplit:
    def test_1500_ids(self):
        plan = split_train_eval(list(range(1, 1501)), 0.1, 42)
        assert (len(plan.train), len(plan.eval)) == (1350, 150)

    def test_disjoint_cover(self):
        ids = list(range(1, 101))
        plan = split_train_eval(ids, 0.25, 3)
        assert not set(plan.train) & set(plan.eval)
        assert sorted(plan.train + plan.eval) == ids
        assert list(plan.train) == sorted(plan.train)

    def test_deterministic(self):
        ids = list(range(1, 501))
        assert split_train_eval(ids, 0.1, 5) == split_train_eval(list(reversed(ids)), 0.1, 5)

    def test_seed_matters(self):
        ids = list(range(1, 501))
        assert split_train_eval(ids, 0.1, 1).eval != split_train_eval(ids, 0.1, 2).eval

    @pytest.mark.parametrize("n, frac, n_eval", [(5, 0.1, 1), (15, 0.1, 2), (25, 0.1, 3), (4, 0.5, 2)])
    def test_rounding(self, n, frac, n_eval):
        assert len(split_train_eval(list(range(n)), frac, 0).eval) == n_eval

    def test_round_half_away(self):
        assert [round_half_away(x) for x in (0.5, 1.5, 2.5, -0.5, 2.4)] == [1, 2, 3, -1, 2]

    @pytest.mark.parametrize("frac", [0.0, 1.0, -0.1])
    def test_bad_fraction(self, frac):
        with pytest.raises(ValueError):
            split_train_eval([1, 2, 3], frac, 0)

    def test_dict_roundtrip(self):
        plan = split_train_eval(list(range(20)), 0.2, 9)
        assert SplitPlan.from_dict(plan.to_dict()) == plan
