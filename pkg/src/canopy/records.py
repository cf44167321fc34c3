"""Sharded, checksummed record files.

Framing of a single record (all little-endian)::

    uint64    length
    uint32    masked crc32c of the 8 length bytes
    byte      data[length]
    uint32    masked crc32c of data

This is the framing used by TFRecord files, so shards written here can be
consumed by existing training tooling that reads raw records.

Example payload encoding (version 1, little-endian)::

    4 bytes   magic b"CNPX"
    uint16    version (1)
    uint32    len(file_name) + UTF-8 file_name
    uint32    width
    uint32    height
    uint64    len(image_bytes) + image_bytes
    uint32    box count
    per box:  int64 category_id, float64 xmin, ymin, xmax, ymax,
              uint32 len(label) + UTF-8 label
"""

from __future__ import annotations

import io
import math
import random
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Iterator, List, Optional, Sequence, Tuple

from ._io import atomic_write_bytes

_CRC32C_POLY = 0x82F63B78  # reflected Castagnoli polynomial
_MASK_DELTA = 0xA282EAD8


def _make_table():
    table = []
    for n in range(256):
        c = n
        for _ in range(8):
            c = (c >> 1) ^ _CRC32C_POLY if c & 1 else c >> 1
        table.append(c)
    return tuple(table)


_TABLE = _make_table()


def crc32c(data: bytes, crc: int = 0) -> int:
    crc ^= 0xFFFFFFFF
    table = _TABLE
    for byte in data:
        crc = table[(crc ^ byte) & 0xFF] ^ (crc >> 8)
    return crc ^ 0xFFFFFFFF


def mask_crc(crc: int) -> int:
    return (((crc >> 15) | (crc << 17)) + _MASK_DELTA) & 0xFFFFFFFF


def unmask_crc(masked: int) -> int:
    rot = (masked - _MASK_DELTA) & 0xFFFFFFFF
    return ((rot >> 17) | (rot << 15)) & 0xFFFFFFFF


def masked_crc32c(data: bytes) -> int:
    return mask_crc(crc32c(data))


class RecordError(Exception):
    pass


class CorruptRecordError(RecordError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at byte offset {offset}")
        self.offset = offset


class RecordFormatError(RecordError, ValueError):
    """An example payload could not be encoded or decoded."""


def _tell(stream) -> int:
    try:
        return stream.tell()
    except (OSError, AttributeError, ValueError):
        return -1


def write_record(stream: BinaryIO, payload: bytes) -> int:
    """Write one framed record; returns the number of bytes written."""
    header = struct.pack("<Q", len(payload))
    frame = b"".join((
        header,
        struct.pack("<I", masked_crc32c(header)),
        payload,
        struct.pack("<I", masked_crc32c(payload)),
    ))
    offset = _tell(stream)
    try:
        stream.write(frame)
    except OSError as exc:
        raise OSError(exc.errno, f"record write failed at byte offset {offset}: {exc}") from exc
    return len(frame)


def _read_exact(stream, n: int, offset: int, what: str) -> bytes:
    data = stream.read(n)
    if len(data) != n:
        raise CorruptRecordError(f"truncated record ({what})", offset)
    return data


def read_record(stream: BinaryIO, offset: Optional[int] = None) -> Optional[bytes]:
    """Read and verify one record; None at a clean end of stream."""
    if offset is None:
        offset = _tell(stream)
    header = stream.read(8)
    if not header:
        return None
    if len(header) != 8:
        raise CorruptRecordError("truncated record (length)", offset)
    (length_crc,) = struct.unpack("<I", _read_exact(stream, 4, offset, "length crc"))
    if masked_crc32c(header) != length_crc:
        raise CorruptRecordError("length crc mismatch", offset)
    (length,) = struct.unpack("<Q", header)
    payload = _read_exact(stream, length, offset, "payload")
    (data_crc,) = struct.unpack("<I", _read_exact(stream, 4, offset, "payload crc"))
    if masked_crc32c(payload) != data_crc:
        raise CorruptRecordError("payload crc mismatch", offset)
    return payload


def iter_records(stream: BinaryIO) -> Iterator[bytes]:
    offset = _tell(stream)
    if offset < 0:
        offset = 0
    while True:
        payload = read_record(stream, offset)
        if payload is None:
            return
        offset += 16 + len(payload)
        yield payload


def read_record_file(path) -> List[bytes]:
    with open(path, "rb") as fh:
        return list(iter_records(fh))


@dataclass(frozen=True)
class ExamplePayload:
    file_name: str
    width: int
    height: int
    image_bytes: bytes = b""
    boxes: Tuple[Tuple[int, float, float, float, float], ...] = ()
    labels: Tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "boxes", tuple(tuple(b) for b in self.boxes))
        object.__setattr__(self, "labels", tuple(self.labels))


_MAGIC = b"CNPX"
_VERSION = 1


def _check_payload(p: ExamplePayload):
    if len(p.boxes) != len(p.labels):
        raise RecordFormatError(
            f"boxes/labels length mismatch: {len(p.boxes)} boxes, {len(p.labels)} labels"
        )
    if not (0 < p.width < 2**32 and 0 < p.height < 2**32):
        raise RecordFormatError(f"width/height out of range: {p.width}x{p.height}")
    for k, box in enumerate(p.boxes):
        if len(box) != 5:
            raise RecordFormatError(f"boxes[{k}]: expected (category_id, xmin, ymin, xmax, ymax)")
        cid, x0, y0, x1, y1 = box
        if not isinstance(cid, int) or cid < 1:
            raise RecordFormatError(f"boxes[{k}]: category_id must be an integer >= 1")
        if not all(math.isfinite(v) for v in (x0, y0, x1, y1)):
            raise RecordFormatError(f"boxes[{k}]: non-finite coordinate")
        if not (0 <= x0 < x1 <= p.width and 0 <= y0 < y1 <= p.height):
            raise RecordFormatError(f"boxes[{k}]: box {box[1:]} invalid for {p.width}x{p.height}")


def encode_example(p: ExamplePayload) -> bytes:
    _check_payload(p)
    out = io.BytesIO()
    name = p.file_name.encode("utf-8")
    out.write(_MAGIC)
    out.write(struct.pack("<H", _VERSION))
    out.write(struct.pack("<I", len(name)) + name)
    out.write(struct.pack("<II", p.width, p.height))
    out.write(struct.pack("<Q", len(p.image_bytes)) + bytes(p.image_bytes))
    out.write(struct.pack("<I", len(p.boxes)))
    for (cid, x0, y0, x1, y1), label in zip(p.boxes, p.labels):
        text = label.encode("utf-8")
        out.write(struct.pack("<qdddd", cid, x0, y0, x1, y1))
        out.write(struct.pack("<I", len(text)) + text)
    return out.getvalue()


class _Cursor:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, field: str) -> bytes:
        if self.pos + n > len(self.data):
            raise RecordFormatError(f"payload truncated in field {field!r}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, field: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), field))

    def text(self, field: str) -> str:
        (n,) = self.unpack("<I", field + " length")
        try:
            return self.take(n, field).decode("utf-8")
        except UnicodeDecodeError:
            raise RecordFormatError(f"field {field!r} is not valid UTF-8") from None


def decode_example(data: bytes) -> ExamplePayload:
    cur = _Cursor(bytes(data))
    if cur.take(4, "magic") != _MAGIC:
        raise RecordFormatError("field 'magic': not an example payload")
    (version,) = cur.unpack("<H", "version")
    if version != _VERSION:
        raise RecordFormatError(f"field 'version': unsupported version {version}")
    file_name = cur.text("file_name")
    width, height = cur.unpack("<II", "width/height")
    (n_image,) = cur.unpack("<Q", "image_bytes length")
    image_bytes = cur.take(n_image, "image_bytes")
    (n_boxes,) = cur.unpack("<I", "box count")
    boxes, labels = [], []
    for k in range(n_boxes):
        boxes.append(cur.unpack("<qdddd", f"boxes[{k}]"))
        labels.append(cur.text(f"labels[{k}]"))
    if cur.pos != len(cur.data):
        raise RecordFormatError(f"{len(cur.data) - cur.pos} trailing bytes after field 'labels'")
    p = ExamplePayload(file_name, width, height, image_bytes, tuple(boxes), tuple(labels))
    _check_payload(p)
    return p


@dataclass(frozen=True)
class RecordShard:
    path: str
    record_count: int


def shard_name(base: str, index: int, count: int) -> str:
    return f"{base}-{index:05d}-of-{count:05d}"


def write_shards(
    examples: Sequence[ExamplePayload],
    directory,
    base: str,
    num_shards: int,
    workers: int = 1,
) -> List[RecordShard]:
    """Distribute examples round-robin over ``num_shards`` files.

    Example ``i`` goes to shard ``i % num_shards``.  Each file is written
    atomically; the byte content does not depend on ``workers``.
    """
    if num_shards < 1:
        raise ValueError("num_shards must be >= 1")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    encoded = [encode_example(e) for e in examples]

    def write_one(s: int) -> RecordShard:
        buf = io.BytesIO()
        members = encoded[s::num_shards]
        for payload in members:
            write_record(buf, payload)
        path = directory / shard_name(base, s, num_shards)
        atomic_write_bytes(path, buf.getvalue())
        return RecordShard(str(path), len(members))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(write_one, range(num_shards)))
    return [write_one(s) for s in range(num_shards)]


def read_shards(paths: Sequence) -> List[ExamplePayload]:
    """Read shards given in shard order and restore the original example order."""
    per_shard = [[decode_example(r) for r in read_record_file(p)] for p in paths]
    total = sum(len(s) for s in per_shard)
    n = len(per_shard)
    out = []
    for i in range(total):
        shard = per_shard[i % n]
        if i // n >= len(shard):
            raise RecordError(f"shard {i % n} is missing example {i}")
        out.append(shard[i // n])
    return out


@dataclass(frozen=True)
class SplitPlan:
    train: Tuple[int, ...]
    eval: Tuple[int, ...]
    seed: int

    def to_dict(self) -> dict:
        return {"seed": self.seed, "train": list(self.train), "eval": list(self.eval)}

    @classmethod
    def from_dict(cls, data: dict) -> "SplitPlan":
        plan = cls(tuple(data["train"]), tuple(data["eval"]), int(data["seed"]))
        if set(plan.train) & set(plan.eval):
            raise ValueError("split plan train and eval overlap")
        return plan


def round_half_away(x: float) -> int:
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


def split_train_eval(image_ids: Sequence[int], eval_fraction: float, seed: int) -> SplitPlan:
    """Seeded shuffle; the first ``round(N * eval_fraction)`` ids go to eval.

    Both lists are returned sorted.
    """
    if not image_ids:
        raise ValueError("cannot split an empty id list")
    if not 0 < eval_fraction < 1:
        raise ValueError(f"eval_fraction must be in (0, 1), got {eval_fraction}")
    if len(set(image_ids)) != len(image_ids):
        raise ValueError("duplicate image ids")
    ids = sorted(image_ids)
    random.Random(seed).shuffle(ids)
    n_eval = round_half_away(len(ids) * eval_fraction)
    return SplitPlan(tuple(sorted(ids[n_eval:])), tuple(sorted(ids[:n_eval])), seed)
