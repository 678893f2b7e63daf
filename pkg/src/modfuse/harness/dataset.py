"""Self-describing binary dataset container.

Layout (all integers and floats little-endian):

    magic    8 bytes  b"MODFUSE1"
    version  u32      currently 1
    hdr_len  u32      byte length of the YAML header text
    header   utf-8    task metadata as YAML
    records  repeated until EOF:
        rec_len  u64  byte length of the record payload
        payload:
            u32 scenario, u32 task, u64 seed, u64 index
            u32 input_dim, u32 num_vectors, u32 num_truth, u32 mobile
            f64*5 normalization bounds (x_min, x_max, y_min, y_max, dt)
            per vector: u32 t, u32 j, u32 s, f64*input_dim raw values
            f64*(4*num_truth) truth states at the final step

Vector values are stored in world coordinates; normalization is applied
at load time from the stored bounds.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

MAGIC = b"MODFUSE1"
VERSION = 1


class DatasetFormatError(ValueError):
    pass


@dataclass
class DatasetRecord:
    scenario: int
    task: int
    seed: int
    index: int
    mobile: bool
    bounds: np.ndarray        # (5,) x_min, x_max, y_min, y_max, dt
    values: np.ndarray        # (l, input_dim) raw world coordinates
    times: np.ndarray         # (l,)
    steps: np.ndarray         # (l,)
    sensors: np.ndarray       # (l,)
    truth: np.ndarray         # (n, 4)

    @property
    def input_dim(self) -> int:
        return self.values.shape[1] if self.values.size else \
            (18 if self.mobile else 15)


def _encode_record(rec: DatasetRecord) -> bytes:
    buf = io.BytesIO()
    l = len(rec.times)
    dim = rec.values.shape[1] if rec.values.size else rec.input_dim
    buf.write(struct.pack("<IIQQ", rec.scenario, rec.task, rec.seed,
                          rec.index))
    buf.write(struct.pack("<IIII", dim, l, len(rec.truth),
                          1 if rec.mobile else 0))
    buf.write(np.asarray(rec.bounds, dtype="<f8").tobytes())
    for i in range(l):
        buf.write(struct.pack("<III", int(rec.times[i]), int(rec.steps[i]),
                              int(rec.sensors[i])))
        buf.write(np.asarray(rec.values[i], dtype="<f8").tobytes())
    buf.write(np.asarray(rec.truth, dtype="<f8").tobytes())
    return buf.getvalue()


def _decode_record(payload: bytes) -> DatasetRecord:
    off = 0
    scenario, task, seed, index = struct.unpack_from("<IIQQ", payload, off)
    off += struct.calcsize("<IIQQ")
    dim, l, n_truth, mobile = struct.unpack_from("<IIII", payload, off)
    off += 16
    bounds = np.frombuffer(payload, dtype="<f8", count=5, offset=off).copy()
    off += 40
    values = np.zeros((l, dim))
    times = np.zeros(l, dtype=np.int64)
    steps = np.zeros(l, dtype=np.int64)
    sensors = np.zeros(l, dtype=np.int64)
    for i in range(l):
        t, j, s = struct.unpack_from("<III", payload, off)
        off += 12
        times[i], steps[i], sensors[i] = t, j, s
        values[i] = np.frombuffer(payload, dtype="<f8", count=dim,
                                  offset=off)
        off += 8 * dim
    truth = np.frombuffer(payload, dtype="<f8", count=4 * n_truth,
                          offset=off).copy().reshape(n_truth, 4)
    return DatasetRecord(scenario, task, seed, index, bool(mobile), bounds,
                         values, times, steps, sensors, truth)


def write_header(fh, header: dict):
    text = yaml.safe_dump(header, sort_keys=True).encode("utf-8")
    fh.write(MAGIC)
    fh.write(struct.pack("<I", VERSION))
    fh.write(struct.pack("<I", len(text)))
    fh.write(text)


def append_record(fh, rec: DatasetRecord):
    payload = _encode_record(rec)
    fh.write(struct.pack("<Q", len(payload)))
    fh.write(payload)


def write_dataset(path: str | Path, header: dict,
                  records: list[DatasetRecord]):
    with open(path, "wb") as fh:
        write_header(fh, header)
        for rec in records:
            append_record(fh, rec)


def read_header(fh) -> dict:
    magic = fh.read(8)
    if magic != MAGIC:
        raise DatasetFormatError(f"not a dataset file (magic {magic!r})")
    (version,) = struct.unpack("<I", fh.read(4))
    if version != VERSION:
        raise DatasetFormatError(f"unsupported dataset version {version}")
    (hdr_len,) = struct.unpack("<I", fh.read(4))
    return yaml.safe_load(fh.read(hdr_len).decode("utf-8"))


def read_dataset(path: str | Path
                 ) -> tuple[dict, list[DatasetRecord]]:
    with open(path, "rb") as fh:
        header = read_header(fh)
        records = []
        while True:
            head = fh.read(8)
            if not head:
                break
            if len(head) != 8:
                raise DatasetFormatError("truncated record length")
            (rec_len,) = struct.unpack("<Q", head)
            payload = fh.read(rec_len)
            if len(payload) != rec_len:
                raise DatasetFormatError("truncated record payload")
            records.append(_decode_record(payload))
    return header, records


def count_records(path: str | Path) -> int:
    """Number of complete records already in a dataset file."""
    with open(path, "rb") as fh:
        read_header(fh)
        count = 0
        while True:
            head = fh.read(8)
            if len(head) != 8:
                break
            (rec_len,) = struct.unpack("<Q", head)
            payload = fh.read(rec_len)
            if len(payload) != rec_len:
                break
            count += 1
    return count
