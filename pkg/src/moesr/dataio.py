"""Binary artifact formats: datasets, checkpoints and PGM images.

Record layout (shared by datasets and checkpoints):
    u8 name_len | name bytes (utf-8) | u32 ndim | u32 dims... | f32 LE payload
A dataset file is the magic ``MDSR`` + u32 version followed by records; a
checkpoint uses magic ``MDCK``.  Integers are little-endian.  Payloads are
stored as float32, so float64 arrays are rounded at write time.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

DATA_MAGIC = b"MDSR"
CKPT_MAGIC = b"MDCK"
VERSION = 1


def write_record(f, name: str, arr: np.ndarray):
    nb = name.encode("utf-8")
    if len(nb) > 255:
        raise ValueError("record name too long")
    arr = np.asarray(arr)
    f.write(struct.pack("<B", len(nb)))
    f.write(nb)
    f.write(struct.pack("<I", arr.ndim))
    for d in arr.shape:
        f.write(struct.pack("<I", d))
    f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_record(f):
    head = f.read(1)
    if not head:
        return None
    (nlen,) = struct.unpack("<B", head)
    name = f.read(nlen).decode("utf-8")
    (ndim,) = struct.unpack("<I", f.read(4))
    shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim)) if ndim else ()
    count = int(np.prod(shape)) if shape else 1
    payload = f.read(4 * count)
    if len(payload) != 4 * count:
        raise ValueError(f"truncated record {name!r}")
    arr = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float64)
    return name, arr


def write_records(path: Path, magic: bytes, records: dict[str, np.ndarray]):
    path = Path(path)
    with open(path, "wb") as f:
        f.write(magic)
        f.write(struct.pack("<I", VERSION))
        for name, arr in records.items():
            write_record(f, name, arr)


def read_records(path: Path, magic: bytes) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        head = f.read(4)
        if head != magic:
            raise ValueError(
                f"{path}: bad magic {head!r}, expected {magic!r}")
        (ver,) = struct.unpack("<I", f.read(4))
        if ver != VERSION:
            raise ValueError(f"{path}: unsupported version {ver}")
        out = {}
        while True:
            rec = read_record(f)
            if rec is None:
                return out
            out[rec[0]] = rec[1]


# --------------------------------------------------------------------------
# dataset directory

def write_dataset(out_dir, spec_dict: dict, pairs: dict[int, dict[str, np.ndarray]],
                  splits: dict[str, list[int]]):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    for seed, arrays in pairs.items():
        fname = f"pair_{seed}.bin"
        write_records(out / fname, DATA_MAGIC, arrays)
        files[str(seed)] = fname
    manifest = {
        "version": VERSION,
        "spec": spec_dict,
        "splits": {k: [int(s) for s in v] for k, v in splits.items()},
        "files": files,
    }
    (out / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def read_manifest(data_dir) -> dict:
    return json.loads((Path(data_dir) / "manifest.json").read_text(encoding="utf-8"))


def load_split(data_dir, split: str):
    """Return (seeds, list of record dicts) for one split."""
    man = read_manifest(data_dir)
    seeds = man["splits"][split]
    out = []
    for s in seeds:
        path = Path(data_dir) / man["files"][str(s)]
        out.append(read_records(path, DATA_MAGIC))
    return seeds, out


# --------------------------------------------------------------------------
# images

def write_pgm(path, img: np.ndarray):
    """8-bit binary PGM (P5, maxval 255) from a [0,1] float image."""
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError("PGM writer expects a 2-D image")
    q = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        f.write(q.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    maxv = int(parts[2])
    img = np.frombuffer(parts[3][: w * h], dtype=np.uint8).reshape(h, w)
    return img.astype(np.float64) / maxv
