"""On-disk formats: BMV1 video tensors, TSV manifests, MMSL array containers, PGM images."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import DataError
from .mmode import BModeVideo

BMV_MAGIC = b"BMV1"
_BMV_HEADER = struct.Struct("<4sIIIfII")

MMSL_MAGIC = b"MMSL"
MMSL_VERSION = 1
# dtype code -> little-endian numpy dtype; weights always use code 0
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4"), 2: np.dtype("<i8")}
_CODES = {v: k for k, v in _DTYPES.items()}


# ---------------------------------------------------------------- BMV1 videos


def write_bmv(path, video: BModeVideo) -> None:
    t, h, w = video.frames.shape
    lo, hi = video.pleural_bounds
    with open(path, "wb") as fh:
        fh.write(_BMV_HEADER.pack(BMV_MAGIC, t, h, w, float(video.fps), lo, hi))
        fh.write(np.ascontiguousarray(video.frames, dtype="<f4").tobytes())


def read_bmv(path, video_id: str = "", label: int = -1) -> BModeVideo:
    raw = Path(path).read_bytes()
    if len(raw) < _BMV_HEADER.size:
        raise DataError(f"{path}: truncated BMV1 header")
    magic, t, h, w, fps, lo, hi = _BMV_HEADER.unpack_from(raw)
    if magic != BMV_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    count = t * h * w
    body = raw[_BMV_HEADER.size :]
    if len(body) != 4 * count:
        raise DataError(f"{path}: expected {count} pixels, found {len(body) // 4}")
    frames = np.frombuffer(body, dtype="<f4").reshape(t, h, w).astype(np.float64)
    return BModeVideo(frames, fps, (lo, hi), video_id or Path(path).stem, label)


# ---------------------------------------------------------------- manifests


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    video_id: str
    label: int


def read_manifest(path) -> list[ManifestEntry]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest {path} does not exist")
    entries = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise DataError(f"{path}:{lineno}: expected 3 tab-separated fields")
        file_path, video_id, label = parts
        try:
            label = int(label)
        except ValueError:
            raise DataError(f"{path}:{lineno}: label {label!r} is not an integer") from None
        if label not in (-1, 0, 1):
            raise DataError(f"{path}:{lineno}: label must be 0, 1 or -1")
        if not Path(file_path).is_absolute():
            file_path = str(path.parent / file_path)
        entries.append(ManifestEntry(file_path, video_id, label))
    return entries


def write_manifest(path, entries: Iterable[ManifestEntry], relative_to=None) -> None:
    base = Path(relative_to) if relative_to is not None else Path(path).parent
    lines = []
    for e in entries:
        p = Path(e.path)
        try:
            p = p.relative_to(base)
        except ValueError:
            pass
        lines.append(f"{p.as_posix()}\t{e.video_id}\t{e.label}\n")
    Path(path).write_text("".join(lines))


def load_videos(entries: Iterable[ManifestEntry]) -> list[BModeVideo]:
    return [read_bmv(e.path, e.video_id, e.label) for e in entries]


# ---------------------------------------------------------------- MMSL arrays


def write_arrays(path, arrays: Mapping[str, np.ndarray]) -> None:
    chunks = [MMSL_MAGIC, struct.pack("<II", MMSL_VERSION, len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dtype = arr.dtype.newbyteorder("<")
        if dtype not in _CODES:
            raise TypeError(f"array {name!r}: unsupported dtype {arr.dtype}")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<BB", _CODES[dtype], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=dtype).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_arrays(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != MMSL_MAGIC:
        raise DataError(f"{path}: not an MMSL file")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != MMSL_VERSION:
        raise DataError(f"{path}: unsupported MMSL version {version}")
    pos = 12
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos : pos + name_len].decode("utf-8")
            pos += name_len
            code, ndim = struct.unpack_from("<BB", raw, pos)
            pos += 2
            dims = struct.unpack_from(f"<{ndim}I", raw, pos)
            pos += 4 * ndim
            dtype = _DTYPES[code]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
            if pos + nbytes > len(raw):
                raise DataError(f"{path}: array {name!r} is truncated")
            out[name] = np.frombuffer(raw, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos).reshape(dims).copy()
            pos += nbytes
    except (struct.error, KeyError) as exc:
        raise DataError(f"{path}: corrupt MMSL file ({exc})") from None
    return out


# ---------------------------------------------------------------- images and tables


def write_pgm(path, image: np.ndarray, max_value: float = 255.0) -> None:
    """Binary (P5) 8-bit PGM; ``image`` is scaled from [0, max_value]."""
    img = np.clip(np.rint(np.asarray(image, dtype=np.float64) * (255.0 / max_value)), 0, 255).astype(np.uint8)
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def read_pgm(path) -> np.ndarray:
    """Reads the P5 layout written by :func:`write_pgm`."""
    raw = Path(path).read_bytes()
    magic, dims, maxval, body = raw.split(b"\n", 3)
    if magic != b"P5" or maxval != b"255":
        raise DataError(f"{path}: not an 8-bit binary PGM")
    w, h = (int(v) for v in dims.split())
    return np.frombuffer(body[: w * h], dtype=np.uint8).reshape(h, w)


def write_csv(path, header: list[str], rows: Iterable[Iterable]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def read_csv(path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)
