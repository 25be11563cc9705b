"""On-disk formats: MIAT tensors, PGM masks, PPM frames, metrics CSV,
run configs and checkpoints."""
from __future__ import annotations

import csv
import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"MIAT"


class FormatError(ValueError):
    """A file that does not parse as the expected format."""


# --- MIAT ------------------------------------------------------------------------------

def encode_miat(a: np.ndarray) -> bytes:
    a = np.asarray(a)
    if a.ndim > 255:
        raise FormatError("too many dimensions")
    head = MAGIC + struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return head + np.ascontiguousarray(a, dtype="<f4").tobytes()


def decode_miat(buf: bytes) -> np.ndarray:
    if len(buf) < 5 or buf[:4] != MAGIC:
        raise FormatError("not a MIAT tensor")
    ndim = buf[4]
    end = 5 + 4 * ndim
    if len(buf) < end:
        raise FormatError("truncated MIAT header")
    dims = struct.unpack(f"<{ndim}I", buf[5:end])
    count = int(np.prod(dims, dtype=np.int64))
    if len(buf) != end + 4 * count:
        raise FormatError(f"MIAT payload holds {len(buf) - end} bytes, "
                          f"dims {dims} need {4 * count}")
    return np.frombuffer(buf, dtype="<f4", offset=end).reshape(dims).astype(np.float32)


def write_miat(path, a: np.ndarray) -> None:
    Path(path).write_bytes(encode_miat(a))


def read_miat(path) -> np.ndarray:
    return decode_miat(Path(path).read_bytes())


# --- PGM / PPM -------------------------------------------------------------------------

def _netpbm_header(buf: bytes, magic: bytes):
    if not buf.startswith(magic):
        raise FormatError(f"expected {magic.decode()} header")
    fields, pos = [], len(magic)
    while len(fields) < 3:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and buf[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError("malformed netpbm header")
        fields.append(int(buf[start:pos]))
    width, height, maxval = fields
    if maxval != 255:
        raise FormatError("only 8-bit netpbm files are supported")
    return width, height, pos + 1


def encode_pgm(mask: np.ndarray) -> bytes:
    """Binary P5 image of a 0/1 mask, stored as 0/255."""
    m = np.asarray(mask)
    if m.ndim != 2 or not np.isin(m, (0, 1)).all():
        raise FormatError("PGM masks must be 2-D arrays of 0/1")
    H, W = m.shape
    return f"P5\n{W} {H}\n255\n".encode() + (m.astype(np.uint8) * 255).tobytes()


def decode_pgm(buf: bytes) -> np.ndarray:
    W, H, off = _netpbm_header(buf, b"P5")
    data = np.frombuffer(buf, dtype=np.uint8, count=H * W, offset=off).reshape(H, W)
    if not np.isin(data, (0, 255)).all():
        raise FormatError("mask PGM must hold only 0 and 255")
    return (data // 255).astype(np.uint8)


def mask_filename(t: int, m: int, n: int) -> str:
    return f"mask_t{t}_m{m}_n{n}.pgm"


def encode_ppm(img: np.ndarray) -> bytes:
    """8-bit P6 image of an H x W x 3 array in [0, 1] (rounded, clipped)."""
    a = np.asarray(img)
    if a.ndim != 3 or a.shape[2] != 3:
        raise FormatError("PPM needs an H x W x 3 image")
    H, W, _ = a.shape
    q = np.clip(np.rint(a * 255.0), 0, 255).astype(np.uint8)
    return f"P6\n{W} {H}\n255\n".encode() + q.tobytes()


def decode_ppm(buf: bytes) -> np.ndarray:
    W, H, off = _netpbm_header(buf, b"P6")
    if len(buf) - off < H * W * 3:
        raise FormatError("truncated PPM")
    data = np.frombuffer(buf, dtype=np.uint8, count=H * W * 3, offset=off)
    return data.reshape(H, W, 3).astype(np.float32) / 255.0


def read_frame_dir(path) -> list[np.ndarray]:
    """Frames of a directory: lexicographically sorted ``.miat`` or ``.ppm`` files."""
    d = Path(path)
    if not d.is_dir():
        raise FormatError(f"{d} is not a directory")
    files = sorted(p for p in d.iterdir() if p.suffix.lower() in (".miat", ".ppm"))
    if not files:
        raise FormatError(f"no .miat or .ppm frames in {d}")
    frames = [read_miat(p) if p.suffix.lower() == ".miat" else decode_ppm(p.read_bytes())
              for p in files]
    if any(f.shape != frames[0].shape for f in frames) or frames[0].ndim != 3:
        raise FormatError("frames must share H x W x 3 dims")
    return frames


# --- CSV -------------------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def encode_csv(header: list[str], rows) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue().encode()


METRICS_HEADER = ["t", "psnr", "ssim", "flops", "mean_alpha"]


@dataclass(frozen=True)
class MetricsRow:
    t: int
    psnr: float
    ssim: float
    flops: int
    mean_alpha: float

    def __post_init__(self):
        if not -1.0 <= self.ssim <= 1.0:
            raise ValueError(f"ssim {self.ssim} outside [-1, 1]")
        if self.psnr < 0:
            raise ValueError("psnr must be non-negative")

    def as_list(self) -> list:
        return [self.t, self.psnr, self.ssim, self.flops, self.mean_alpha]


def metrics_csv(rows: list[MetricsRow]) -> bytes:
    return encode_csv(METRICS_HEADER, [r.as_list() for r in rows])


def read_csv(path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# --- configs and checkpoints -----------------------------------------------------------

def read_json(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: {e}") from None


def dump_json(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode()


MANIFEST = "manifest.json"


def save_checkpoint(directory, config: dict, tensors: dict[str, np.ndarray]) -> Path:
    """Write one MIAT file per tensor plus a manifest mapping names to files."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    files = {}
    for i, (name, a) in enumerate(sorted(tensors.items())):
        fn = f"t{i:04d}.miat"
        write_miat(d / fn, a)
        files[name] = fn
    (d / MANIFEST).write_bytes(dump_json({"format": "miat-checkpoint", "version": 1,
                                          "config": config, "tensors": files}))
    return d


def load_checkpoint(directory) -> tuple[dict, dict[str, np.ndarray]]:
    d = Path(directory)
    man = read_json(d / MANIFEST)
    if man.get("format") != "miat-checkpoint" or "tensors" not in man:
        raise FormatError(f"{d / MANIFEST} is not a checkpoint manifest")
    return man.get("config", {}), {k: read_miat(d / fn) for k, fn in man["tensors"].items()}
