"""Pinned on-disk formats: dataset, checkpoint, CSV reports, PGM heatmaps.

Dataset ("TFNO", version 1), little-endian throughout:

    magic "TFNO" | u8 version
    u32 x 6: n_scenarios, nx, ny, nt, n_in_channels, n_out_channels
    u32 n_constants | f64 x n_constants   (p_lo p_hi logk_lo logk_hi q_lo q_hi)
    u8 x n_scenarios: family flags (0 withdrawal, 1 injection)
    payload f32: scenario-major, channel-major (inputs then outputs),
                 row-major over (x, y, t)

A human-readable JSON manifest rides next to the dataset (same path plus
".manifest.json") with channel names, seed, family counts, constants, and
the generation config echo.

Checkpoint ("TFNC", version 1), little-endian:

    magic "TFNC" | u8 version
    u32 config_len | UTF-8 JSON config echo
    u32 n_blocks | per block: u32 name_len, name, u32 ndim, u32 x ndim
    extents, f64 entries

Loading a checkpoint reproduces forward outputs bit for bit.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .ressim import INPUT_CHANNELS, OUTPUT_CHANNELS, Dataset

DATASET_MAGIC = b"TFNO"
CHECKPOINT_MAGIC = b"TFNC"
FORMAT_VERSION = 1

CONSTANT_ORDER = ("p_lo", "p_hi", "logk_lo", "logk_hi", "q_lo", "q_hi")
_FAMILY_CODES = {"withdrawal": 0, "injection": 1}
_FAMILY_NAMES = {v: k for k, v in _FAMILY_CODES.items()}


class FormatError(ValueError):
    pass


def _u32(x: int) -> bytes:
    return struct.pack("<I", x)


def _read_u32(f) -> int:
    raw = f.read(4)
    if len(raw) != 4:
        raise FormatError("truncated file while reading u32")
    return struct.unpack("<I", raw)[0]


# --------------------------------------------------------------------------
# dataset
# --------------------------------------------------------------------------


def manifest_path(dataset_path) -> Path:
    return Path(str(dataset_path) + ".manifest.json")


def write_dataset(path, ds: Dataset, gen_config: dict | None = None) -> None:
    path = Path(path)
    n, c_in = ds.inputs.shape[:2]
    nx, ny, nt = ds.inputs.shape[2:]
    c_out = ds.targets.shape[1]
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(bytes([FORMAT_VERSION]))
        for v in (n, nx, ny, nt, c_in, c_out):
            f.write(_u32(v))
        f.write(_u32(len(CONSTANT_ORDER)))
        f.write(np.array([ds.constants[k] for k in CONSTANT_ORDER], dtype="<f8").tobytes())
        f.write(bytes(_FAMILY_CODES[fam] for fam in ds.families))
        for i in range(n):
            f.write(ds.inputs[i].astype("<f4", copy=False).tobytes())
            f.write(ds.targets[i].astype("<f4", copy=False).tobytes())
    manifest = {
        "format": "TFNO dataset v%d" % FORMAT_VERSION,
        "seed": ds.seed,
        "n_scenarios": n,
        "grid": {"nx": nx, "ny": ny, "nt": nt},
        "input_channels": list(ds.channel_names),
        "output_channels": list(OUTPUT_CHANNELS),
        "family_counts": {
            fam: int(sum(1 for x in ds.families if x == fam))
            for fam in ("withdrawal", "injection")
        },
        "normalization_constants": {k: ds.constants[k] for k in CONSTANT_ORDER},
    }
    if gen_config is not None:
        manifest["generation_config"] = gen_config
    with open(manifest_path(path), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def read_dataset(path) -> Dataset:
    path = Path(path)
    with open(path, "rb") as f:
        if f.read(4) != DATASET_MAGIC:
            raise FormatError("%s is not a TFNO dataset" % path)
        version = f.read(1)[0]
        if version != FORMAT_VERSION:
            raise FormatError("unsupported dataset version %d" % version)
        n, nx, ny, nt, c_in, c_out = (_read_u32(f) for _ in range(6))
        n_const = _read_u32(f)
        consts = np.frombuffer(f.read(8 * n_const), dtype="<f8")
        if n_const != len(CONSTANT_ORDER):
            raise FormatError("expected %d constants, found %d" % (len(CONSTANT_ORDER), n_const))
        fam_raw = f.read(n)
        if len(fam_raw) != n:
            raise FormatError("truncated family table")
        families = tuple(_FAMILY_NAMES[b] for b in fam_raw)
        per_in = c_in * nx * ny * nt
        per_out = c_out * nx * ny * nt
        inputs = np.empty((n, c_in, nx, ny, nt), dtype=np.float32)
        targets = np.empty((n, c_out, nx, ny, nt), dtype=np.float32)
        for i in range(n):
            inputs[i] = np.frombuffer(f.read(4 * per_in), dtype="<f4").reshape(c_in, nx, ny, nt)
            targets[i] = np.frombuffer(f.read(4 * per_out), dtype="<f4").reshape(c_out, nx, ny, nt)
        if f.read(1):
            raise FormatError("trailing bytes after dataset payload")
    constants = {k: float(v) for k, v in zip(CONSTANT_ORDER, consts)}
    return Dataset(inputs=inputs, targets=targets, families=families,
                   constants=constants, seed=read_manifest_seed(path),
                   channel_names=INPUT_CHANNELS)


def read_manifest(path) -> dict | None:
    mp = manifest_path(path)
    if not mp.exists():
        return None
    with open(mp, encoding="utf-8") as f:
        return json.load(f)


def read_manifest_seed(path) -> int:
    m = read_manifest(path)
    return int(m["seed"]) if m and "seed" in m else -1


# --------------------------------------------------------------------------
# checkpoint
# --------------------------------------------------------------------------


def write_checkpoint(path, params: dict, config_echo: dict) -> None:
    """Parameter blocks in sorted name order plus a JSON config echo."""
    path = Path(path)
    blob = json.dumps(config_echo, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(bytes([FORMAT_VERSION]))
        f.write(_u32(len(blob)))
        f.write(blob)
        names = sorted(params)
        f.write(_u32(len(names)))
        for name in names:
            arr = params[name].data if hasattr(params[name], "data") else np.asarray(params[name])
            enc = name.encode("utf-8")
            f.write(_u32(len(enc)))
            f.write(enc)
            f.write(_u32(arr.ndim))
            for s in arr.shape:
                f.write(_u32(s))
            f.write(arr.astype("<f8", copy=False).tobytes())


def read_checkpoint(path):
    """Returns (config_echo dict, {name: float64 array})."""
    path = Path(path)
    with open(path, "rb") as f:
        if f.read(4) != CHECKPOINT_MAGIC:
            raise FormatError("%s is not a TFNC checkpoint" % path)
        version = f.read(1)[0]
        if version != FORMAT_VERSION:
            raise FormatError("unsupported checkpoint version %d" % version)
        config_echo = json.loads(f.read(_read_u32(f)).decode("utf-8"))
        blocks = {}
        for _ in range(_read_u32(f)):
            name = f.read(_read_u32(f)).decode("utf-8")
            ndim = _read_u32(f)
            shape = tuple(_read_u32(f) for _ in range(ndim))
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(f.read(8 * count), dtype="<f8").reshape(shape)
            blocks[name] = data.copy()
        if f.read(1):
            raise FormatError("trailing bytes after checkpoint payload")
    return config_echo, blocks


# --------------------------------------------------------------------------
# CSV and PGM emission
# --------------------------------------------------------------------------


def _csv_cell(v) -> str:
    if isinstance(v, float):
        s = repr(v)
    else:
        s = str(v)
    if any(ch in s for ch in ",\"\n"):
        s = '"' + s.replace('"', '""') + '"'
    return s


def write_csv(path, header, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(",".join(_csv_cell(h) for h in header) + "\r\n")
        for row in rows:
            f.write(",".join(_csv_cell(v) for v in row) + "\r\n")


def write_pgm(path, field: np.ndarray, lo: float | None = None, hi: float | None = None) -> None:
    """16-bit binary PGM (P5) with the value scale recorded in a comment."""
    arr = np.asarray(field, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError("heatmap must be 2-D, got %s" % (arr.shape,))
    lo = float(arr.min()) if lo is None else float(lo)
    hi = float(arr.max()) if hi is None else float(hi)
    span = hi - lo
    scaled = np.zeros_like(arr) if span <= 0 else np.clip((arr - lo) / span, 0.0, 1.0)
    pix = np.round(scaled * 65535.0).astype(">u2")
    with open(path, "wb") as f:
        f.write(b"P5\n")
        f.write(("# scale %s %s\n" % (repr(lo), repr(hi))).encode("ascii"))
        f.write(("%d %d\n" % (arr.shape[1], arr.shape[0])).encode("ascii"))
        f.write(b"65535\n")
        f.write(pix.tobytes())


def read_pgm(path):
    """Returns (pixels uint16 [h, w], lo, hi) for round-trip checks."""
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(b"P5"):
        raise FormatError("not a binary PGM")
    parts = []
    pos = 2
    lo = hi = None
    while len(parts) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            end = data.index(b"\n", pos)
            comment = data[pos + 1 : end].decode("ascii").split()
            if comment[:1] == ["scale"]:
                lo, hi = float(comment[1]), float(comment[2])
            pos = end + 1
            continue
        end = pos
        while end < len(data) and not data[end : end + 1].isspace():
            end += 1
        parts.append(int(data[pos:end]))
        pos = end
    pos += 1  # single whitespace after maxval
    w, h, maxval = parts
    if maxval != 65535:
        raise FormatError("expected 16-bit depth, got maxval %d" % maxval)
    pix = np.frombuffer(data[pos : pos + 2 * w * h], dtype=">u2").reshape(h, w)
    return pix, lo, hi
