"""Deterministic volume and config persistence.

Two volume formats:
  * minimal single-file NIfTI-1: 348-byte header, magic "n+1" only, sform
    orientation, datatypes uint8/int16/float32, transparent .gz decode on
    read (never written)
  * raw little-endian payload `<base>.raw` with a TOML sidecar
    `<base>.raw.hdr`

Payloads are x-fastest (Fortran order). Writes go to a temp file in the
target directory followed by an atomic rename, so failed runs leave no
truncated output. docs/formats.md fixes the byte layouts.
"""

from __future__ import annotations

import gzip
import os
import struct
import tempfile
from dataclasses import dataclass, fields, replace

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .synthesis import RANGE_FIELDS, SynthesisConfig
from .train import TrainConfig
from .unet import UNetConfig
from .volume import BinaryMask, Grid, LabelVolume, ScalarVolume

_NIFTI_DTYPES = {2: np.uint8, 4: np.int16, 16: np.float32}
_NIFTI_CODES = {"uint8": 2, "int16": 4, "float32": 16}
_BITPIX = {"uint8": 8, "int16": 16, "float32": 32}


class IOFormatError(Exception):
    """File format violation with a stable machine-readable code."""

    def __init__(self, code: str, message: str):
        self.code = code
        super().__init__(f"{code}: {message}")


def _atomic_write(path, data: bytes):
    d = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_file_bytes(path):
    with open(path, "rb") as f:
        head = f.read(2)
    if head == b"\x1f\x8b":
        with gzip.open(path, "rb") as f:
            return f.read()
    with open(path, "rb") as f:
        return f.read()


# ---------------------------------------------------------------- NIfTI-1

def _parse_nifti(data: bytes, path):
    if len(data) < 352:
        raise IOFormatError("truncated-payload", f"{path}: shorter than a NIfTI header")
    (sizeof_hdr,) = struct.unpack_from("<i", data, 0)
    if sizeof_hdr == 348:
        bo = "<"
    elif struct.unpack_from(">i", data, 0)[0] == 348:
        bo = ">"
    else:
        raise IOFormatError("bad-header", f"{path}: sizeof_hdr is not 348 in either byte order")
    magic = data[344:348]
    if magic == b"ni1\x00":
        raise IOFormatError(
            "unsupported-format", f"{path}: detached-header NIfTI (magic 'ni1') not supported"
        )
    if magic != b"n+1\x00":
        raise IOFormatError("bad-magic", f"{path}: magic {magic!r} is not 'n+1'")
    dim = struct.unpack_from(f"{bo}8h", data, 40)
    ndim = dim[0]
    if not (1 <= ndim <= 7):
        raise IOFormatError("bad-header", f"{path}: dim[0]={ndim} out of range")
    if ndim > 3 and any(d > 1 for d in dim[4:1 + ndim]):
        raise IOFormatError("unsupported-format", f"{path}: more than 3 non-trivial dims")
    dims = tuple(max(1, d) for d in dim[1:4])
    (datatype,) = struct.unpack_from(f"{bo}h", data, 70)
    if datatype not in _NIFTI_DTYPES:
        raise IOFormatError("unsupported-datatype", f"{path}: NIfTI datatype code {datatype}")
    pixdim = struct.unpack_from(f"{bo}8f", data, 76)
    spacing = tuple(abs(p) if p != 0 else 1.0 for p in pixdim[1:4])
    (vox_offset,) = struct.unpack_from(f"{bo}f", data, 108)
    vox_offset = int(vox_offset)
    if vox_offset < 348:
        raise IOFormatError("bad-header", f"{path}: vox_offset {vox_offset} < 348")
    slope, inter = struct.unpack_from(f"{bo}2f", data, 112)
    (sform_code,) = struct.unpack_from(f"{bo}h", data, 254)
    if sform_code > 0:
        rows = struct.unpack_from(f"{bo}12f", data, 280)
        affine = np.array(
            [rows[0:4], rows[4:8], rows[8:12], [0.0, 0.0, 0.0, 1.0]], dtype=np.float64
        )
    else:
        # sform-only policy: fall back to a spacing-diagonal identity frame
        affine = np.diag(list(spacing) + [1.0])
    dtype = np.dtype(_NIFTI_DTYPES[datatype]).newbyteorder(bo)
    count = dims[0] * dims[1] * dims[2]
    need = vox_offset + count * dtype.itemsize
    if len(data) < need:
        raise IOFormatError(
            "truncated-payload", f"{path}: have {len(data)} bytes, need {need}"
        )
    raw = np.frombuffer(data, dtype=dtype, count=count, offset=vox_offset)
    arr = raw.astype(raw.dtype.newbyteorder("=")).reshape(dims, order="F")
    if slope != 0.0 and (slope, inter) != (1.0, 0.0):
        arr = arr.astype(np.float32) * np.float32(slope) + np.float32(inter)
    return arr, Grid(dims, spacing, affine)


def _build_nifti(vol, datatype: str) -> bytes:
    grid = vol.grid
    hdr = bytearray(348)
    struct.pack_into("<i", hdr, 0, 348)
    struct.pack_into("<8h", hdr, 40, 3, *grid.dims, 1, 1, 1, 1)
    struct.pack_into("<h", hdr, 70, _NIFTI_CODES[datatype])
    struct.pack_into("<h", hdr, 72, _BITPIX[datatype])
    struct.pack_into("<8f", hdr, 76, 1.0, *grid.spacing, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<f", hdr, 108, 352.0)  # vox_offset
    struct.pack_into("<2f", hdr, 112, 0.0, 0.0)  # no scl scaling
    struct.pack_into("<h", hdr, 254, 1)  # sform_code
    a = grid.affine
    struct.pack_into("<4f", hdr, 280, *a[0])
    struct.pack_into("<4f", hdr, 296, *a[1])
    struct.pack_into("<4f", hdr, 312, *a[2])
    hdr[344:348] = b"n+1\x00"
    payload = _cast_payload(vol, datatype)
    return bytes(hdr) + b"\x00" * 4 + payload.ravel(order="F").astype(f"<{payload.dtype.str[1:]}").tobytes()


def _cast_payload(vol, datatype: str):
    data = vol.data
    if isinstance(vol, BinaryMask):
        data = data.astype(np.uint8)
    target = np.dtype(datatype)
    if target.kind in "iu":
        info = np.iinfo(target)
        vals = data
        if vals.dtype.kind == "f":
            if not np.all(vals == np.round(vals)):
                raise IOFormatError(
                    "out-of-range-cast", "non-integral values cannot be written as integers"
                )
        if vals.min() < info.min or vals.max() > info.max:
            raise IOFormatError(
                "out-of-range-cast",
                f"values [{vals.min()}, {vals.max()}] do not fit {datatype}",
            )
    return data.astype(target)


# ---------------------------------------------------------------- raw + sidecar

_RAW_FORMAT = "corticarve-raw-v1"
_RAW_KEYS = {"format", "dims", "spacing", "affine", "datatype", "endianness", "order", "labels"}


def _toml_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (list, tuple, np.ndarray)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot serialize {type(v)} to TOML")


def _raw_paths(path):
    path = str(path)
    if path.endswith(".raw.hdr"):
        path = path[:-4]
    if not path.endswith(".raw"):
        raise IOFormatError("unsupported-format", f"{path}: raw volumes use the .raw suffix")
    return path, path + ".hdr"


def _write_raw(vol, path, datatype: str):
    payload_path, hdr_path = _raw_paths(path)
    payload = _cast_payload(vol, datatype)
    is_labels = isinstance(vol, (LabelVolume, BinaryMask))
    if is_labels and np.dtype(datatype).kind == "f":
        raise IOFormatError("out-of-range-cast", "label volumes need an integer datatype")
    g = vol.grid
    lines = [
        f"format = {_toml_value(_RAW_FORMAT)}",
        f"dims = {_toml_value(list(g.dims))}",
        f"spacing = {_toml_value(list(g.spacing))}",
        f"affine = {_toml_value([list(r) for r in g.affine])}",
        f"datatype = {_toml_value(datatype)}",
        'endianness = "little"',
        'order = "x-fastest"',
        f"labels = {_toml_value(is_labels)}",
    ]
    _atomic_write(payload_path, payload.ravel(order="F").astype(f"<{payload.dtype.str[1:]}").tobytes())
    _atomic_write(hdr_path, ("\n".join(lines) + "\n").encode())


def _read_raw(path):
    payload_path, hdr_path = _raw_paths(path)
    if not os.path.exists(hdr_path):
        raise IOFormatError("bad-header", f"{hdr_path}: sidecar header missing")
    try:
        with open(hdr_path, "rb") as f:
            meta = tomllib.load(f)
    except tomllib.TOMLDecodeError as e:
        raise IOFormatError("bad-header", f"{hdr_path}: {e}") from e
    unknown = set(meta) - _RAW_KEYS
    if unknown:
        raise IOFormatError("bad-header", f"{hdr_path}: unknown keys {sorted(unknown)}")
    if meta.get("format") != _RAW_FORMAT:
        raise IOFormatError("bad-magic", f"{hdr_path}: format tag {meta.get('format')!r}")
    if meta.get("endianness", "little") != "little":
        raise IOFormatError("unsupported-format", f"{hdr_path}: big-endian payloads unsupported")
    if meta.get("order", "x-fastest") != "x-fastest":
        raise IOFormatError("unsupported-format", f"{hdr_path}: unknown payload order")
    datatype = meta.get("datatype")
    if datatype not in _NIFTI_CODES:
        raise IOFormatError("unsupported-datatype", f"{hdr_path}: datatype {datatype!r}")
    try:
        grid = Grid(tuple(meta["dims"]), tuple(meta["spacing"]), np.array(meta["affine"]))
    except (KeyError, ValueError, TypeError) as e:
        raise IOFormatError("bad-header", f"{hdr_path}: {e}") from e
    dtype = np.dtype(datatype).newbyteorder("<")
    with open(payload_path, "rb") as f:
        data = f.read()
    count = grid.nvox
    if len(data) < count * dtype.itemsize:
        raise IOFormatError(
            "truncated-payload",
            f"{payload_path}: have {len(data)} bytes, need {count * dtype.itemsize}",
        )
    arr = np.frombuffer(data, dtype=dtype, count=count)
    arr = arr.astype(arr.dtype.newbyteorder("=")).reshape(grid.dims, order="F")
    return arr, grid, bool(meta.get("labels", False))


# ---------------------------------------------------------------- public volume API

def read_volume(path, as_labels=None):
    """Load a volume; format chosen by suffix (.nii/.nii.gz or .raw).

    Raw sidecars with labels=true load as LabelVolume automatically. For
    NIfTI, pass as_labels=True to get a LabelVolume (requires an integer
    datatype and no scl scaling).
    """
    p = str(path)
    if p.endswith((".nii", ".nii.gz")):
        arr, grid = _parse_nifti(_read_file_bytes(p), p)
        labels = bool(as_labels)
    elif p.endswith((".raw", ".raw.hdr")):
        arr, grid, labels = _read_raw(p)
        if as_labels is not None:
            labels = bool(as_labels)
    else:
        raise IOFormatError("unsupported-format", f"{p}: unrecognized volume suffix")
    if labels:
        if arr.dtype.kind not in "iu":
            raise IOFormatError(
                "unsupported-datatype", f"{p}: label volumes need integer payloads"
            )
        return LabelVolume(grid, arr)
    return ScalarVolume(grid, arr)


def read_mask(path) -> BinaryMask:
    """Load a {0,1} volume as a BinaryMask."""
    vol = read_volume(path)
    data = vol.data
    if not np.all((data == 0) | (data == 1)):
        raise IOFormatError("bad-value", f"{path}: mask values outside {{0, 1}}")
    return BinaryMask(vol.grid, data.astype(bool))


def write_volume(vol, path, datatype: str = "float32"):
    """Write a volume; format chosen by suffix. Writes are atomic."""
    if datatype not in _NIFTI_CODES:
        raise IOFormatError("unsupported-datatype", f"datatype {datatype!r}")
    p = str(path)
    if p.endswith(".nii.gz"):
        raise IOFormatError(
            "unsupported-format", "gz is decode-only; write an uncompressed .nii"
        )
    if p.endswith(".nii"):
        _atomic_write(p, _build_nifti(vol, datatype))
    elif p.endswith((".raw", ".raw.hdr")):
        _write_raw(vol, p, datatype)
    else:
        raise IOFormatError("unsupported-format", f"{p}: unrecognized volume suffix")


# ---------------------------------------------------------------- config files

@dataclass(frozen=True)
class RunConfig:
    synthesis: SynthesisConfig
    train: TrainConfig
    network: UNetConfig


_SYNTH_KEYS = set(RANGE_FIELDS) | {
    "downsample_factors",
    "downsample_axis_prob",
    "svf_steps",
    "brain_labels",
    "sdt_band_mm",
    "sdt_band_weight",
}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)}
_NET_KEYS = {f.name for f in fields(UNetConfig)}


def load_config(path) -> RunConfig:
    """Parse a TOML run config.

    Top-level keys mirror the synthesis sampling rows verbatim
    (e.g. `affine_translation_mm = [0, 50]`); [train] and [network] tables
    hold the loop and architecture settings. Missing keys fall back to
    defaults; unknown keys are a hard error.
    """
    try:
        with open(path, "rb") as f:
            raw = tomllib.load(f)
    except tomllib.TOMLDecodeError as e:
        raise IOFormatError("config-parse", f"{path}: {e}") from e
    tables = {}
    for t in ("train", "network"):
        sub = raw.pop(t, {})
        if not isinstance(sub, dict):
            raise IOFormatError("config-parse", f"{path}: [{t}] must be a table")
        tables[t] = sub
    unknown = set(raw) - _SYNTH_KEYS
    if unknown:
        raise IOFormatError("unknown-key", f"{path}: unknown synthesis keys {sorted(unknown)}")
    unknown = set(tables["train"]) - _TRAIN_KEYS
    if unknown:
        raise IOFormatError("unknown-key", f"{path}: unknown [train] keys {sorted(unknown)}")
    unknown = set(tables["network"]) - _NET_KEYS
    if unknown:
        raise IOFormatError("unknown-key", f"{path}: unknown [network] keys {sorted(unknown)}")
    tupled = {
        k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()
    }
    net = {k: tuple(v) if isinstance(v, list) else v for k, v in tables["network"].items()}
    try:
        return RunConfig(
            synthesis=SynthesisConfig(**tupled),
            train=TrainConfig(**tables["train"]),
            network=UNetConfig(**net),
        )
    except (ValueError, TypeError) as e:
        raise IOFormatError("bad-value", f"{path}: {e}") from e


def save_config(cfg: RunConfig, path):
    """Emit a TOML file that load_config parses back to an equal RunConfig."""
    lines = []
    for f in fields(SynthesisConfig):
        v = getattr(cfg.synthesis, f.name)
        lines.append(f"{f.name} = {_toml_value(v)}")
    lines.append("")
    lines.append("[train]")
    for f in fields(TrainConfig):
        lines.append(f"{f.name} = {_toml_value(getattr(cfg.train, f.name))}")
    lines.append("")
    lines.append("[network]")
    for f in fields(UNetConfig):
        lines.append(f"{f.name} = {_toml_value(getattr(cfg.network, f.name))}")
    _atomic_write(path, ("\n".join(lines) + "\n").encode())
