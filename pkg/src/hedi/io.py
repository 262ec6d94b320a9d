"""Readers and writers for MetaImage, NIfTI-1, landmark CSV files.

MetaImage (``.mhd`` + ``.raw`` or inline ``.mha``) is the canonical exchange
format. A minimal uncompressed NIfTI-1 reader/writer covers clinical exports
(``n+1`` single-file, uint8/int16/float32). Only axis-aligned volumes with
identity direction cosines are accepted.
"""

from __future__ import annotations

import csv
import os
import struct
from pathlib import Path

import numpy as np

from .errors import (CorruptHeader, DuplicateId, IoFailure, MalformedRow,
                     TruncatedData, UnsupportedFormat)
from .volume import (INTENSITY, KINDS, LABEL, MASK, DisplacementField,
                     ImageVolume, Landmark, LandmarkSet)

__all__ = [
    "load_volume", "save_volume", "load_field", "save_field",
    "load_landmarks", "save_landmarks", "read_metaimage_header",
    "save_channels", "load_channels",
]

_MET_TYPES = {
    "MET_UCHAR": "u1", "MET_CHAR": "i1",
    "MET_USHORT": "u2", "MET_SHORT": "i2",
    "MET_UINT": "u4", "MET_INT": "i4",
    "MET_ULONG_LONG": "u8", "MET_LONG_LONG": "i8",
    "MET_FLOAT": "f4", "MET_DOUBLE": "f8",
}
_MET_NAMES = {np.dtype(v).str[1:]: k for k, v in _MET_TYPES.items()}

# Custom MetaImage key recording ImageVolume.kind; other readers ignore it.
_KIND_KEY = "HEDIKind"

_NIFTI_DTYPES = {2: np.dtype("u1"), 4: np.dtype("i2"), 16: np.dtype("f4")}
_NIFTI_CODES = {v.str[1:]: k for k, v in _NIFTI_DTYPES.items()}
_LANDMARK_HEADER = ["id", "rx", "ry", "rz", "vx", "vy", "vz"]


def _suffix(path: Path) -> str:
    name = path.name.lower()
    if name.endswith(".nii.gz"):
        return ".nii.gz"
    return path.suffix.lower()


def _to_disk_order(arr: np.ndarray) -> bytes:
    """Flatten ``[x, y, z, (c)]`` to x-fastest order with channels interleaved."""
    if arr.ndim == 4:
        flat = np.transpose(arr, (2, 1, 0, 3))
    else:
        flat = np.transpose(arr, (2, 1, 0))
    return np.ascontiguousarray(flat).astype(flat.dtype.newbyteorder("<"), copy=False).tobytes()


def _from_disk_order(buf: np.ndarray, dims, channels: int) -> np.ndarray:
    nx, ny, nz = dims
    if channels == 1:
        return np.ascontiguousarray(np.transpose(buf.reshape(nz, ny, nx), (2, 1, 0)))
    return np.ascontiguousarray(np.transpose(buf.reshape(nz, ny, nx, channels), (2, 1, 0, 3)))


def _infer_kind(data: np.ndarray) -> str:
    if np.issubdtype(data.dtype, np.unsignedinteger) or data.dtype == bool:
        if data.size and np.all((data == 0) | (data == 1)):
            return MASK
        return LABEL
    return INTENSITY


# -- MetaImage -----------------------------------------------------------------

def _floats(text: str, key: str, n: int = 3) -> tuple[float, ...]:
    try:
        vals = tuple(float(t) for t in text.split())
    except ValueError:
        raise CorruptHeader(f"{key} is not numeric: {text!r}") from None
    if len(vals) != n:
        raise CorruptHeader(f"{key} needs {n} values, got {len(vals)}")
    return vals


def read_metaimage_header(path) -> tuple[dict[str, str], int]:
    """Parse a MetaImage header. Returns the key/value map and header byte length."""
    path = Path(path)
    header: dict[str, str] = {}
    try:
        with open(path, "rb") as fh:
            offset = 0
            while True:
                raw = fh.readline()
                if not raw:
                    break
                offset += len(raw)
                line = raw.decode("latin-1").strip()
                if not line:
                    continue
                if "=" not in line:
                    raise CorruptHeader(f"{path}: malformed header line {line!r}")
                key, value = (s.strip() for s in line.split("=", 1))
                header[key] = value
                if key == "ElementDataFile":
                    break
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if "ElementDataFile" not in header:
        raise CorruptHeader(f"{path}: missing ElementDataFile")
    return header, offset


def _read_metaimage(path: Path, channels_expected: int):
    header, header_len = read_metaimage_header(path)
    if header.get("ObjectType", "Image") != "Image":
        raise UnsupportedFormat(f"{path}: ObjectType {header['ObjectType']!r} is not Image")
    if header.get("NDims", "3").strip() != "3":
        raise UnsupportedFormat(f"{path}: only NDims = 3 is supported")
    if header.get("CompressedData", "False").lower() == "true":
        raise UnsupportedFormat(f"{path}: compressed MetaImage payloads are not supported")
    for key in ("TransformMatrix", "Orientation", "Rotation"):
        if key in header:
            mat = np.array(_floats(header[key], key, 9)).reshape(3, 3)
            if not np.allclose(mat, np.eye(3), atol=1e-6):
                raise UnsupportedFormat(f"{path}: non-identity direction cosines are not supported")
    if "DimSize" not in header or "ElementSpacing" not in header:
        raise CorruptHeader(f"{path}: DimSize and ElementSpacing are required")
    try:
        dims = tuple(int(t) for t in header["DimSize"].split())
    except ValueError:
        raise CorruptHeader(f"{path}: DimSize is not integer: {header['DimSize']!r}") from None
    if len(dims) != 3 or min(dims) <= 0:
        raise CorruptHeader(f"{path}: DimSize must be 3 positive integers")
    spacing = _floats(header["ElementSpacing"], "ElementSpacing")
    if not all(np.isfinite(spacing)) or min(spacing) <= 0:
        raise CorruptHeader(f"{path}: ElementSpacing must be positive")
    origin_key = next((k for k in ("Offset", "Origin", "Position") if k in header), None)
    origin = _floats(header[origin_key], origin_key) if origin_key else (0.0, 0.0, 0.0)
    channels = int(header.get("ElementNumberOfChannels", "1"))
    if channels != channels_expected:
        raise UnsupportedFormat(
            f"{path}: ElementNumberOfChannels = {channels}, expected {channels_expected}"
        )
    etype = header.get("ElementType")
    if etype not in _MET_TYPES:
        raise UnsupportedFormat(f"{path}: ElementType {etype!r} is not supported")
    msb = any(header.get(k, "False").lower() == "true"
              for k in ("BinaryDataByteOrderMSB", "ElementByteOrderMSB"))
    dtype = np.dtype(_MET_TYPES[etype]).newbyteorder(">" if msb else "<")

    count = int(np.prod(dims)) * channels
    data_file = header["ElementDataFile"]
    try:
        if data_file == "LOCAL":
            with open(path, "rb") as fh:
                fh.seek(header_len)
                payload = fh.read()
        elif data_file in ("LIST",) or data_file.startswith("%"):
            raise UnsupportedFormat(f"{path}: multi-file payloads are not supported")
        else:
            raw_path = path.parent / data_file
            with open(raw_path, "rb") as fh:
                payload = fh.read()
            skip = int(header.get("HeaderSize", "0"))
            if skip > 0:
                payload = payload[skip:]
            elif skip == -1:
                payload = payload[len(payload) - count * dtype.itemsize:]
    except OSError as exc:
        raise IoFailure(f"cannot read payload of {path}: {exc}") from exc
    if len(payload) < count * dtype.itemsize:
        raise TruncatedData(
            f"{path}: payload holds {len(payload) // dtype.itemsize} elements, "
            f"header requires {count}"
        )
    buf = np.frombuffer(payload, dtype=dtype, count=count).astype(dtype.newbyteorder("="))
    data = _from_disk_order(buf, dims, channels)
    return data, spacing, origin, header


def _metaimage_header(dims, spacing, origin, dtype: np.dtype, channels: int,
                      data_file: str, kind: str | None) -> str:
    key = dtype.str[1:]
    if key not in _MET_NAMES:
        raise UnsupportedFormat(f"dtype {dtype} has no MetaImage ElementType")
    lines = [
        "ObjectType = Image",
        "NDims = 3",
        "BinaryData = True",
        "BinaryDataByteOrderMSB = False",
        "CompressedData = False",
        "TransformMatrix = 1 0 0 0 1 0 0 0 1",
        "Offset = " + " ".join(repr(float(v)) for v in origin),
        "CenterOfRotation = 0 0 0",
        "ElementSpacing = " + " ".join(repr(float(v)) for v in spacing),
        "DimSize = " + " ".join(str(int(d)) for d in dims),
    ]
    if channels != 1:
        lines.append(f"ElementNumberOfChannels = {channels}")
    if kind is not None:
        lines.append(f"{_KIND_KEY} = {kind}")
    lines.append(f"ElementType = {_MET_NAMES[key]}")
    lines.append(f"ElementDataFile = {data_file}")
    return "\n".join(lines) + "\n"


def _write_metaimage(path: Path, arr: np.ndarray, spacing, origin, channels: int,
                     kind: str | None) -> None:
    dims = arr.shape[:3]
    suffix = _suffix(path)
    try:
        if suffix == ".mha":
            header = _metaimage_header(dims, spacing, origin, arr.dtype, channels, "LOCAL", kind)
            with open(path, "wb") as fh:
                fh.write(header.encode("ascii"))
                fh.write(_to_disk_order(arr))
        else:
            raw_name = path.with_suffix(".raw").name
            header = _metaimage_header(dims, spacing, origin, arr.dtype, channels, raw_name, kind)
            with open(path.parent / raw_name, "wb") as fh:
                fh.write(_to_disk_order(arr))
            with open(path, "w", encoding="ascii") as fh:
                fh.write(header)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


# -- NIfTI-1 -------------------------------------------------------------------

def _read_nifti(path: Path):
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if len(blob) < 348:
        raise CorruptHeader(f"{path}: shorter than a NIfTI-1 header")
    endian = "<"
    if struct.unpack("<i", blob[:4])[0] != 348:
        if struct.unpack(">i", blob[:4])[0] != 348:
            raise UnsupportedFormat(f"{path}: not a NIfTI-1 file (sizeof_hdr != 348)")
        endian = ">"
    if blob[344:348] != b"n+1\x00":
        raise UnsupportedFormat(f"{path}: only single-file NIfTI-1 ('n+1') is supported")

    def unpack(fmt, offset):
        return struct.unpack_from(endian + fmt, blob, offset)

    dim = unpack("8h", 40)
    ndim = dim[0]
    if ndim < 3 or ndim > 7 or any(d not in (0, 1) for d in dim[4:ndim + 1]):
        raise UnsupportedFormat(f"{path}: only 3-D NIfTI volumes are supported (dim={dim})")
    dims = tuple(int(d) for d in dim[1:4])
    if min(dims) <= 0:
        raise CorruptHeader(f"{path}: non-positive dimension {dims}")
    datatype = unpack("h", 70)[0]
    if datatype not in _NIFTI_DTYPES:
        raise UnsupportedFormat(f"{path}: NIfTI datatype {datatype} is not supported")
    pixdim = unpack("8f", 76)
    spacing = tuple(float(p) for p in pixdim[1:4])
    if not all(np.isfinite(spacing)) or min(spacing) <= 0:
        raise CorruptHeader(f"{path}: pixdim must be positive, got {spacing}")
    vox_offset = int(unpack("f", 108)[0])
    slope, inter = unpack("2f", 112)
    descrip = blob[148:228].split(b"\x00", 1)[0].decode("latin-1")
    qform_code, sform_code = unpack("2h", 252)

    origin = (0.0, 0.0, 0.0)
    if sform_code > 0:
        srow = np.array(unpack("12f", 280), dtype=np.float64).reshape(3, 4)
        lin = srow[:, :3]
        if not np.allclose(lin, np.diag(np.diag(lin)), atol=1e-6) or np.any(np.diag(lin) <= 0):
            raise UnsupportedFormat(f"{path}: non-identity direction cosines are not supported")
        origin = tuple(float(v) for v in srow[:, 3])
    elif qform_code > 0:
        b, c, d = unpack("3f", 256)
        qfac = pixdim[0] if pixdim[0] != 0 else 1.0
        if max(abs(b), abs(c), abs(d)) > 1e-6 or qfac < 0:
            raise UnsupportedFormat(f"{path}: non-identity direction cosines are not supported")
        origin = tuple(float(v) for v in unpack("3f", 268))

    dtype = _NIFTI_DTYPES[datatype].newbyteorder(endian)
    count = int(np.prod(dims))
    payload = blob[vox_offset:]
    if len(payload) < count * dtype.itemsize:
        raise TruncatedData(
            f"{path}: payload holds {len(payload) // dtype.itemsize} voxels, header requires {count}"
        )
    buf = np.frombuffer(payload, dtype=dtype, count=count).astype(dtype.newbyteorder("="))
    data = _from_disk_order(buf, dims, 1)
    if slope not in (0.0, 1.0) or inter != 0.0:
        scaled = data.astype(np.float64) * (slope if slope != 0 else 1.0) + inter
        if float(slope).is_integer() and float(inter).is_integer() and np.all(
                (scaled >= -32768) & (scaled <= 32767)):
            data = scaled.astype(np.int16)
        else:
            data = scaled.astype(np.float32)
    kind = None
    if descrip.startswith("hedi:kind="):
        kind = descrip.split("=", 1)[1]
    return data, spacing, origin, kind


def _write_nifti(path: Path, vol: ImageVolume) -> None:
    data = vol.data
    if data.dtype == bool:
        data = data.astype(np.uint8)
    key = data.dtype.str[1:]
    if key not in _NIFTI_CODES:
        raise UnsupportedFormat(f"NIfTI writer supports uint8/int16/float32, not {data.dtype}")
    hdr = bytearray(348)
    struct.pack_into("<i", hdr, 0, 348)
    struct.pack_into("<8h", hdr, 40, 3, *data.shape, 1, 1, 1, 1)
    struct.pack_into("<h", hdr, 70, _NIFTI_CODES[key])
    struct.pack_into("<h", hdr, 72, data.dtype.itemsize * 8)
    struct.pack_into("<8f", hdr, 76, 1.0, *vol.spacing, 0, 0, 0, 0)
    struct.pack_into("<f", hdr, 108, 352.0)
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)
    struct.pack_into("<B", hdr, 123, 2 | 8)  # xyzt_units: mm, s
    descrip = f"hedi:kind={vol.kind}".encode("ascii")[:79]
    hdr[148:148 + len(descrip)] = descrip
    struct.pack_into("<2h", hdr, 252, 1, 1)
    struct.pack_into("<3f", hdr, 256, 0.0, 0.0, 0.0)
    struct.pack_into("<3f", hdr, 268, *vol.origin)
    sx, sy, sz = vol.spacing
    ox, oy, oz = vol.origin
    struct.pack_into("<12f", hdr, 280, sx, 0, 0, ox, 0, sy, 0, oy, 0, 0, sz, oz)
    hdr[344:348] = b"n+1\x00"
    try:
        with open(path, "wb") as fh:
            fh.write(bytes(hdr))
            fh.write(b"\x00" * 4)
            fh.write(_to_disk_order(data))
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


# -- public API ----------------------------------------------------------------

def load_volume(path, kind: str | None = None) -> ImageVolume:
    """Load a scalar volume from ``.mhd``/``.mha`` or uncompressed ``.nii``.

    ``kind`` overrides the stored or inferred volume kind.
    """
    path = Path(path)
    suffix = _suffix(path)
    if suffix in (".mhd", ".mha"):
        data, spacing, origin, header = _read_metaimage(path, channels_expected=1)
        stored = header.get(_KIND_KEY)
    elif suffix == ".nii":
        data, spacing, origin, stored = _read_nifti(path)
    else:
        raise UnsupportedFormat(f"{path}: unsupported volume format {suffix!r}")
    if kind is None:
        kind = stored if stored in KINDS else _infer_kind(data)
    if data.dtype == bool:
        data = data.astype(np.uint8)
    return ImageVolume(data, spacing, origin, kind)


def save_volume(volume: ImageVolume, path) -> None:
    path = Path(path)
    suffix = _suffix(path)
    if not path.parent.is_dir():
        raise IoFailure(f"parent directory of {path} does not exist")
    if not os.access(path.parent, os.W_OK):
        raise IoFailure(f"parent directory of {path} is not writable")
    data = volume.data.astype(np.uint8) if volume.data.dtype == bool else volume.data
    if suffix in (".mhd", ".mha"):
        _write_metaimage(path, data, volume.spacing, volume.origin, 1, volume.kind)
    elif suffix == ".nii":
        _write_nifti(path, volume)
    else:
        raise UnsupportedFormat(f"{path}: unsupported volume format {suffix!r}")


def load_field(path) -> DisplacementField:
    path = Path(path)
    if _suffix(path) not in (".mhd", ".mha"):
        raise UnsupportedFormat(f"{path}: displacement fields are stored as MetaImage")
    data, spacing, origin, _ = _read_metaimage(path, channels_expected=3)
    if not np.issubdtype(data.dtype, np.floating):
        data = data.astype(np.float64)
    return DisplacementField(data, spacing, origin)


def save_field(field: DisplacementField, path) -> None:
    path = Path(path)
    if _suffix(path) not in (".mhd", ".mha"):
        raise UnsupportedFormat(f"{path}: displacement fields are stored as MetaImage")
    if not path.parent.is_dir() or not os.access(path.parent, os.W_OK):
        raise IoFailure(f"parent directory of {path} is not writable")
    _write_metaimage(path, field.vectors, field.spacing, field.origin, 3, None)


def load_landmarks(path) -> LandmarkSet:
    """Read ``id,rx,ry,rz,vx,vy,vz`` rows (mm, world frame); row order is kept."""
    path = Path(path)
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise MalformedRow(f"{path}: missing header row")
    header = [c.strip() for c in rows[0]]
    if header != _LANDMARK_HEADER:
        raise MalformedRow(f"{path}: header must be {','.join(_LANDMARK_HEADER)}, got {header}")
    entries = []
    seen = set()
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != 7:
            raise MalformedRow(f"{path}:{lineno}: expected 7 columns, got {len(row)}")
        lid = row[0].strip()
        try:
            coords = [float(c) for c in row[1:]]
        except ValueError:
            raise MalformedRow(f"{path}:{lineno}: non-numeric coordinate") from None
        if not all(np.isfinite(coords)):
            raise MalformedRow(f"{path}:{lineno}: non-finite coordinate")
        if lid in seen:
            raise DuplicateId(f"{path}:{lineno}: duplicate landmark id {lid!r}")
        seen.add(lid)
        entries.append(Landmark(lid, tuple(coords[:3]), tuple(coords[3:])))
    return LandmarkSet(tuple(entries))


def save_landmarks(landmarks: LandmarkSet, path) -> None:
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(_LANDMARK_HEADER)
            for e in landmarks:
                writer.writerow([e.id, *(repr(float(v)) for v in e.rest_point),
                                 *(repr(float(v)) for v in e.valsalva_point)])
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def save_channels(data: np.ndarray, spacing, origin, path) -> None:
    """Write a ``(nx, ny, nz, c)`` array as a c-channel MetaImage."""
    path = Path(path)
    if _suffix(path) not in (".mhd", ".mha"):
        raise UnsupportedFormat(f"{path}: multichannel volumes are stored as MetaImage")
    if not path.parent.is_dir() or not os.access(path.parent, os.W_OK):
        raise IoFailure(f"parent directory of {path} is not writable")
    _write_metaimage(path, np.ascontiguousarray(data), spacing, origin, data.shape[3], None)


def load_channels(path, channels: int):
    """Read a c-channel MetaImage; returns ``(data, spacing, origin)``."""
    path = Path(path)
    if _suffix(path) not in (".mhd", ".mha"):
        raise UnsupportedFormat(f"{path}: multichannel volumes are stored as MetaImage")
    data, spacing, origin, _ = _read_metaimage(path, channels_expected=channels)
    return data, spacing, origin
