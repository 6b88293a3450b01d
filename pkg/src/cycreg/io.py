"""Volume file formats.

Two formats are supported, selected by extension:

* ``.nii``  -- a minimal single-file uncompressed NIfTI-1 subset:
  348-byte little-endian header, datatype float32 or uint8, magic "n+1".
  Scalars use dim[0] = 3; vector fields use dim[0] = 5 with dim[5] = 3.
  Spacing comes from pixdim, origin from qoffset; all other orientation
  fields are ignored. Files outside the subset are rejected, never
  misread.
* ``.raw``  -- native payload with a JSON sidecar header (same basename,
  ``.json`` appended). Payload bytes are little-endian, x-fastest, with
  vector components as three consecutive scalar blocks.

Write-then-read is bit-identical for both formats.
"""

import json
import struct

import numpy as np

from .errors import DataError, FileFormatError
from .grid import DISPLACEMENT, INTENSITY, MASK, Grid, VectorField3, Volume3

_NIFTI_MAGIC = b"n+1\x00"
_DT_UINT8 = 2
_DT_FLOAT32 = 16
_HEADER_SIZE = 348
_VOX_OFFSET = 352.0


def _dtype_for(code):
    if code == _DT_UINT8:
        return np.dtype("<u1")
    if code == _DT_FLOAT32:
        return np.dtype("<f4")
    raise FileFormatError("unsupported_datatype",
                          f"unsupported NIfTI datatype code {code}")


def _pack_nifti_header(dims, spacing, origin, datatype, ncomp):
    bitpix = 8 if datatype == _DT_UINT8 else 32
    if ncomp == 1:
        dim = [3, dims[0], dims[1], dims[2], 1, 1, 1, 1]
        intent_code = 0
    else:
        dim = [5, dims[0], dims[1], dims[2], 1, ncomp, 1, 1]
        intent_code = 1007  # vector-valued voxels
    pixdim = [1.0, spacing[0], spacing[1], spacing[2], 0.0, 0.0, 0.0, 0.0]

    h = bytearray(_HEADER_SIZE)
    struct.pack_into("<i", h, 0, _HEADER_SIZE)
    struct.pack_into("<c", h, 38, b"r")
    struct.pack_into("<8h", h, 40, *dim)
    struct.pack_into("<h", h, 68, intent_code)
    struct.pack_into("<h", h, 70, datatype)
    struct.pack_into("<h", h, 72, bitpix)
    struct.pack_into("<8f", h, 76, *pixdim)
    struct.pack_into("<f", h, 108, _VOX_OFFSET)
    struct.pack_into("<f", h, 112, 1.0)  # scl_slope
    struct.pack_into("<h", h, 252, 1)    # qform_code: quaternion is identity
    struct.pack_into("<3f", h, 256, 0.0, 0.0, 0.0)
    struct.pack_into("<3f", h, 268, *origin)
    struct.pack_into("<16s", h, 328, b"")
    struct.pack_into("<4s", h, 344, _NIFTI_MAGIC)
    return bytes(h)


def _encode_payload(data, dtype, ncomp):
    # x-fastest on disk; components are consecutive scalar blocks
    if ncomp == 1:
        flat = data.ravel(order="F")
    else:
        flat = np.concatenate([data[c].ravel(order="F") for c in range(ncomp)])
    if dtype == np.dtype("<u1"):
        if not np.isin(flat, (0.0, 1.0)).all():
            raise DataError("uint8 storage requires binary 0/1 voxel values")
        return flat.astype("<u1").tobytes()
    return flat.astype("<f4").tobytes()


def _obj_info(obj):
    if isinstance(obj, VectorField3):
        return obj.grid, obj.data, 3
    if isinstance(obj, Volume3):
        return obj.grid, obj.data, 1
    raise DataError(f"cannot serialize object of type {type(obj).__name__}")


def write_nifti(obj, path, dtype="float32"):
    grid, data, ncomp = _obj_info(obj)
    code = _DT_UINT8 if dtype == "uint8" else _DT_FLOAT32
    header = _pack_nifti_header(grid.dims, grid.spacing, grid.origin, code, ncomp)
    payload = _encode_payload(data, _dtype_for(code), ncomp)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(b"\x00\x00\x00\x00")  # no extensions
        fh.write(payload)


def read_nifti(path, kind=None, semantics=DISPLACEMENT):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER_SIZE + 4:
        raise FileFormatError("bad_header", f"{path}: truncated NIfTI header")
    magic = struct.unpack_from("<4s", raw, 344)[0]
    if magic != _NIFTI_MAGIC:
        raise FileFormatError("bad_magic", f"{path}: magic {magic!r} is not 'n+1'")
    size = struct.unpack_from("<i", raw, 0)[0]
    if size != _HEADER_SIZE:
        raise FileFormatError("bad_header",
                              f"{path}: sizeof_hdr {size} (not little-endian 348)")
    dim = struct.unpack_from("<8h", raw, 40)
    datatype = struct.unpack_from("<h", raw, 70)[0]
    pixdim = struct.unpack_from("<8f", raw, 76)
    vox_offset = int(struct.unpack_from("<f", raw, 108)[0])
    origin = struct.unpack_from("<3f", raw, 268)

    if dim[0] == 3:
        ncomp = 1
    elif dim[0] == 5 and dim[4] == 1 and dim[5] == 3:
        ncomp = 3
    else:
        raise FileFormatError(
            "bad_header", f"{path}: unsupported dim layout {list(dim)}")
    dims = (dim[1], dim[2], dim[3])
    dt = _dtype_for(datatype)
    expected = int(np.prod(dims)) * ncomp * dt.itemsize
    payload = raw[vox_offset:]
    if len(payload) != expected:
        raise FileFormatError(
            "size_mismatch",
            f"{path}: payload is {len(payload)} bytes, expected {expected}")

    flat = np.frombuffer(payload, dtype=dt).astype(np.float64)
    grid = Grid(dims, tuple(float(p) for p in pixdim[1:4]),
                tuple(float(o) for o in origin))
    if ncomp == 1:
        data = flat.reshape(dims, order="F")
        if kind is None:
            kind = MASK if datatype == _DT_UINT8 else INTENSITY
        return Volume3(grid, np.ascontiguousarray(data), kind)
    per = int(np.prod(dims))
    comps = [flat[c * per:(c + 1) * per].reshape(dims, order="F")
             for c in range(3)]
    return VectorField3(grid, np.ascontiguousarray(np.stack(comps)), semantics)


# ---------------------------------------------------------------------------
# Native raw + JSON sidecar


def _sidecar_path(path):
    return str(path) + ".json"


def write_raw(obj, path, dtype="float32"):
    grid, data, ncomp = _obj_info(obj)
    dt = _dtype_for(_DT_UINT8 if dtype == "uint8" else _DT_FLOAT32)
    payload = _encode_payload(data, dt, ncomp)
    header = {
        "dims": list(grid.dims),
        "spacing": list(grid.spacing),
        "origin": list(grid.origin),
        "dtype": dtype,
        "layout": "x-fastest",
        "components": ncomp,
    }
    if ncomp == 1:
        header["kind"] = obj.kind
    else:
        header["semantics"] = obj.semantics
    with open(_sidecar_path(path), "w") as fh:
        json.dump(header, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(path, "wb") as fh:
        fh.write(payload)


def read_raw(path):
    try:
        with open(_sidecar_path(path)) as fh:
            header = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise FileFormatError("bad_header", f"{path}: bad sidecar ({exc})")
    try:
        dims = tuple(int(d) for d in header["dims"])
        spacing = tuple(float(s) for s in header["spacing"])
        origin = tuple(float(o) for o in header["origin"])
        dtype = header["dtype"]
        ncomp = int(header["components"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FileFormatError("bad_header", f"{path}: incomplete sidecar ({exc})")
    if dtype not in ("float32", "uint8"):
        raise FileFormatError("unsupported_datatype",
                              f"{path}: dtype {dtype!r} not supported")
    dt = _dtype_for(_DT_UINT8 if dtype == "uint8" else _DT_FLOAT32)
    with open(path, "rb") as fh:
        payload = fh.read()
    expected = int(np.prod(dims)) * ncomp * dt.itemsize
    if len(payload) != expected:
        raise FileFormatError(
            "size_mismatch",
            f"{path}: payload is {len(payload)} bytes, expected {expected}")
    flat = np.frombuffer(payload, dtype=dt).astype(np.float64)
    grid = Grid(dims, spacing, origin)
    if ncomp == 1:
        data = np.ascontiguousarray(flat.reshape(dims, order="F"))
        return Volume3(grid, data, header.get("kind", INTENSITY))
    per = int(np.prod(dims))
    comps = [flat[c * per:(c + 1) * per].reshape(dims, order="F")
             for c in range(3)]
    return VectorField3(grid, np.ascontiguousarray(np.stack(comps)),
                        header.get("semantics", DISPLACEMENT))


# ---------------------------------------------------------------------------
# Extension dispatch


def write_volume(obj, path, dtype="float32"):
    """Write a Volume3 or VectorField3; format chosen by extension."""
    p = str(path)
    if p.endswith(".nii"):
        write_nifti(obj, p, dtype)
    elif p.endswith(".raw"):
        write_raw(obj, p, dtype)
    else:
        raise DataError(f"unknown volume extension in {path!r} (.nii or .raw)")


def read_volume(path, kind=None, semantics=DISPLACEMENT):
    """Read a volume or vector field; format chosen by extension."""
    p = str(path)
    if p.endswith(".nii"):
        return read_nifti(p, kind, semantics)
    if p.endswith(".raw"):
        return read_raw(p)
    raise DataError(f"unknown volume extension in {path!r} (.nii or .raw)")
