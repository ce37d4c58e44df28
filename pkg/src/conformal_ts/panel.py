"""Forecast panels: predictions, targets and features aligned on (t, i, j).

Axis convention used throughout the package:

* ``t`` issuance step (0-based), ``i`` variate, ``j`` horizon slot (0-based).
* Horizon slot ``j`` holds the forecast for ``j + 1`` steps ahead, so the
  value forecast at issuance ``t`` for slot ``j`` is realised at wall-clock
  step ``t + j + 1``.

Also home of the CTSB binary tensor format::

    offset  size        field
    0       5           magic b"CTSB1"
    5       1           dtype (0 = float32, 1 = float64)
    6       1           ndim
    7       8 * ndim    dims, little-endian uint64
    ...     payload     row-major little-endian values
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionError, FormatError, ParseError, ValidationError

MAGIC = b"CTSB1"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}
_HEADER_FIXED = len(MAGIC) + 2

DATASET_FILES = ("predictions.ctsb", "targets.ctsb", "features.ctsb")


@dataclass(frozen=True)
class PanelDims:
    """Sizes of a forecast panel.

    Parameters
    ----------
    T : int
        Number of issuance steps.
    p : int
        Number of variates.
    d1 : int
        Number of forecast horizons.
    d2 : int
        Feature width per variate.
    """

    T: int
    p: int
    d1: int
    d2: int

    def __post_init__(self):
        for name in ("T", "p", "d1", "d2"):
            value = getattr(self, name)
            if int(value) != value or value <= 0:
                raise DimensionError(f"{name} must be a positive integer, got {value!r}")
        if self.T < self.d1 + 2:
            raise DimensionError(
                f"T={self.T} too short for d1={self.d1}: need T >= d1 + 2"
            )

    def as_tuple(self):
        return (self.T, self.p, self.d1, self.d2)


def _as_float64(name, array, shape=None):
    arr = np.asarray(array, dtype=np.float64)
    if shape is not None and arr.shape != tuple(shape):
        raise DimensionError(f"{name} has shape {arr.shape}, expected {tuple(shape)}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains NaN or Inf")
    return arr


class PanelDataset:
    """Immutable container of ``predictions``, ``targets`` and ``features``.

    ``predictions`` and ``targets`` have shape ``(T, p, d1)``; ``features``
    has shape ``(T, p, d2)``. Arrays are stored as read-only float64.
    """

    def __init__(self, predictions, targets, features, dims=None):
        predictions = np.asarray(predictions, dtype=np.float64)
        features = np.asarray(features, dtype=np.float64)
        if predictions.ndim != 3 or features.ndim != 3:
            raise DimensionError("predictions and features must be 3-d arrays")
        if dims is None:
            T, p, d1 = predictions.shape
            dims = PanelDims(T, p, d1, features.shape[2])
        self.dims = dims
        T, p, d1, d2 = dims.as_tuple()
        self.predictions = _as_float64("predictions", predictions, (T, p, d1))
        self.targets = _as_float64("targets", targets, (T, p, d1))
        self.features = _as_float64("features", features, (T, p, d2))
        for arr in (self.predictions, self.targets, self.features):
            arr.flags.writeable = False

    def __repr__(self):
        T, p, d1, d2 = self.dims.as_tuple()
        return f"PanelDataset(T={T}, p={p}, d1={d1}, d2={d2})"

    def slice(self, start, stop):
        """Return the sub-panel of issuance steps ``[start, stop)``."""
        return PanelDataset(
            self.predictions[start:stop].copy(),
            self.targets[start:stop].copy(),
            self.features[start:stop].copy(),
        )

    @classmethod
    def from_raw_series(cls, raw_series, predictions, features):
        """Build a panel whose targets are aligned from a raw ``(T_raw, p)`` series."""
        predictions = np.asarray(predictions, dtype=np.float64)
        targets = align_targets(raw_series, predictions.shape[2])
        return cls(predictions, targets, features)


def align_targets(raw_series, d1):
    """Stack the next ``d1`` realised values of each variate.

    ``out[t, i, j] = raw_series[t + j + 1, i]`` for ``t`` in ``0 .. T_raw - d1 - 1``.

    Examples
    --------
    >>> align_targets([[1.0], [2.0], [3.0], [4.0]], 2).tolist()
    [[[2.0, 3.0]], [[3.0, 4.0]]]
    """
    raw = np.asarray(raw_series, dtype=np.float64)
    if raw.ndim == 1:
        raw = raw[:, None]
    if raw.ndim != 2:
        raise DimensionError(f"raw_series must be 2-d (T_raw, p), got ndim={raw.ndim}")
    d1 = int(d1)
    if d1 < 1 or raw.shape[0] <= d1:
        raise DimensionError(f"need T_raw > d1 >= 1, got T_raw={raw.shape[0]}, d1={d1}")
    if not np.all(np.isfinite(raw)):
        raise ValidationError("raw_series contains NaN or Inf")
    T = raw.shape[0] - d1
    # windows[t, i, k] = raw[t + k, i] for k in 0..d1
    windows = np.lib.stride_tricks.sliding_window_view(raw, d1 + 1, axis=0)
    return np.ascontiguousarray(windows[:T, :, 1:])


def compute_errors(ds):
    """Absolute forecast errors ``|predictions - targets|``, shape ``(T, p, d1)``."""
    if isinstance(ds, PanelDataset):
        yhat, y = ds.predictions, ds.targets
    else:
        yhat, y = ds
        yhat = np.asarray(yhat, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
    if yhat.shape != y.shape:
        raise DimensionError(f"shape mismatch: {yhat.shape} vs {y.shape}")
    return np.abs(yhat - y)


# ---------------------------------------------------------------------------
# CTSB tensor files


def encode_tensor(tensor):
    """Serialise one array to CTSB bytes (float32 kept, anything else as float64)."""
    arr = np.asarray(tensor)
    if arr.dtype != np.float32:
        arr = arr.astype(np.float64)
    code = _DTYPE_CODES[arr.dtype]
    if arr.ndim > 255:
        raise DimensionError("CTSB supports at most 255 dimensions")
    header = MAGIC + bytes([code, arr.ndim]) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes(order="C")
    return header + payload


def decode_tensor(buf, offset=0):
    """Parse one CTSB record from ``buf`` starting at ``offset``.

    Returns
    -------
    tensor : numpy.ndarray
    end : int
        Offset of the first byte after the record.
    """
    if len(buf) - offset < _HEADER_FIXED:
        raise FormatError("truncated header", offset)
    if buf[offset:offset + len(MAGIC)] != MAGIC:
        raise FormatError(f"bad magic {bytes(buf[offset:offset + 5])!r}", offset)
    code = buf[offset + 5]
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype byte {code}", offset + 5)
    ndim = buf[offset + 6]
    pos = offset + _HEADER_FIXED
    if len(buf) - pos < 8 * ndim:
        raise FormatError("truncated dims", pos)
    shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
    pos += 8 * ndim
    dtype = _DTYPES[code]
    count = 1
    for n in shape:
        count *= n
    nbytes = count * dtype.itemsize
    if len(buf) - pos < nbytes:
        raise FormatError(
            f"truncated payload: expected {nbytes} bytes, found {len(buf) - pos}", pos
        )
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=pos).reshape(shape)
    return arr.astype(dtype.newbyteorder("="), copy=True), pos + nbytes


def write_tensor(path, tensor):
    Path(path).write_bytes(encode_tensor(tensor))


def read_tensor(path):
    """Read a single-tensor CTSB file; trailing bytes are a format error."""
    buf = Path(path).read_bytes()
    arr, end = decode_tensor(buf)
    if end != len(buf):
        raise FormatError(f"{len(buf) - end} trailing bytes after tensor", end)
    return arr


def write_tensors(path, tensors):
    """Write a sequence of tensors as concatenated CTSB records."""
    Path(path).write_bytes(b"".join(encode_tensor(t) for t in tensors))


def read_tensors(path):
    buf = Path(path).read_bytes()
    out, pos = [], 0
    while pos < len(buf):
        arr, pos = decode_tensor(buf, pos)
        out.append(arr)
    return out


# ---------------------------------------------------------------------------
# CSV matrices


def read_csv_matrix(path):
    """Read a rectangular numeric CSV into a float64 ``(R, C)`` array.

    A single leading header line starting with ``#`` is skipped. Row numbers
    in errors are 1-based file lines.
    """
    rows = []
    width = None
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if lineno == 1 and row and row[0].lstrip().startswith("#"):
                continue
            if not row or all(not cell.strip() for cell in row):
                continue
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise ParseError(f"ragged row: {len(row)} cells, expected {width}", row=lineno)
            values = []
            for col, cell in enumerate(row, start=1):
                try:
                    values.append(float(cell))
                except ValueError:
                    raise ParseError(f"non-numeric cell {cell!r}", row=lineno, col=col) from None
            rows.append(values)
    if not rows:
        return np.zeros((0, 0))
    return np.array(rows, dtype=np.float64)


def write_csv_matrix(path, matrix, header=None):
    arr = np.asarray(matrix, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    with open(path, "w", newline="") as fh:
        if header:
            fh.write("# " + header + "\n")
        for row in arr:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


# ---------------------------------------------------------------------------
# dataset directories


def save_dataset(ds, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_tensor(directory / "predictions.ctsb", ds.predictions)
    write_tensor(directory / "targets.ctsb", ds.targets)
    write_tensor(directory / "features.ctsb", ds.features)
    (directory / "dims.txt").write_text(" ".join(str(n) for n in ds.dims.as_tuple()) + "\n")


def load_dataset(directory):
    """Load the ``predictions/targets/features.ctsb`` triple and check ``dims.txt``."""
    directory = Path(directory)
    missing = [name for name in DATASET_FILES if not (directory / name).is_file()]
    if missing:
        raise FileNotFoundError(f"dataset {directory} lacks {', '.join(missing)}")
    arrays = [read_tensor(directory / name) for name in DATASET_FILES]
    ds = PanelDataset(*arrays)
    dims_path = directory / "dims.txt"
    if dims_path.is_file():
        try:
            declared = tuple(int(tok) for tok in dims_path.read_text().split())
        except ValueError:
            raise ParseError(f"dims.txt in {directory} is not four integers") from None
        if declared != ds.dims.as_tuple():
            raise DimensionError(f"dims.txt declares {declared}, tensors give {ds.dims.as_tuple()}")
    return ds
