"""File formats: VVOL volumes, contour JSONL, streamline CSV, EMG CSV.

VVOL is a two-file format: ``<base>.vvol.json`` holds the header
(``dims``, ``spacing_mm``, ``origin_mm``, ``dtype`` of ``"f32"`` or
``"u16"``, ``order: "x-fastest"``) and ``<base>.vvol.bin`` the raw
little-endian payload.  Multi-channel grids (direction fields, tensor
fields) add a ``channels`` header field; within the stream the channel
index varies fastest, then x, then y, then z.

Everything written here is byte-deterministic: JSON is emitted with
sorted keys and no wall-clock content, floats round-trip through
``repr``.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .model import (
    ArgumentError,
    Contour,
    DirectionField,
    ElectrodeGrid,
    Image2D,
    LabelVolume,
    ScalarVolume,
    Streamline,
)

_DTYPES = {"f32": np.dtype("<f4"), "u16": np.dtype("<u2")}


def _vvol_paths(path: str) -> Tuple[str, str]:
    base = path
    for suffix in (".vvol.json", ".vvol.bin", ".json", ".bin"):
        if base.endswith(suffix):
            base = base[: -len(suffix)]
            if not base.endswith(".vvol") and suffix in (".json", ".bin"):
                base = base + ""  # plain .json/.bin already stripped
            break
    if base.endswith(".vvol"):
        base = base[: -len(".vvol")]
    return base + ".vvol.json", base + ".vvol.bin"


def write_vvol(path: str, array: np.ndarray, spacing: Sequence[float],
               origin: Sequence[float] = (0.0, 0.0, 0.0), dtype: str = "f32") -> None:
    """Write a (nx, ny, nz) or (nx, ny, nz, channels) array as VVOL."""
    if dtype not in _DTYPES:
        raise ArgumentError(f"dtype must be one of {sorted(_DTYPES)}, got {dtype!r}")
    a = np.asarray(array)
    if a.ndim == 3:
        channels = None
        flat = a.astype(_DTYPES[dtype]).ravel(order="F")
    elif a.ndim == 4:
        channels = a.shape[3]
        flat = np.moveaxis(a, -1, 0).astype(_DTYPES[dtype]).ravel(order="F")
    else:
        raise ArgumentError(f"VVOL payload must be 3D or 4D, got shape {a.shape}")
    header = {
        "dims": [int(d) for d in a.shape[:3]],
        "spacing_mm": [float(s) for s in spacing],
        "origin_mm": [float(o) for o in origin],
        "dtype": dtype,
        "order": "x-fastest",
    }
    if channels is not None:
        header["channels"] = int(channels)
    hpath, bpath = _vvol_paths(path)
    with open(hpath, "w") as f:
        json.dump(header, f, sort_keys=True, indent=2)
        f.write("\n")
    with open(bpath, "wb") as f:
        f.write(flat.tobytes())


def read_vvol(path: str) -> Tuple[np.ndarray, Tuple[float, ...], Tuple[float, ...], str]:
    """Read a VVOL pair; returns (array, spacing, origin, dtype_code)."""
    hpath, bpath = _vvol_paths(path)
    with open(hpath) as f:
        header = json.load(f)
    dims = tuple(int(d) for d in header["dims"])
    dtype = header["dtype"]
    if dtype not in _DTYPES:
        raise ArgumentError(f"unknown VVOL dtype {dtype!r}")
    if header.get("order", "x-fastest") != "x-fastest":
        raise ArgumentError(f"unsupported VVOL order {header.get('order')!r}")
    channels = header.get("channels")
    raw = np.fromfile(bpath, dtype=_DTYPES[dtype])
    expect = int(np.prod(dims)) * (channels or 1)
    if raw.size != expect:
        raise ArgumentError(f"VVOL payload has {raw.size} values, header implies {expect}")
    if channels is None:
        a = raw.reshape(dims, order="F")
    else:
        a = np.moveaxis(raw.reshape((channels,) + dims, order="F"), 0, -1)
    spacing = tuple(float(s) for s in header["spacing_mm"])
    origin = tuple(float(o) for o in header.get("origin_mm", (0.0, 0.0, 0.0)))
    return a, spacing, origin, dtype


# ---------------------------------------------------------------------------
# typed wrappers

def write_scalar_volume(path: str, vol: ScalarVolume) -> None:
    write_vvol(path, vol.data, vol.spacing, vol.origin, dtype="f32")


def read_scalar_volume(path: str) -> ScalarVolume:
    a, spacing, origin, dtype = read_vvol(path)
    if dtype != "f32" or a.ndim != 3:
        raise ArgumentError(f"{path} is not a scalar volume")
    return ScalarVolume(data=a.astype(np.float64), spacing=spacing, origin=origin)


def write_label_volume(path: str, vol: LabelVolume) -> None:
    write_vvol(path, vol.data, vol.spacing, vol.origin, dtype="u16")


def read_label_volume(path: str) -> LabelVolume:
    a, spacing, origin, dtype = read_vvol(path)
    if dtype != "u16" or a.ndim != 3:
        raise ArgumentError(f"{path} is not a label volume")
    return LabelVolume(data=a, spacing=spacing, origin=origin)


def write_image2d(path: str, img: Image2D) -> None:
    write_vvol(path, img.data[:, :, None], (img.spacing[0], img.spacing[1], 1.0), dtype="f32")


def read_image2d(path: str) -> Image2D:
    a, spacing, _origin, dtype = read_vvol(path)
    if dtype != "f32" or a.ndim != 3 or a.shape[2] != 1:
        raise ArgumentError(f"{path} is not a 2D image")
    return Image2D(data=a[:, :, 0].astype(np.float64), spacing=spacing[:2])


def write_direction_field(path: str, field: DirectionField) -> None:
    stack = np.concatenate([field.unit, field.magnitude[:, :, None]], axis=2)
    write_vvol(path, stack[:, :, None, :], (field.spacing[0], field.spacing[1], 1.0), dtype="f32")


def read_direction_field(path: str) -> DirectionField:
    a, spacing, _origin, dtype = read_vvol(path)
    if dtype != "f32" or a.ndim != 4 or a.shape[2] != 1 or a.shape[3] != 3:
        raise ArgumentError(f"{path} is not a direction field")
    a = a[:, :, 0, :].astype(np.float64)
    mag = a[:, :, 2]
    unit = a[:, :, :2]
    # f32 storage erodes unit norms; renormalise live pixels on load
    live = mag > 0
    norms = np.linalg.norm(unit[live], axis=1)
    unit[live] /= norms[:, None]
    unit[~live] = 0.0
    return DirectionField(unit=unit, magnitude=mag, spacing=spacing[:2])


def write_tensor_field(path: str, components: np.ndarray, spacing, origin) -> None:
    """components: (nx, ny, nz, 6) as (Dxx, Dyy, Dzz, Dxy, Dxz, Dyz)."""
    if components.ndim != 4 or components.shape[3] != 6:
        raise ArgumentError(f"tensor components must be (nx, ny, nz, 6), got {components.shape}")
    write_vvol(path, components, spacing, origin, dtype="f32")


def read_tensor_field(path: str) -> Tuple[np.ndarray, Tuple[float, ...], Tuple[float, ...]]:
    a, spacing, origin, dtype = read_vvol(path)
    if dtype != "f32" or a.ndim != 4 or a.shape[3] != 6:
        raise ArgumentError(f"{path} is not a tensor field")
    return a.astype(np.float64), spacing, origin


# ---------------------------------------------------------------------------
# contours: JSON lines, one contour per line

def write_contours(path: str, contours: Sequence[Contour]) -> None:
    with open(path, "w") as f:
        for c in contours:
            rec = {
                "closed": c.closed,
                "label": c.label,
                "points": [[float(x), float(y)] for x, y in c.points],
                "slice_z": float(c.slice_z),
            }
            f.write(json.dumps(rec, sort_keys=True))
            f.write("\n")


def read_contours(path: str) -> List[Contour]:
    out: List[Contour] = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            out.append(Contour(points=np.asarray(rec["points"], dtype=np.float64),
                               slice_z=rec.get("slice_z", 0.0),
                               label=rec.get("label", 1),
                               closed=rec.get("closed", True)))
    return out


# ---------------------------------------------------------------------------
# streamlines: CSV (tract_id, point_idx, x_mm, y_mm, z_mm)

def write_streamlines(path: str, tracks: Sequence[Streamline]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["tract_id", "point_idx", "x_mm", "y_mm", "z_mm"])
        for tid, s in enumerate(tracks):
            for pid, (x, y, z) in enumerate(s.points):
                w.writerow([tid, pid, repr(float(x)), repr(float(y)), repr(float(z))])


def read_streamlines(path: str) -> List[Streamline]:
    rows: Dict[int, List[Tuple[int, float, float, float]]] = {}
    with open(path, newline="") as f:
        r = csv.reader(f)
        header = next(r)
        if header[:5] != ["tract_id", "point_idx", "x_mm", "y_mm", "z_mm"]:
            raise ArgumentError(f"{path} is not a streamline CSV")
        for row in r:
            if not row:
                continue
            tid = int(row[0])
            rows.setdefault(tid, []).append((int(row[1]), float(row[2]), float(row[3]), float(row[4])))
    out = []
    for tid in sorted(rows):
        pts = sorted(rows[tid])
        out.append(Streamline(points=np.asarray([p[1:] for p in pts]), seed_id=tid))
    return out


# ---------------------------------------------------------------------------
# EMG trials: CSV, rows = samples, columns = channels, header = electrode ids

def write_emg_trial(path: str, samples: np.ndarray, channel_ids: Optional[Sequence[str]] = None) -> None:
    """samples: (n_samples, n_channels) mV."""
    s = np.asarray(samples, dtype=np.float64)
    if s.ndim != 2:
        raise ArgumentError(f"EMG samples must be 2D, got shape {s.shape}")
    if channel_ids is None:
        channel_ids = [f"ch{i:03d}" for i in range(s.shape[1])]
    if len(channel_ids) != s.shape[1]:
        raise ArgumentError("channel id count does not match sample columns")
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(list(channel_ids))
        for row in s:
            w.writerow([repr(float(v)) for v in row])


def read_emg_trial(path: str) -> Tuple[np.ndarray, List[str]]:
    with open(path, newline="") as f:
        r = csv.reader(f)
        ids = next(r)
        data = [[float(v) for v in row] for row in r if row]
    return np.asarray(data, dtype=np.float64), list(ids)


# ---------------------------------------------------------------------------
# electrode grids and generic JSON

def grid_to_dict(g: ElectrodeGrid) -> dict:
    return {
        "rows": g.rows, "cols": g.cols, "pitch_mm": g.pitch_mm,
        "origin": list(g.origin), "ex": list(g.ex), "ey": list(g.ey),
        "gap_after_row": g.gap_after_row, "gap_mm": g.gap_mm,
    }


def grid_from_dict(d: dict) -> ElectrodeGrid:
    return ElectrodeGrid(rows=d["rows"], cols=d["cols"], pitch_mm=d["pitch_mm"],
                         origin=tuple(d.get("origin", (0, 0, 0))),
                         ex=tuple(d.get("ex", (1, 0, 0))), ey=tuple(d.get("ey", (0, 1, 0))),
                         gap_after_row=d.get("gap_after_row", -1), gap_mm=d.get("gap_mm", 0.0))


def write_grid(path: str, g: ElectrodeGrid) -> None:
    write_json(path, grid_to_dict(g))


def read_grid(path: str) -> ElectrodeGrid:
    return grid_from_dict(read_json(path))


def _jsonable(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serialisable: {type(obj).__name__}")


def write_json(path: str, obj) -> None:
    with open(path, "w") as f:
        json.dump(obj, f, sort_keys=True, indent=2, default=_jsonable)
        f.write("\n")


def read_json(path: str):
    with open(path) as f:
        return json.load(f)


def sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def ensure_dir(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path
