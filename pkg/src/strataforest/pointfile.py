"""Point cloud ingestion: the whitespace ASCII format
(x y z intensity return_number label, label -1 = unlabeled, # comments
ignored) and uncompressed LAS 1.2 point record formats 0 and 1."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .core import N_CLASSES, UNLABELED, PlotCloud, StrataError

ASCII_SUFFIXES = (".txt", ".xyz", ".pts")


class PointFormatError(StrataError):
    pass


def read_points(path, plot_id: str | None = None) -> PlotCloud:
    """Load a plot from disk; the plot id defaults to the file stem and the
    bounding box comes from the points themselves."""
    path = Path(path)
    if not path.exists():
        raise PointFormatError(f"{path}: no such file")
    suffix = path.suffix.lower()
    if suffix in ASCII_SUFFIXES:
        return _read_ascii(path, plot_id or path.stem)
    if suffix == ".las":
        return _read_las(path, plot_id or path.stem)
    raise PointFormatError(f"{path}: unsupported point file extension "
                           f"'{suffix}' (expected one of "
                           f"{ASCII_SUFFIXES + ('.las',)})")


def _read_ascii(path: Path, plot_id: str) -> PlotCloud:
    xs, ys, zs, intens, rets, labels = [], [], [], [], [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split()
            if len(fields) != 6:
                raise PointFormatError(
                    f"{path}:{lineno}: expected 6 columns, found {len(fields)}")
            try:
                x, y, z = float(fields[0]), float(fields[1]), float(fields[2])
                intensity = int(float(fields[3]))
                ret = int(float(fields[4]))
                label = int(float(fields[5]))
            except ValueError as exc:
                raise PointFormatError(f"{path}:{lineno}: {exc}") from exc
            if z < 0:
                raise PointFormatError(
                    f"{path}:{lineno}: elevation must be >= 0, got {z}")
            if ret < 1:
                raise PointFormatError(
                    f"{path}:{lineno}: return number must be >= 1, got {ret}")
            if label != UNLABELED and not 0 <= label < N_CLASSES:
                raise PointFormatError(
                    f"{path}:{lineno}: label must be -1 or 0..5, got {label}")
            xs.append(x)
            ys.append(y)
            zs.append(z)
            intens.append(intensity)
            rets.append(ret)
            labels.append(label)
    if not xs:
        raise PointFormatError(f"{path}: no points")
    return PlotCloud.from_arrays(plot_id, xs, ys, zs, intens, rets, labels)


def write_points(cloud: PlotCloud, path) -> None:
    """Write the ASCII point format with a column header comment."""
    with open(path, "w") as fh:
        fh.write("# x y z intensity return_number label\n")
        for i in range(cloud.n_points):
            fh.write(f"{float(cloud.x[i])!r} {float(cloud.y[i])!r} "
                     f"{float(cloud.z[i])!r} {int(cloud.intensity[i])} "
                     f"{int(cloud.return_number[i])} {int(cloud.label[i])}\n")


def _read_las(path: Path, plot_id: str) -> PlotCloud:
    """Uncompressed LAS 1.2, point formats 0 and 1. Classification bytes are
    not this package's taxonomy, so every point comes back unlabeled."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 227:
        raise PointFormatError(f"{path}: truncated LAS header")
    if data[:4] != b"LASF":
        raise PointFormatError(f"{path}: not a LAS file (bad signature)")
    major, minor = data[24], data[25]
    if (major, minor) != (1, 2):
        raise PointFormatError(
            f"{path}: unsupported LAS version {major}.{minor} (need 1.2)")
    (offset_to_points,) = struct.unpack_from("<I", data, 96)
    fmt_id = data[104]
    (record_len,) = struct.unpack_from("<H", data, 105)
    (n_points,) = struct.unpack_from("<I", data, 107)
    if fmt_id & 0x80:
        raise PointFormatError(f"{path}: compressed LAS (LAZ) is unsupported")
    if fmt_id not in (0, 1):
        raise PointFormatError(
            f"{path}: unsupported point record format {fmt_id} (need 0 or 1)")
    expected_len = 20 if fmt_id == 0 else 28
    if record_len < expected_len:
        raise PointFormatError(
            f"{path}: record length {record_len} below format minimum")
    scales = struct.unpack_from("<3d", data, 131)
    offsets = struct.unpack_from("<3d", data, 155)
    need = offset_to_points + n_points * record_len
    if len(data) < need:
        raise PointFormatError(f"{path}: truncated point payload")

    raw = np.frombuffer(data, dtype=np.uint8,
                        count=n_points * record_len,
                        offset=offset_to_points).reshape(n_points, record_len)
    xyz_raw = raw[:, :12].copy().view("<i4").reshape(n_points, 3)
    intensity = raw[:, 12:14].copy().view("<u2").ravel().astype(np.int64)
    flags = raw[:, 14]
    return_number = (flags & 0x07).astype(np.int64)
    return_number = np.maximum(return_number, 1)  # 0 is out of spec; clamp up

    x = xyz_raw[:, 0] * scales[0] + offsets[0]
    y = xyz_raw[:, 1] * scales[1] + offsets[1]
    z = xyz_raw[:, 2] * scales[2] + offsets[2]
    if n_points and z.min() < 0:
        raise PointFormatError(
            f"{path}: negative elevations; inputs must be ground-normalized")
    labels = np.full(n_points, UNLABELED, dtype=np.int64)
    if n_points == 0:
        raise PointFormatError(f"{path}: no points")
    return PlotCloud.from_arrays(plot_id, x, y, z, intensity, return_number,
                                 labels)
