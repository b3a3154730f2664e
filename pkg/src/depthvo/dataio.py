"""Dataset ingestion, depth-raster file format and trajectory files.

Depth raster binary layout (little-endian), extension ``.idr``:

    bytes 0..3    magic "IDR1"
    bytes 4..7    width  (u32)
    bytes 8..11   height (u32)
    bytes 12..19  frame id (u64)
    bytes 20..27  units tag, NUL-padded ASCII ("inv_m")
    bytes 28..    row-major float32 inverse depth (1/m), NaN = invalid

A text sidecar at ``<path>.meta`` holds ``key = value`` metadata
(fx, fy, cx, cy, source). Finite payload values must be positive.
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import (
    BadMagic,
    DataError,
    LengthMismatch,
    MissingCalibration,
    NonMonotonicNames,
    NonPositiveValue,
    SizeMismatch,
    UnreadableImage,
)
from .geometry import CameraModel, Pose

RASTER_MAGIC = b"IDR1"
RASTER_UNITS = "inv_m"
_HEADER = struct.Struct("<4sIIQ8s")


@dataclass
class DepthRasterFile:
    values: np.ndarray  # (H, W) float32, inverse meters, NaN = invalid
    frame_id: int = 0
    meta: dict = field(default_factory=dict)


def write_depth_raster(path, raster: DepthRasterFile):
    values = np.asarray(raster.values, dtype=np.float32)
    if values.ndim != 2:
        raise SizeMismatch("raster must be a 2-D array")
    finite = values[np.isfinite(values)]
    if finite.size and np.min(finite) <= 0.0:
        raise NonPositiveValue("inverse depth values must be positive")
    header = _HEADER.pack(RASTER_MAGIC, values.shape[1], values.shape[0],
                          int(raster.frame_id), RASTER_UNITS.encode().ljust(8, b"\0"))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(values.astype("<f4").tobytes())
    if raster.meta:
        with open(str(path) + ".meta", "w") as fh:
            for key, value in raster.meta.items():
                fh.write(f"{key} = {value}\n")


def read_depth_raster(path) -> DepthRasterFile:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise BadMagic(f"{path}: truncated header")
    magic, width, height, frame_id, units = _HEADER.unpack_from(blob)
    if magic != RASTER_MAGIC:
        raise BadMagic(f"{path}: magic {magic!r}")
    if units.rstrip(b"\0").decode(errors="replace") != RASTER_UNITS:
        raise BadMagic(f"{path}: unexpected units tag {units!r}")
    expected = width * height * 4
    payload = blob[_HEADER.size:]
    if len(payload) != expected:
        raise SizeMismatch(f"{path}: payload {len(payload)} bytes, expected {expected}")
    values = np.frombuffer(payload, dtype="<f4").reshape(height, width).copy()
    finite = values[np.isfinite(values)]
    if finite.size and np.min(finite) <= 0.0:
        raise NonPositiveValue(f"{path}: non-positive inverse depth in payload")
    meta = {}
    meta_path = Path(str(path) + ".meta")
    if meta_path.exists():
        for line in meta_path.read_text().splitlines():
            if "=" in line:
                key, value = line.split("=", 1)
                meta[key.strip()] = value.strip()
    return DepthRasterFile(values=values, frame_id=frame_id, meta=meta)


# -- image sequences ---------------------------------------------------------

_IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".pgm", ".bmp", ".tif", ".tiff"}


@dataclass
class FrameSequence:
    camera: CameraModel
    frames: list  # [(index, path)]

    def __len__(self):
        return len(self.frames)

    def __iter__(self):
        for index, path in self.frames:
            yield index, load_gray_image(path)


def load_gray_image(path):
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("L"), dtype=float)
    except (UnidentifiedImageError, OSError) as exc:
        raise UnreadableImage(f"{path}: {exc}") from exc


def parse_kitti_calib(path, key="P0"):
    """fx, fy, cx, cy from a KITTI projection-matrix row."""
    for line in Path(path).read_text().splitlines():
        if line.startswith(key + ":"):
            vals = [float(tok) for tok in line.split(":", 1)[1].split()]
            if len(vals) != 12:
                raise MissingCalibration(f"{path}: {key} row must have 12 entries")
            return vals[0], vals[5], vals[2], vals[6]
    raise MissingCalibration(f"{path}: no {key} row")


def _indexed_files(directory):
    files = sorted(p for p in Path(directory).iterdir()
                   if p.suffix.lower() in _IMAGE_SUFFIXES)
    if not files:
        raise DataError(f"{directory}: no image files")
    indexed = []
    for pos, p in enumerate(files):
        m = re.findall(r"\d+", p.stem)
        if not m:
            raise NonMonotonicNames(f"{directory}: {p.name} carries no frame index")
        indexed.append((int(m[-1]), p))
    indices = [i for i, _ in indexed]
    if any(b <= a for a, b in zip(indices, indices[1:])):
        raise NonMonotonicNames(f"{directory}: file indices are not strictly increasing")
    return indexed


def load_sequence(path, fmt="kitti_gray", camera=None) -> FrameSequence:
    """Ordered stream of grayscale frames plus the camera model.

    kitti_gray: ``<path>/image_0/*.png`` with ``<path>/calib.txt``;
    image_dir: images directly under ``path``, camera supplied by caller.
    """
    path = Path(path)
    if fmt == "kitti_gray":
        calib = path / "calib.txt"
        if not calib.exists():
            raise MissingCalibration(f"{calib} not found")
        img_dir = path / "image_0"
        if not img_dir.is_dir():
            raise DataError(f"{img_dir}: missing image directory")
        frames = _indexed_files(img_dir)
        fx, fy, cx, cy = parse_kitti_calib(calib)
        probe = load_gray_image(frames[0][1])
        cam = CameraModel(fx, fy, cx, cy, probe.shape[1], probe.shape[0])
        return FrameSequence(camera=cam, frames=frames)
    if fmt == "image_dir":
        if camera is None:
            raise MissingCalibration("image_dir format needs explicit camera parameters")
        return FrameSequence(camera=camera, frames=_indexed_files(path))
    raise ValueError(f"unknown sequence format {fmt!r}")


# -- trajectory files --------------------------------------------------------


def write_trajectory(entries, path, fmt="kitti"):
    """entries: iterable of (timestamp/index, Pose) with camera-to-world poses."""
    entries = list(entries)
    if not entries:
        raise DataError("refusing to write an empty trajectory")
    with open(path, "w") as fh:
        for stamp, pose in entries:
            if fmt == "kitti":
                row = np.hstack([pose.R, pose.t[:, None]]).reshape(-1)
                fh.write(" ".join(f"{v:.12g}" for v in row) + "\n")
            elif fmt == "tum":
                from scipy.spatial.transform import Rotation
                q = Rotation.from_matrix(pose.R).as_quat()  # x, y, z, w
                fields = [float(stamp), *pose.t, *q]
                fh.write(" ".join(f"{v:.12g}" for v in fields) + "\n")
            else:
                raise ValueError(f"unknown trajectory format {fmt!r}")


def read_trajectory(path, fmt=None):
    """Returns (stamps, poses). fmt auto-detected from the column count."""
    stamps, poses = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh):
            fields = line.split()
            if not fields:
                continue
            try:
                vals = [float(tok) for tok in fields]
            except ValueError as exc:
                raise DataError(f"{path}:{lineno + 1}: {exc}") from exc
            kind = fmt or ("kitti" if len(vals) == 12 else "tum")
            if kind == "kitti":
                if len(vals) != 12:
                    raise DataError(f"{path}:{lineno + 1}: expected 12 values")
                M = np.array(vals).reshape(3, 4)
                stamps.append(float(len(stamps)))
                poses.append(Pose(M[:, :3], M[:, 3]))
            else:
                if len(vals) != 8:
                    raise DataError(f"{path}:{lineno + 1}: expected 8 values")
                from scipy.spatial.transform import Rotation
                stamps.append(vals[0])
                R = Rotation.from_quat(vals[4:8]).as_matrix()
                poses.append(Pose(R, np.array(vals[1:4])))
    return stamps, poses
