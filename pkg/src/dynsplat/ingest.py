"""Frame sequence loading and artifact export.

Expected dataset layout under a root directory:

    root/images/%06d.png   8-bit RGB
    root/depth/%06d.png    16-bit grayscale; value * depth_scale = scene units
    root/masks/%06d.png    8-bit; >= 128 means tissue, else tool/invalid
    root/camera.json       fx, fy, cx, cy, width, height, near, far,
                           depth_scale, extrinsics (16 floats, row-major
                           world-to-camera)

Depth value 0 marks invalid pixels (stereo holes); such pixels are
excluded from every loss even where the tissue mask is set.  Frame times
are the normalized index i / (T - 1), and every 8th frame (0-indexed
7, 15, ...) is tagged as test, a 7:1 train/test ratio.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .core import CameraModel, DatasetError, InvalidInputError

TEST_EVERY = 8


@dataclass
class Frame:
    image: np.ndarray        # (H, W, 3) float in [0, 1]
    depth: np.ndarray        # (H, W) scene units, 0 = invalid
    tissue_mask: np.ndarray  # (H, W) bool, True = tissue
    time: float              # normalized to [0, 1]

    def __post_init__(self):
        shape = self.image.shape[:2]
        if self.depth.shape != shape or self.tissue_mask.shape != shape:
            raise InvalidInputError("frame image/depth/mask shapes differ")
        if np.any(self.depth < 0):
            raise InvalidInputError("negative depth values")

    @property
    def valid_depth(self):
        return self.depth > 0.0


@dataclass
class FrameSequence:
    frames: list
    camera: CameraModel
    split: np.ndarray        # per-frame tag, 'train' or 'test'
    depth_scale: float = 1.0

    def __len__(self):
        return len(self.frames)

    @property
    def train_indices(self):
        return [i for i, s in enumerate(self.split) if s == "train"]

    @property
    def test_indices(self):
        return [i for i, s in enumerate(self.split) if s == "test"]


def assign_split(num_frames):
    """Every 8th frame is a test frame: indices 7, 15, 23, ..."""
    return np.array(["test" if i % TEST_EVERY == TEST_EVERY - 1 else "train"
                     for i in range(num_frames)])


def frame_times(num_frames):
    if num_frames == 1:
        return np.zeros(1)
    return np.arange(num_frames, dtype=np.float64) / (num_frames - 1)


# ---------------------------------------------------------------------------
# Image / depth / mask files


def load_image(path):
    try:
        img = Image.open(path).convert("RGB")
    except Exception as exc:
        raise DatasetError(f"cannot read image {path}: {exc}") from exc
    return np.asarray(img, dtype=np.float64) / 255.0


def save_image(image, path):
    """Quantize an [0, 1] float image to 8-bit PNG.

    Returns the number of values clamped into range.
    """
    arr = np.asarray(image, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("non-finite image values")
    q = np.round(arr * 255.0)
    clamped = int(np.sum((q < 0) | (q > 255)))
    if clamped:
        import warnings
        warnings.warn(f"save_image: clamped {clamped} out-of-range values")
    q = np.clip(q, 0, 255).astype(np.uint8)
    Image.fromarray(q, mode="RGB").save(path)
    return clamped


def load_depth(path, depth_scale):
    try:
        img = Image.open(path)
    except Exception as exc:
        raise DatasetError(f"cannot read depth map {path}: {exc}") from exc
    arr = np.asarray(img)
    if arr.ndim != 2:
        raise DatasetError(f"depth map {path} is not single-channel")
    return arr.astype(np.float64) * depth_scale


def save_depth(depth, depth_scale, path):
    """Quantize depth to 16-bit integers = round(value / depth_scale).

    Returns the number of values clamped to [0, 65535].
    """
    arr = np.asarray(depth, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("non-finite depth values")
    q = np.round(arr / depth_scale)
    clamped = int(np.sum((q < 0) | (q > 65535)))
    if clamped:
        import warnings
        warnings.warn(f"save_depth: clamped {clamped} out-of-range values")
    q = np.clip(q, 0, 65535).astype(np.uint16)
    Image.fromarray(q).save(path)
    return clamped


def load_mask(path):
    try:
        img = Image.open(path).convert("L")
    except Exception as exc:
        raise DatasetError(f"cannot read mask {path}: {exc}") from exc
    return np.asarray(img) >= 128


def save_mask(mask, path):
    arr = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


# ---------------------------------------------------------------------------
# Camera config


def load_camera_config(path):
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"camera config missing: {path}")
    try:
        cfg = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"unreadable camera config {path}: {exc}") from exc
    required = ["fx", "fy", "cx", "cy", "width", "height", "near", "far",
                "depth_scale", "extrinsics"]
    missing = [k for k in required if k not in cfg]
    if missing:
        raise DatasetError(f"camera config {path} missing fields {missing}")
    extr = np.asarray(cfg["extrinsics"], dtype=np.float64)
    if extr.size != 16:
        raise DatasetError(f"camera config {path}: extrinsics needs 16 numbers")
    cam = CameraModel(fx=cfg["fx"], fy=cfg["fy"], cx=cfg["cx"], cy=cfg["cy"],
                      width=int(cfg["width"]), height=int(cfg["height"]),
                      near=cfg["near"], far=cfg["far"],
                      extrinsics=extr.reshape(4, 4))
    return cam, float(cfg["depth_scale"])


def save_camera_config(cam, depth_scale, path):
    cfg = {"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
           "width": cam.width, "height": cam.height,
           "near": cam.near, "far": cam.far, "depth_scale": depth_scale,
           "extrinsics": [float(v) for v in cam.extrinsics.reshape(-1)]}
    Path(path).write_text(json.dumps(cfg, indent=2) + "\n")


# ---------------------------------------------------------------------------
# Dataset


def load_dataset(root_path):
    """Load a frame sequence from the documented directory layout.

    Frames are sorted by filename; images, depth maps, and masks are
    matched by position after sorting and must agree in count and size.
    """
    root = Path(root_path)
    if not root.is_dir():
        raise DatasetError(f"dataset root not found: {root}")
    cam, depth_scale = load_camera_config(root / "camera.json")

    def listing(sub):
        d = root / sub
        if not d.is_dir():
            raise DatasetError(f"missing dataset directory: {d}")
        files = sorted(p for p in d.iterdir() if p.suffix.lower() == ".png")
        if not files:
            raise DatasetError(f"no .png files in {d}")
        return files

    image_files = listing("images")
    depth_files = listing("depth")
    mask_files = listing("masks")
    if not (len(image_files) == len(depth_files) == len(mask_files)):
        raise DatasetError(
            f"frame count mismatch: {len(image_files)} images, "
            f"{len(depth_files)} depth maps, {len(mask_files)} masks")

    times = frame_times(len(image_files))
    frames = []
    for i, (fi, fd, fm) in enumerate(zip(image_files, depth_files, mask_files)):
        image = load_image(fi)
        depth = load_depth(fd, depth_scale)
        mask = load_mask(fm)
        if depth.shape != image.shape[:2] or mask.shape != image.shape[:2]:
            raise DatasetError(
                f"dimension mismatch at frame {i}: image {fi} is "
                f"{image.shape[:2]}, depth {fd} is {depth.shape}, "
                f"mask {fm} is {mask.shape}")
        if (image.shape[0], image.shape[1]) != (cam.height, cam.width):
            raise DatasetError(
                f"frame {fi} size {image.shape[:2]} does not match camera "
                f"config ({cam.height}, {cam.width})")
        frames.append(Frame(image, depth, mask, float(times[i])))

    return FrameSequence(frames, cam, assign_split(len(frames)), depth_scale)


# ---------------------------------------------------------------------------
# PLY point clouds

_PLY_HEADER = """ply
format binary_little_endian 1.0
element vertex {count}
property float x
property float y
property float z
property uchar red
property uchar green
property uchar blue
end_header
"""


def export_ply(points, path):
    """Write (position, color) pairs as a binary little-endian PLY.

    positions are float32 x, y, z; colors quantized to uint8 r, g, b.
    """
    points = list(points)
    for pos, col in points:
        if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(col))):
            raise InvalidInputError("non-finite point or color")
    try:
        with open(path, "wb") as f:
            f.write(_PLY_HEADER.format(count=len(points)).encode("ascii"))
            for pos, col in points:
                rgb = np.clip(np.round(np.asarray(col) * 255.0), 0, 255)
                f.write(struct.pack("<fffBBB", float(pos[0]), float(pos[1]),
                                    float(pos[2]), int(rgb[0]), int(rgb[1]),
                                    int(rgb[2])))
    except OSError as exc:
        raise DatasetError(f"cannot write PLY {path}: {exc}") from exc


def load_ply(path):
    """Read a PLY written by export_ply; returns (positions, colors)."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise DatasetError(f"cannot read PLY {path}: {exc}") from exc
    end = data.find(b"end_header\n")
    if end < 0:
        raise DatasetError(f"{path}: not a PLY file")
    header = data[:end].decode("ascii", errors="replace")
    count = 0
    for line in header.splitlines():
        if line.startswith("element vertex"):
            count = int(line.split()[-1])
    body = data[end + len(b"end_header\n"):]
    record = struct.Struct("<fffBBB")
    if len(body) < record.size * count:
        raise DatasetError(f"{path}: truncated PLY body")
    positions = np.empty((count, 3))
    colors = np.empty((count, 3))
    for i in range(count):
        x, y, z, r, g, b = record.unpack_from(body, i * record.size)
        positions[i] = (x, y, z)
        colors[i] = (r / 255.0, g / 255.0, b / 255.0)
    return positions, colors
