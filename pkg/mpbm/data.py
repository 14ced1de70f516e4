import os
import gzip
import json
import math
import struct
import hashlib
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage
from torch.utils.data import DataLoader, Dataset as TorchDataset

from loguru import logger

from mpbm.numerics import DTYPE, make_generator


# IDX type codes -> big-endian numpy dtypes
IDX_DTYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
IDX_CODES = {(dtype.kind, dtype.itemsize): code for code, dtype in IDX_DTYPES.items()}

SHIFT_KINDS = ("rotate", "intensity-invert", "gaussian-noise", "affine-warp", "channel-drop")


class IdxFormatError(ValueError):
    pass


class ShiftError(ValueError):
    pass


class ManifestError(ValueError):
    pass


class Dataset(TorchDataset):
    """
    Inputs in [0, 1] with one-hot labels.

    Args:
        inputs: N x (input shape) float64 tensor
        labels: N x K one-hot float64 tensor
    """

    def __init__(self, inputs: torch.Tensor, labels: torch.Tensor, name: str = "dataset", domain: str = "source"):
        inputs = torch.as_tensor(inputs, dtype=DTYPE)
        labels = torch.as_tensor(labels, dtype=DTYPE)
        if len(inputs) < 1:
            raise ValueError(f"Dataset {name} is empty")
        if len(inputs) != len(labels):
            raise ValueError(f"Dataset {name} has {len(inputs)} inputs but {len(labels)} labels")
        if labels.dim() != 2 or not ((labels == 0) | (labels == 1)).all() or not (labels.sum(dim=1) == 1).all():
            raise ValueError(f"Dataset {name} labels are not one-hot rows")
        if not torch.isfinite(inputs).all() or inputs.min() < 0 or inputs.max() > 1:
            raise ValueError(f"Dataset {name} inputs must be finite and lie in [0, 1]")

        self.inputs = inputs
        self.labels = labels
        self.name = name
        self.domain = domain

    def __len__(self):
        return len(self.inputs)

    def __getitem__(self, index):
        return self.inputs[index], self.labels[index]

    @property
    def num_classes(self):
        return self.labels.shape[1]

    @property
    def input_shape(self):
        return list(self.inputs.shape[1:])

    @property
    def class_indices(self):
        return self.labels.argmax(dim=1)

    def subset(self, indices) -> "Dataset":
        indices = torch.as_tensor(indices, dtype=torch.long)
        return Dataset(self.inputs[indices], self.labels[indices], name=self.name, domain=self.domain)

    def replace(self, inputs: torch.Tensor, name: str = None, domain: str = None) -> "Dataset":
        return Dataset(inputs, self.labels.clone(), name=name or self.name, domain=domain or self.domain)

    def __repr__(self):
        return f"Dataset(name={self.name}, domain={self.domain}, n={len(self)}, input_shape={self.input_shape}, classes={self.num_classes})"


def make_loader(dataset: Dataset, batch_size: int, seed: int, shuffle: bool = True, drop_last: bool = False) -> DataLoader:
    return DataLoader(
        dataset,
        batch_size=batch_size,
        shuffle=shuffle,
        drop_last=drop_last,
        generator=make_generator(seed),
    )


def one_hot(classes, num_classes: int) -> torch.Tensor:
    return F.one_hot(torch.as_tensor(classes, dtype=torch.long), num_classes).to(DTYPE)


# ##############################
# IDX format
# ##############################

def _open(path, mode="rb"):
    if str(path).endswith(".gz"):
        return gzip.open(path, mode)
    return open(path, mode)


def parse_idx(payload: bytes, source: str = "<bytes>") -> np.ndarray:
    # The file format:
    #   [0000] 2 zero bytes, 1 byte type code, 1 byte number of dimensions
    #   [0004] one big-endian uint32 extent per dimension
    #   [....] row-major big-endian data
    if len(payload) < 4:
        raise IdxFormatError(f"{source}: file too short for an IDX header ({len(payload)} bytes)")
    zero, code, ndim = struct.unpack(">HBB", payload[:4])
    if zero != 0 or code not in IDX_DTYPES or ndim == 0:
        raise IdxFormatError(f"{source}: bad magic number 0x{int.from_bytes(payload[:4], 'big'):08x}")

    header_size = 4 + 4 * ndim
    if len(payload) < header_size:
        raise IdxFormatError(f"{source}: truncated header, expected {ndim} dimensions")
    shape = struct.unpack(f">{ndim}I", payload[4:header_size])

    dtype = IDX_DTYPES[code]
    expected = math.prod(shape) * dtype.itemsize
    body = payload[header_size:]
    if len(body) != expected:
        raise IdxFormatError(f"{source}: payload has {len(body)} bytes, header {shape} requires {expected}")
    return np.frombuffer(body, dtype=dtype).reshape(shape)


def read_idx(path) -> np.ndarray:
    with _open(path) as f:
        return parse_idx(f.read(), source=str(path))


def encode_idx(array: np.ndarray) -> bytes:
    key = (array.dtype.kind, array.dtype.itemsize)
    if key not in IDX_CODES:
        raise IdxFormatError(f"dtype {array.dtype} has no IDX type code")
    code = IDX_CODES[key]
    dtype = IDX_DTYPES[code]
    header = struct.pack(">HBB", 0, code, array.ndim)
    header += struct.pack(f">{array.ndim}I", *array.shape)
    return header + np.ascontiguousarray(array, dtype=dtype).tobytes()


def write_idx(path, array: np.ndarray):
    with _open(path, "wb") as f:
        f.write(encode_idx(np.asarray(array)))


def fit_input_shape(images: torch.Tensor, input_shape) -> torch.Tensor:
    """Resizes N x H x W (or N x C x H x W) images to (C, H, W); grayscale channels are replicated."""
    if images.dim() == 3:
        images = images.unsqueeze(1)
    channels, height, width = input_shape
    if tuple(images.shape[2:]) != (height, width):
        images = F.interpolate(images, size=(height, width), mode="bilinear", align_corners=False)
    if images.shape[1] == 1 and channels > 1:
        images = images.repeat(1, channels, 1, 1)
    elif images.shape[1] != channels:
        raise ValueError(f"Cannot map {images.shape[1]} channels to {channels}")
    return images.clamp(0.0, 1.0)


def load_idx(
    images_path,
    labels_path,
    *,
    input_shape=None,
    num_classes: int = 10,
    limit: Optional[int] = None,
    name: str = "idx",
    domain: str = "source",
) -> Dataset:
    """
    Loads an IDX image/label pair, rescales pixels to [0, 1] and fits them to `input_shape`
    (e.g. 28x28 grayscale digits -> 3x32x32).
    """
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim not in (3, 4) or labels.ndim != 1:
        raise IdxFormatError(f"Expected 3-d or 4-d images and 1-d labels, got {images.shape} and {labels.shape}")
    if len(images) != len(labels):
        raise IdxFormatError(f"Count mismatch: {len(images)} images in {images_path}, {len(labels)} labels in {labels_path}")
    if limit is not None:
        images, labels = images[:limit], labels[:limit]

    if images.dtype.kind == "u" and images.dtype.itemsize == 1:
        pixels = torch.from_numpy(images.astype(np.float64) / 255.0)
    else:
        pixels = torch.from_numpy(images.astype(np.float64)).clamp(0.0, 1.0)
    if input_shape is not None:
        pixels = fit_input_shape(pixels, input_shape)

    logger.info(f"Loaded {len(pixels)} examples from {images_path} with shape {tuple(pixels.shape[1:])}")
    return Dataset(pixels, one_hot(labels.astype(np.int64), num_classes), name=name, domain=domain)


# ##############################
# Synthetic data
# ##############################

def synth_blobs(
    num_classes: int,
    n_per_class: int,
    separation: float,
    seed: int,
    std: float = 1.0,
    name: str = "blobs",
    domain: str = "source",
) -> Dataset:
    """
    2-D Gaussian clusters with centers on a circle of radius `separation`,
    mapped affinely into the unit square around (0.5, 0.5).
    """
    if num_classes < 1 or n_per_class < 1 or separation <= 0 or std <= 0:
        raise ValueError("synth_blobs parameters must be positive")
    generator = make_generator(seed)
    angles = 2 * math.pi * torch.arange(num_classes, dtype=DTYPE) / num_classes
    centers = separation * torch.stack([torch.cos(angles), torch.sin(angles)], dim=1)

    points = centers.repeat_interleave(n_per_class, dim=0)
    points = points + std * torch.randn(points.shape, generator=generator, dtype=DTYPE)
    classes = torch.arange(num_classes).repeat_interleave(n_per_class)

    radius = separation + 4 * std
    inputs = (0.5 + points / (2 * radius)).clamp(0.0, 1.0)
    return Dataset(inputs, one_hot(classes, num_classes), name=name, domain=domain)


# ##############################
# Domain shifts
# ##############################

@dataclass
class ShiftSpec:
    kind: str
    magnitude: float = 0.0
    seed: int = 0
    offset: float = 0.0
    channel: int = 0

    def __post_init__(self):
        if self.kind not in SHIFT_KINDS:
            raise ShiftError(f"Unknown shift {self.kind}, expected one of {SHIFT_KINDS}")

    def to_dict(self):
        return asdict(self)


SHIFT_PRESETS = {
    "svhn-like": [ShiftSpec("intensity-invert", 1.0), ShiftSpec("gaussian-noise", 0.1, seed=1)],
    "mnistm-like": [ShiftSpec("gaussian-noise", 0.15, seed=2), ShiftSpec("channel-drop", 0.7, channel=1)],
    "syn-like": [ShiftSpec("affine-warp", 0.3, offset=0.05), ShiftSpec("rotate", 15.0)],
    "rotate-30": [ShiftSpec("rotate", 30.0)],
    "rotate-90": [ShiftSpec("rotate", 90.0)],
}


def _rotate_images(x: torch.Tensor, degrees: float) -> torch.Tensor:
    quarter_turns = degrees / 90.0
    if float(quarter_turns).is_integer():
        k = int(quarter_turns) % 4
        if k % 2 == 1 and x.shape[-2] != x.shape[-1]:
            raise ShiftError(f"rotate by {degrees} degrees would transpose non-square images of shape {list(x.shape[1:])}")
        return torch.rot90(x, k=k, dims=(-2, -1))
    rotated = ndimage.rotate(x.numpy(), degrees, axes=(3, 2), reshape=False, order=1, mode="constant", cval=0.0)
    return torch.from_numpy(rotated)


def _warp_images(x: torch.Tensor, shear: float, offset: float) -> torch.Tensor:
    height, width = x.shape[-2:]
    matrix = np.eye(x.dim())
    matrix[-2, -1] = shear
    center = np.array([(height - 1) / 2, (width - 1) / 2])
    shift = np.zeros(x.dim())
    shift[-2:] = center - matrix[-2:, -2:] @ center - offset * np.array([height, width])
    warped = ndimage.affine_transform(x.numpy(), matrix, offset=shift, order=1, mode="constant", cval=0.0)
    return torch.from_numpy(warped)


def _rotate_points(x: torch.Tensor, degrees: float) -> torch.Tensor:
    theta = math.radians(degrees)
    rotation = torch.tensor([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]], dtype=DTYPE)
    return (x - 0.5) @ rotation.T + 0.5


def apply_shift(dataset: Dataset, shift: ShiftSpec, name: str = None) -> Dataset:
    """Transforms inputs (labels untouched), then re-clamps to [0, 1]. Magnitude 0 is the identity."""
    x = dataset.inputs.clone()
    is_image = x.dim() == 4
    is_points = x.dim() == 2 and x.shape[1] == 2

    if shift.kind in ("rotate", "affine-warp") and not (is_image or is_points):
        raise ShiftError(f"{shift.kind} needs image or 2-D point inputs, got shape {dataset.input_shape}")
    if shift.kind == "channel-drop" and not (is_image and x.shape[1] > 1):
        raise ShiftError(f"channel-drop needs multi-channel images, got shape {dataset.input_shape}")

    if shift.kind == "rotate" and shift.magnitude != 0:
        x = _rotate_images(x, shift.magnitude) if is_image else _rotate_points(x, shift.magnitude)
    elif shift.kind == "intensity-invert":
        x = (1 - shift.magnitude) * x + shift.magnitude * (1 - x)
    elif shift.kind == "gaussian-noise" and shift.magnitude != 0:
        x = x + shift.magnitude * torch.randn(x.shape, generator=make_generator(shift.seed), dtype=DTYPE)
    elif shift.kind == "affine-warp" and (shift.magnitude != 0 or shift.offset != 0):
        if is_image:
            x = _warp_images(x, shift.magnitude, shift.offset)
        else:
            shear = torch.tensor([[1.0, shift.magnitude], [0.0, 1.0]], dtype=DTYPE)
            x = (x - 0.5) @ shear.T + 0.5 + shift.offset
    elif shift.kind == "channel-drop":
        if not 0 <= shift.channel < x.shape[1]:
            raise ShiftError(f"Channel {shift.channel} out of range for {x.shape[1]} channels")
        x[:, shift.channel] = x[:, shift.channel] * (1 - shift.magnitude)

    return dataset.replace(x.clamp(0.0, 1.0), name=name)


def apply_shifts(dataset: Dataset, shifts, name: str = None, domain: str = None) -> Dataset:
    shifted = dataset
    for shift in shifts:
        if isinstance(shift, str):
            if shift not in SHIFT_PRESETS:
                raise ShiftError(f"Unknown shift preset {shift}, expected one of {list(SHIFT_PRESETS)}")
            shifted = apply_shifts(shifted, SHIFT_PRESETS[shift])
        elif isinstance(shift, dict):
            shifted = apply_shift(shifted, ShiftSpec(**shift))
        else:
            shifted = apply_shift(shifted, shift)
    return shifted.replace(shifted.inputs, name=name or dataset.name, domain=domain or dataset.domain)


# ##############################
# Manifests
# ##############################

@dataclass
class DomainSuite:
    source: Dataset
    targets: dict = field(default_factory=dict)

    @property
    def eval_sets(self):
        return {"source": self.source, **self.targets}


def sha256sum(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def load_manifest(path) -> DomainSuite:
    """
    Builds the source dataset and target domains described by a JSON manifest.

    Each entry is one of
        {"images": ..., "labels": ..., "limit": ...}           IDX file pair
        {"synthetic": "blobs", "num_classes": ..., ...}        synth_blobs arguments
        {"base": "<entry name>", "shifts": [...]}               shifted view of another entry
    Relative paths resolve against the manifest directory; listed checksums are verified.
    Every failure is reported as a ManifestError naming the manifest, the entry and the field.
    """
    if not os.path.exists(path):
        raise ManifestError(f"Manifest {path} does not exist")
    with open(path) as f:
        try:
            manifest = json.load(f)
        except json.JSONDecodeError as e:
            raise ManifestError(f"Manifest {path}: cannot parse JSON: {e}") from e
    if not isinstance(manifest, dict):
        raise ManifestError(f"Manifest {path} must be a JSON object")
    root = os.path.dirname(os.path.abspath(path))
    input_shape = manifest.get("input_shape")
    num_classes = manifest.get("num_classes", 10)
    checksums = manifest.get("checksums", {})

    for rel_path, expected in checksums.items():
        file_path = os.path.join(root, rel_path)
        if not os.path.exists(file_path):
            raise ManifestError(f"Manifest {path}: field checksums lists {file_path}, which does not exist")
        found = sha256sum(file_path)
        if found != expected:
            raise ManifestError(f"Manifest {path}: checksum mismatch for {rel_path}: expected {expected}, found {found}")

    built = {}

    def resolve(name, entry, field_name):
        file_path = os.path.join(root, entry[field_name])
        if not os.path.exists(file_path):
            raise ManifestError(f"Manifest {path}: entry {name} field {field_name} points to {file_path}, which does not exist")
        return file_path

    def build(name, entry, domain):
        if "images" in entry:
            return load_idx(
                resolve(name, entry, "images"),
                resolve(name, entry, "labels"),
                input_shape=input_shape,
                num_classes=num_classes,
                limit=entry.get("limit"),
                name=name,
                domain=domain,
            )
        if entry.get("synthetic") == "blobs":
            dataset = synth_blobs(
                entry.get("num_classes", num_classes),
                entry["n_per_class"],
                entry["separation"],
                entry.get("seed", 0),
                std=entry.get("std", 1.0),
                name=name,
                domain=domain,
            )
            return apply_shifts(dataset, entry.get("shifts", []))
        if "base" in entry:
            if entry["base"] not in built:
                raise ManifestError(f"Manifest {path}: entry {name} field base refers to unknown entry {entry['base']}")
            return apply_shifts(built[entry["base"]], entry.get("shifts", []), name=name, domain=domain)
        raise ManifestError(f"Manifest {path}: entry {name} has neither images, synthetic nor base")

    def checked_build(name, entry, domain):
        try:
            return build(name, entry, domain)
        except ManifestError:
            raise
        except KeyError as e:
            raise ManifestError(f"Manifest {path}: entry {name} is missing field {e}") from e
        except (ValueError, TypeError) as e:
            raise ManifestError(f"Manifest {path}: entry {name}: {e}") from e

    if "source" not in manifest:
        raise ManifestError(f"Manifest {path} has no source entry")
    built["source"] = checked_build("source", manifest["source"], "source")
    for name, entry in manifest.get("auxiliary", {}).items():
        built[name] = checked_build(name, entry, name)

    targets = {}
    for name, entry in manifest.get("targets", {}).items():
        targets[name] = built[name] = checked_build(name, entry, name)

    logger.info(f"Manifest {path}: source {built['source']}, targets {list(targets)}")
    return DomainSuite(source=built["source"], targets=targets)
