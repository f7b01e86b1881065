"""Binary masks and viewpoint area ratios.

Masks are read from 8-bit grayscale files (binary PGM or the raw
``MSK1`` format). A sample with stem ``s`` has four files:
``s.fg.pgm``, ``s.front.pgm``, ``s.side.pgm`` and ``s.rear.pgm``.
"""
from __future__ import annotations

import os
import re
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, EmptyForeground, IoFailure, MalformedFile

THRESHOLD = 128
SIDES = ("front", "side", "rear")
RATIO_EPS = 1e-9


@dataclass(frozen=True)
class BinaryMask:
    """Row-major {0,1} pixel grid."""

    width: int
    height: int
    bits: np.ndarray

    def __post_init__(self):
        bits = np.ascontiguousarray(self.bits, dtype=np.uint8).reshape(-1)
        if self.width <= 0 or self.height <= 0:
            raise MalformedFile(f"bad mask dimensions {self.width}x{self.height}")
        if bits.size != self.width * self.height:
            raise MalformedFile(
                f"mask has {bits.size} pixels, expected {self.width * self.height}")
        if bits.size and bits.max() > 1:
            raise MalformedFile("mask bits must be 0 or 1")
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)

    @classmethod
    def from_array(cls, array):
        array = np.asarray(array)
        if array.ndim != 2:
            raise MalformedFile("mask array must be 2-D")
        return cls(array.shape[1], array.shape[0], (array != 0).astype(np.uint8))

    @property
    def shape(self):
        return (self.height, self.width)

    def popcount(self):
        return int(np.count_nonzero(self.bits))

    def to_array(self):
        return self.bits.reshape(self.height, self.width)


@dataclass(frozen=True)
class MaskSet:
    foreground: BinaryMask
    front: BinaryMask
    side: BinaryMask
    rear: BinaryMask

    def _check_dims(self):
        shape = self.foreground.shape
        for name in SIDES:
            if getattr(self, name).shape != shape:
                raise DimensionMismatch(
                    f"{name} mask is {getattr(self, name).shape}, foreground is {shape}")


@dataclass(frozen=True)
class AreaRatios:
    front: float
    side: float
    rear: float

    def __post_init__(self):
        for name in SIDES:
            value = getattr(self, name)
            if not (0.0 <= value <= 1.0):
                raise ValueError(f"area ratio {name}={value} outside [0, 1]")

    def as_array(self):
        return np.array([self.front, self.side, self.rear], dtype=np.float64)

    @classmethod
    def from_array(cls, values):
        front, side, rear = (float(v) for v in values)
        return cls(front, side, rear)


_PGM_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _parse_pgm(data):
    # P5 header: magic, width, height, maxval, single whitespace, then pixels
    pos = 2
    fields = []
    for _ in range(3):
        m = _PGM_TOKEN.match(data, pos)
        if m is None:
            raise MalformedFile("truncated PGM header")
        fields.append(m.group(1))
        pos = m.end()
    try:
        width, height, maxval = (int(f) for f in fields)
    except ValueError as exc:
        raise MalformedFile(f"non-numeric PGM header field: {exc}") from None
    if maxval != 255:
        raise MalformedFile(f"unsupported PGM maxval {maxval}")
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise MalformedFile("missing whitespace after PGM header")
    return width, height, data[pos + 1:]


def _parse_msk(data):
    newline = data.find(b"\n")
    if newline < 0:
        raise MalformedFile("MSK1 header missing newline")
    parts = data[:newline].split()
    if len(parts) != 3:
        raise MalformedFile("MSK1 header must be 'MSK1 <width> <height>'")
    try:
        width, height = int(parts[1]), int(parts[2])
    except ValueError:
        raise MalformedFile("non-numeric MSK1 dimensions") from None
    return width, height, data[newline + 1:]


def decode_mask(data):
    """Decode mask bytes, detecting the format from the magic."""
    if data[:2] == b"P5":
        width, height, payload = _parse_pgm(data)
    elif data[:4] == b"MSK1":
        width, height, payload = _parse_msk(data)
    else:
        raise MalformedFile(f"unknown mask magic {data[:4]!r}")
    if width <= 0 or height <= 0:
        raise MalformedFile(f"bad mask dimensions {width}x{height}")
    if len(payload) != width * height:
        raise MalformedFile(
            f"mask payload is {len(payload)} bytes, expected {width * height}")
    pixels = np.frombuffer(payload, dtype=np.uint8)
    return BinaryMask(width, height, (pixels >= THRESHOLD).astype(np.uint8))


def load_mask(path):
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise IoFailure(f"cannot read mask {path}: {exc}") from exc
    return decode_mask(data)


def encode_pgm(mask):
    header = f"P5\n{mask.width} {mask.height}\n255\n".encode("ascii")
    return header + (mask.bits * 255).astype(np.uint8).tobytes()


def encode_msk(mask):
    header = f"MSK1 {mask.width} {mask.height}\n".encode("ascii")
    return header + (mask.bits * 255).astype(np.uint8).tobytes()


def save_mask(mask, path, fmt="pgm"):
    data = encode_pgm(mask) if fmt == "pgm" else encode_msk(mask)
    try:
        with open(path, "wb") as fh:
            fh.write(data)
    except OSError as exc:
        raise IoFailure(f"cannot write mask {path}: {exc}") from exc


def mask_paths(directory, stem):
    return {name: os.path.join(directory, f"{stem}.{tag}.pgm")
            for name, tag in (("foreground", "fg"), ("front", "front"),
                              ("side", "side"), ("rear", "rear"))}


def load_mask_set(directory, stem):
    paths = mask_paths(directory, stem)
    mask_set = MaskSet(**{name: load_mask(p) for name, p in paths.items()})
    mask_set._check_dims()
    return mask_set


def save_mask_set(mask_set, directory, stem):
    for name, path in mask_paths(directory, stem).items():
        save_mask(getattr(mask_set, name), path)


def clamp_to_foreground(mask_set):
    """AND every side mask with the foreground."""
    mask_set._check_dims()
    fg = mask_set.foreground
    clamped = {
        name: BinaryMask(fg.width, fg.height, getattr(mask_set, name).bits & fg.bits)
        for name in SIDES
    }
    return MaskSet(foreground=fg, **clamped)


def area_ratios(mask_set, renormalize=False):
    """Fraction of foreground pixels covered by each side mask.

    ``mask_set`` is expected to be clamped already. With ``renormalize``
    the three ratios are rescaled to sum to 1 when their sum exceeds 0.
    """
    mask_set._check_dims()
    total = mask_set.foreground.popcount()
    if total == 0:
        raise EmptyForeground("foreground mask is empty")
    ratios = np.array([getattr(mask_set, n).popcount() for n in SIDES],
                      dtype=np.float64) / total
    if renormalize and ratios.sum() > 0:
        ratios = ratios / ratios.sum()
    return AreaRatios.from_array(ratios)


def area_ratios_from_files(directory, stem):
    return area_ratios(clamp_to_foreground(load_mask_set(directory, stem)))
