"""Readers and writers for depth images, annotation sidecars and manifests.

Depth images are binary 16-bit PGM ("P5", big-endian, maxval 65535). Header
comments carry the metric scale::

    P5
    # scale_mm_per_unit=0.1
    # pitch_mm_per_pixel=1.0
    200 250
    65535
    <big-endian uint16 payload>

A raw value of 0 marks an invalid pixel.
"""

import csv
import re
from pathlib import Path

import numpy as np

from .depth import DepthImage, Shape
from .landmarks import LANDMARK_NAMES

DEFAULT_SCALE = 0.1


class DepthFormatError(ValueError):
    pass


class MalformedHeaderError(DepthFormatError):
    pass


class TruncatedPayloadError(DepthFormatError):
    pass


class ZeroDimensionError(DepthFormatError):
    pass


class AnnotationFormatError(ValueError):
    pass


_COMMENT = re.compile(rb"#\s*(\w+)\s*=\s*(\S+)")


def _parse_header(data):
    """Return (width, height, maxval, meta, payload_offset)."""
    if data[:2] != b"P5":
        raise MalformedHeaderError("missing P5 magic")
    pos, tokens, meta = 2, [], {}
    while len(tokens) < 3:
        if pos >= len(data):
            raise MalformedHeaderError("header ends before width/height/maxval")
        c = data[pos:pos + 1]
        if c.isspace():
            pos += 1
        elif c == b"#":
            end = data.find(b"\n", pos)
            if end < 0:
                raise MalformedHeaderError("unterminated comment line")
            m = _COMMENT.match(data[pos:end])
            if m:
                meta[m.group(1).decode()] = m.group(2).decode()
            pos = end + 1
        else:
            start = pos
            while pos < len(data) and data[pos:pos + 1].isdigit():
                pos += 1
            if start == pos:
                raise MalformedHeaderError(f"unexpected byte {c!r} in header")
            tokens.append(int(data[start:pos]))
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise MalformedHeaderError("maxval must be followed by one whitespace byte")
    return tokens[0], tokens[1], tokens[2], meta, pos + 1


def load_depth_image(path):
    """Read a 16-bit depth PGM; raw zeros become invalid pixels."""
    data = Path(path).read_bytes()
    width, height, maxval, meta, offset = _parse_header(data)
    if width == 0 or height == 0:
        raise ZeroDimensionError(f"{path}: zero image dimension {width}x{height}")
    if maxval != 65535:
        raise MalformedHeaderError(f"{path}: expected maxval 65535, got {maxval}")
    need = width * height * 2
    if len(data) - offset < need:
        raise TruncatedPayloadError(
            f"{path}: payload has {len(data) - offset} bytes, expected {need}"
        )
    try:
        scale = float(meta.get("scale_mm_per_unit", DEFAULT_SCALE))
        pitch = float(meta.get("pitch_mm_per_pixel", 1.0))
    except ValueError as exc:
        raise MalformedHeaderError(f"{path}: bad metadata value: {exc}") from None
    raw = np.frombuffer(data, dtype=">u2", count=width * height, offset=offset)
    raw = raw.reshape(height, width).astype(np.int64)
    valid = raw != 0
    return DepthImage(raw * scale, valid, pitch)


def quantize_depth(depth, scale=DEFAULT_SCALE):
    """Depth values exactly representable in the on-disk format."""
    return np.round(np.asarray(depth) / scale) * scale


def write_depth_image(path, img, scale=DEFAULT_SCALE):
    raw = np.round(img.depth / scale)
    if np.any(raw[img.valid] < 1) or np.any(raw[img.valid] > 65535):
        raise ValueError("depth outside the representable 16-bit range")
    raw = np.where(img.valid, raw, 0).astype(">u2")
    header = (
        f"P5\n# scale_mm_per_unit={scale!r}\n# pitch_mm_per_pixel={img.pitch!r}\n"
        f"{img.width} {img.height}\n65535\n"
    ).encode("ascii")
    Path(path).write_bytes(header + raw.tobytes())


def write_annotation(path, shape, yaw=0.0, subset=0, names=LANDMARK_NAMES, extra=None):
    """Write a sidecar; ``extra`` adds ``key=value`` header lines."""
    lines = [f"pose_yaw_deg={float(yaw)!r}", f"subset={subset}"]
    lines += [f"{k}={v}" for k, v in (extra or {}).items()]
    for (x, y), vis, i in zip(shape.points, shape.visible, shape.ids):
        lines.append(f"{i} {names[i]} {x:.6f} {y:.6f} {int(vis)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_annotation(path):
    """Parse a sidecar; returns ``(shape, header)`` with header values as str."""
    header, ids, pts, vis = {}, [], [], []
    for lineno, line in enumerate(
        Path(path).read_text(encoding="utf-8").splitlines(), 1
    ):
        line = line.strip()
        if not line:
            continue
        if "=" in line:
            key, _, value = line.partition("=")
            header[key.strip()] = value.strip()
            continue
        parts = line.split()
        if len(parts) != 5:
            raise AnnotationFormatError(f"{path}:{lineno}: expected 5 fields")
        if parts[4] not in ("0", "1"):
            raise AnnotationFormatError(f"{path}:{lineno}: visibility must be 0/1")
        try:
            ids.append(int(parts[0]))
            pts.append((float(parts[2]), float(parts[3])))
        except ValueError:
            raise AnnotationFormatError(f"{path}:{lineno}: bad numeric field") from None
        vis.append(parts[4] == "1")
    if not ids:
        raise AnnotationFormatError(f"{path}: no landmark records")
    return Shape(np.array(pts), vis, ids), header


MANIFEST_FIELDS = ("file", "yaw", "subset")


def write_manifest(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        for r in rows:
            w.writerow([r["file"], repr(float(r["yaw"])), r["subset"]])


def read_manifest(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh, delimiter="\t")
        if tuple(reader.fieldnames or ()) != MANIFEST_FIELDS:
            raise ValueError(f"{path}: manifest header must be {MANIFEST_FIELDS}")
        return [
            {"file": r["file"], "yaw": float(r["yaw"]), "subset": r["subset"]}
            for r in reader
        ]


def sidecar_path(image_path):
    return Path(image_path).with_suffix(".lmk")
