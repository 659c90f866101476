"""Portable container for trained gated models.

Byte layout (little-endian throughout)::

    offset  size  field
    0       4     magic b"GMDL"
    4       2     version (u16, currently 1)
    6       2     model kind (u16: 1 = GRID, 2 = SMUF)
    8       4     metadata length M (u32)
    12      M     metadata, UTF-8 "key=value" lines sorted by key
    12+M    4     chunk count C (u32)
            ...   C chunk records:
                    u16 name length, name (UTF-8)
                    u16 chunk type (1 = float64 matrix)
                    u32 rows, u32 cols
                    u64 offset into the payload, u64 byte length
                    u32 CRC32 of the chunk bytes
            ...   payload: row-major float64 matrices in table order
    end-4   4     CRC32 of every preceding byte

Chunks and metadata are written in a fixed order and floats in metadata
use ``repr``, so saving the same model twice gives identical files.
"""

import ast
import struct
import zlib
from pathlib import Path

import numpy as np

from .cascade import CascadeModel, StageModel
from .features import HogConfig, HogExtractor, LbpConfig, LbpExtractor
from .gating import GatedModel, GatedSubset, GatingStats, PoseBin, format_pose_bins
from .smuf import SmufModel, SmufStage

MAGIC = b"GMDL"
VERSION = 1
KIND_GRID = 1
KIND_SMUF = 2
KIND_NAMES = {KIND_GRID: "grid", KIND_SMUF: "smuf"}
CHUNK_F64 = 1


class ModelFormatError(ValueError):
    pass


class BadMagicError(ModelFormatError):
    pass


class UnsupportedVersionError(ModelFormatError):
    pass


class ModelKindError(ModelFormatError):
    pass


class ChecksumError(ModelFormatError):
    def __init__(self, message, chunk=None):
        super().__init__(message)
        self.chunk = chunk


class DimensionError(ModelFormatError):
    pass


class UnknownChunkTypeError(ModelFormatError):
    pass


def _kind_of(model):
    types = {type(s.model) for s in model.subsets}
    if types == {CascadeModel}:
        return KIND_GRID
    if types == {SmufModel}:
        return KIND_SMUF
    raise TypeError(f"cannot serialise subsets of type {sorted(t.__name__ for t in types)}")


def _ids(text):
    return np.array([int(t) for t in text.split(",")], dtype=np.int64)


def _flatten(model, params):
    """``(meta, chunks)`` for a gated model; chunks is an ordered list."""
    kind = _kind_of(model)
    meta = {"n_subsets": str(model.n_subsets)}
    chunks = []
    for key, value in (params or {}).items():
        meta[f"param.{key}"] = repr(value)
    first = model.subsets[0].model
    if kind == KIND_GRID:
        ext = first.extractor
        meta["feature"] = ext.kind
        if ext.kind == "hog":
            c = ext.cfg
            meta.update({"hog.patch_side": str(c.patch_side), "hog.cells_per_side": str(c.cells_per_side),
                         "hog.bins": str(c.bins), "hog.epsilon": repr(c.epsilon)})
        else:
            meta["lbp.patch_side"] = str(ext.cfg.patch_side)
    else:
        meta["feature"] = "smuf"
        meta["patch_side"] = str(first.patch_side)
        meta["gate_patch"] = str(first.gate_patch)
        meta["gate_factor"] = str(first.gate_factor)
    for z, sub in enumerate(model.subsets):
        b, m, pre = sub.pose_bin, sub.model, f"z{z}"
        if kind == KIND_GRID and (m.extractor.kind != first.extractor.kind or m.extractor.cfg != first.extractor.cfg):
            raise ValueError("all subsets must share one feature configuration")
        meta[f"{pre}.yaw_min"] = repr(float(b.yaw_min))
        meta[f"{pre}.yaw_max"] = repr(float(b.yaw_max))
        meta[f"{pre}.require_visible"] = str(int(b.require_visible))
        meta[f"{pre}.bin_ids"] = ",".join(map(str, b.landmark_ids))
        meta[f"{pre}.landmark_ids"] = ",".join(str(int(i)) for i in m.landmark_ids)
        meta[f"{pre}.gate_floor"] = repr(float(sub.gate.floor))
        meta[f"{pre}.n_stages"] = str(m.n_stages)
        chunks.append((f"{pre}/init_shape", m.init_shape))
        chunks.append((f"{pre}/gate_mean", sub.gate.mean_feature))
        chunks.append((f"{pre}/gate_var", sub.gate.var_feature))
        for k, st in enumerate(m.stages):
            sp = f"{pre}/s{k}"
            meta[f"{pre}.s{k}.gamma"] = repr(float(st.gamma))
            if kind == KIND_GRID:
                chunks += [(f"{sp}/R", st.R), (f"{sp}/mean_feature", st.mean_feature)]
            else:
                meta[f"{pre}.s{k}.lam"] = repr(float(st.lam))
                chunks += [(f"{sp}/W", st.W), (f"{sp}/R", st.R),
                           (f"{sp}/center", st.center), (f"{sp}/whiten", st.whiten)]
    return kind, meta, chunks


def to_bytes(model, params=None):
    kind, meta, chunks = _flatten(model, params)
    meta_bytes = "".join(f"{k}={meta[k]}\n" for k in sorted(meta)).encode("utf-8")
    table, payload, offset = [], [], 0
    for name, arr in chunks:
        a = np.ascontiguousarray(arr, dtype="<f8")
        a2 = a.reshape(1, -1) if a.ndim == 1 else a
        if a2.ndim != 2:
            raise ValueError(f"chunk {name} is not a matrix")
        data = a2.tobytes()
        nb = name.encode("utf-8")
        table.append(struct.pack("<H", len(nb)) + nb + struct.pack(
            "<HIIQQI", CHUNK_F64, a2.shape[0], a2.shape[1], offset, len(data), zlib.crc32(data)))
        payload.append(data)
        offset += len(data)
    body = b"".join([
        MAGIC, struct.pack("<HHI", VERSION, kind, len(meta_bytes)), meta_bytes,
        struct.pack("<I", len(chunks)), *table, *payload,
    ])
    return body + struct.pack("<I", zlib.crc32(body))


def save(model, path, params=None):
    """Write ``model`` (a :class:`GatedModel`) to ``path``."""
    data = to_bytes(model, params)
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise OSError(f"cannot write model file {path}: {exc}") from exc


class _Reader:
    def __init__(self, data):
        self.data, self.pos = data, 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise ModelFormatError(f"file truncated while reading {what}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def _parse(data, expect_kind=None):
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError("not a model file (bad magic)")
    r = _Reader(data)
    r.take(4, "magic")
    version, kind, meta_len = r.unpack("<HHI", "header")
    if version > VERSION or version < 1:
        raise UnsupportedVersionError(f"model format version {version} is not supported (max {VERSION})")
    if kind not in KIND_NAMES:
        raise ModelKindError(f"unknown model kind {kind}")
    if expect_kind is not None and KIND_NAMES[kind] != expect_kind:
        raise ModelKindError(f"file holds a {KIND_NAMES[kind]} model, expected {expect_kind}")
    if len(data) < 16:
        raise ModelFormatError("file truncated")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    body_ok = zlib.crc32(body) == crc
    try:
        meta_text = r.take(meta_len, "metadata").decode("utf-8")
        meta = dict(line.split("=", 1) for line in meta_text.splitlines() if line)
        (n_chunks,) = r.unpack("<I", "chunk count")
        table = []
        for _ in range(n_chunks):
            (nl,) = r.unpack("<H", "chunk name")
            name = r.take(nl, "chunk name").decode("utf-8")
            table.append((name, *r.unpack("<HIIQQI", f"chunk {name}")))
    except (UnicodeDecodeError, ValueError) as exc:
        if not body_ok:
            raise ChecksumError("container checksum mismatch in header, metadata or chunk table") from exc
        raise
    base = r.pos
    chunks = {}
    for name, ctype, rows, cols, off, length, ccrc in table:
        if ctype != CHUNK_F64:
            raise UnknownChunkTypeError(f"chunk {name} has unknown type {ctype}")
        if length != rows * cols * 8:
            raise DimensionError(f"chunk {name}: {rows}x{cols} needs {rows * cols * 8} bytes, table says {length}")
        start = base + off
        if start + length > len(body):
            raise DimensionError(f"chunk {name} extends past the payload")
        raw = body[start:start + length]
        if zlib.crc32(raw) != ccrc:
            raise ChecksumError(f"checksum mismatch in chunk {name}", chunk=name)
        chunks[name] = np.frombuffer(raw, dtype="<f8").reshape(rows, cols).astype(np.float64)
    if not body_ok:
        raise ChecksumError("container checksum mismatch in header, metadata or chunk table")
    return KIND_NAMES[kind], meta, chunks


def _vec(chunks, name):
    try:
        return chunks[name].reshape(-1)
    except KeyError:
        raise ModelFormatError(f"missing chunk {name}") from None


def _mat(chunks, name, shape=None):
    try:
        a = chunks[name]
    except KeyError:
        raise ModelFormatError(f"missing chunk {name}") from None
    if shape is not None and a.shape != shape:
        raise DimensionError(f"chunk {name} is {a.shape}, expected {shape}")
    return a


def _build(kind, meta, chunks):
    try:
        n = int(meta["n_subsets"])
        if kind == "grid":
            if meta["feature"] == "hog":
                ext = HogExtractor(HogConfig(int(meta["hog.patch_side"]), int(meta["hog.cells_per_side"]),
                                             int(meta["hog.bins"]), float(meta["hog.epsilon"])))
            else:
                ext = LbpExtractor(LbpConfig(int(meta["lbp.patch_side"])))
        subsets = []
        for z in range(n):
            pre = f"z{z}"
            ids = _ids(meta[f"{pre}.landmark_ids"])
            L = len(ids)
            b = PoseBin(float(meta[f"{pre}.yaw_min"]), float(meta[f"{pre}.yaw_max"]),
                        tuple(_ids(meta[f"{pre}.bin_ids"])), meta[f"{pre}.require_visible"] == "1")
            init = _mat(chunks, f"{pre}/init_shape", (L, 2))
            gate = GatingStats(_vec(chunks, f"{pre}/gate_mean"), _vec(chunks, f"{pre}/gate_var"),
                               float(meta[f"{pre}.gate_floor"]))
            stages = []
            for k in range(int(meta[f"{pre}.n_stages"])):
                sp = f"{pre}/s{k}"
                gamma = float(meta[f"{pre}.s{k}.gamma"])
                if kind == "grid":
                    m = ext.length(L)
                    stages.append(StageModel(_mat(chunks, f"{sp}/R", (2 * L, m)),
                                             _vec(chunks, f"{sp}/mean_feature"), gamma))
                else:
                    W = _mat(chunks, f"{sp}/W")
                    p, B = W.shape
                    stages.append(SmufStage(W, _mat(chunks, f"{sp}/R", (2 * L, B * L)),
                                            _mat(chunks, f"{sp}/center", (L, p)),
                                            _mat(chunks, f"{sp}/whiten", (p, p)),
                                            float(meta[f"{pre}.s{k}.lam"]), gamma))
            if kind == "grid":
                model = CascadeModel(stages, init, ids, ext)
            else:
                model = SmufModel(stages, init, ids, int(meta["patch_side"]),
                                  int(meta["gate_patch"]), int(meta["gate_factor"]))
            subsets.append(GatedSubset(model, gate, b))
    except KeyError as exc:
        raise ModelFormatError(f"missing metadata key {exc.args[0]}") from None
    except ValueError as exc:
        if isinstance(exc, ModelFormatError):
            raise
        raise DimensionError(str(exc)) from None
    params = {k[6:]: ast.literal_eval(v) for k, v in meta.items() if k.startswith("param.")}
    return GatedModel(subsets), params


def from_bytes(data, kind=None):
    """``(kind, model, params)`` from container bytes."""
    k, meta, chunks = _parse(bytes(data), kind)
    model, params = _build(k, meta, chunks)
    return k, model, params


def load(path, kind=None):
    """Read a model file; ``kind`` ('grid' or 'smuf') makes a mismatch an error.

    Returns ``(kind, GatedModel, params)``.
    """
    return from_bytes(Path(path).read_bytes(), kind)


def save_estimator(est, path):
    est._check_fitted()
    params = est.get_params()
    if params.get("pose_bins") is not None and not isinstance(params["pose_bins"], str):
        params["pose_bins"] = format_pose_bins(params["pose_bins"])
    save(est.model_, path, params)


def load_estimator(path, kind=None):
    from .estimators import GridLandmarker, SmufLandmarker

    k, model, params = load(path, kind)
    est = (GridLandmarker if k == "grid" else SmufLandmarker)(**params)
    est.model_ = model
    return est
