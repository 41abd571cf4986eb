"""Binary dataset and checkpoint formats, config text, metrics CSV and raster dumps.

All binary integers are little-endian. Dataset files::

    8s magic "ADVITDS\\0" | u32 version | u32 count | u32 H | u32 W | u32 C |
    u32 classes | u8 images[count*H*W*C] | u8 labels[count]

Checkpoint files::

    8s magic "ADVITCK\\0" | u32 version | u32 n + n bytes JSON header |
    u32 tensor count | directory | payloads | u32 n + n bytes JSON history

Each directory entry is ``u16 name length, name (utf-8), u8 dtype tag,
u8 rank, u32 extents[rank]``; payloads follow in directory order as
float32 little-endian. JSON is written with sorted keys.
"""

from __future__ import annotations

import csv
import io as _io
import json
import math
import os
import struct
import tempfile
import types
import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .augment import AugPolicy, BasicAugConfig, canonical_policy, light_policy
from .data import Dataset
from .train import EpochRecord, OptimizerState, TrainRecipe
from .vit import ModelConfig

DATASET_MAGIC = b"ADVITDS\0"
DATASET_VERSION = 1
CHECKPOINT_MAGIC = b"ADVITCK\0"
CHECKPOINT_VERSION = 1
DTYPE_F32 = 1
DTYPES = {DTYPE_F32: np.dtype("<f4")}


class FormatError(ValueError):
    """A file does not match the expected binary layout."""


class TruncatedError(FormatError):
    pass


class VersionError(FormatError):
    pass


class ConfigSyntaxError(ValueError):
    def __init__(self, line: int, message: str):
        self.line = line
        super().__init__(f"line {line}: {message}")


def atomic_write(path: str | os.PathLike, data: bytes) -> None:
    """Write to a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, buf: bytes, what: str):
        self.buf, self.pos, self.what = buf, 0, what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedError(f"{self.what}: truncated at byte {self.pos} (needed {n} more, have {len(self.buf) - self.pos})")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def blob(self) -> bytes:
        (n,) = self.unpack("<I")
        return self.take(n)


# ----------------------------------------------------------------- datasets


def dataset_to_bytes(ds: Dataset) -> bytes:
    N = len(ds)
    H, W, C = ds.image_shape if ds.images.ndim == 4 else (0, 0, 0)
    if N and (ds.labels.min() < 0 or ds.labels.max() >= ds.num_classes):
        raise ValueError("labels outside [0, num_classes)")
    if ds.num_classes > 256:
        raise ValueError("the dataset format stores labels as u8 (at most 256 classes)")
    u8 = np.round(np.clip(ds.images, 0, 1) * 255).astype(np.uint8)
    header = DATASET_MAGIC + struct.pack("<6I", DATASET_VERSION, N, H, W, C, ds.num_classes)
    return header + u8.tobytes() + ds.labels.astype(np.uint8).tobytes()


def dataset_from_bytes(buf: bytes) -> Dataset:
    r = _Reader(buf, "dataset")
    if r.take(8) != DATASET_MAGIC:
        raise FormatError("dataset: bad magic")
    version, N, H, W, C, classes = r.unpack("<6I")
    if version != DATASET_VERSION:
        raise VersionError(f"dataset: unsupported version {version}")
    images = np.frombuffer(r.take(N * H * W * C), dtype=np.uint8).reshape(N, H, W, C)
    labels = np.frombuffer(r.take(N), dtype=np.uint8).astype(np.int64)
    if r.pos != len(buf):
        raise FormatError(f"dataset: {len(buf) - r.pos} trailing bytes")
    if N and labels.max() >= classes:
        raise FormatError(f"dataset: label {labels.max()} out of range for {classes} classes")
    return Dataset(images / 255.0, labels, classes)


def save_dataset(path, ds: Dataset) -> None:
    atomic_write(path, dataset_to_bytes(ds))


def load_dataset(path) -> Dataset:
    with open(path, "rb") as f:
        head = f.read(8)
        if head != DATASET_MAGIC:
            raise FormatError(f"{path}: bad magic")
        return dataset_from_bytes(head + f.read())


# -------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    history: list[EpochRecord] = field(default_factory=list)
    recipe: TrainRecipe | None = None
    optimizer: OptimizerState | None = None
    seed: int = 0
    extra: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION


def _json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def checkpoint_to_bytes(ck: Checkpoint) -> bytes:
    tensors = dict(ck.params)
    header = {
        "config": ck.config.to_dict(),
        "recipe": ck.recipe.to_dict() if ck.recipe is not None else None,
        "seed": int(ck.seed),
        "extra": ck.extra,
        "param_names": list(ck.params),
        "optimizer": None,
    }
    if ck.optimizer is not None:
        opt = ck.optimizer
        header["optimizer"] = {"step": opt.step, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps, "names": list(opt.m)}
        for k in opt.m:
            tensors[f"optimizer.m.{k}"] = opt.m[k]
            tensors[f"optimizer.v.{k}"] = opt.v[k]
    out = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    h = _json(header)
    out += [struct.pack("<I", len(h)), h, struct.pack("<I", len(tensors))]
    payloads = []
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        nb = name.encode("utf-8")
        out += [struct.pack("<H", len(nb)), nb, struct.pack("<BB", DTYPE_F32, arr.ndim), struct.pack(f"<{arr.ndim}I", *arr.shape)]
        payloads.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    out += payloads
    hist = _json([r.to_dict() for r in ck.history])
    out += [struct.pack("<I", len(hist)), hist]
    return b"".join(out)


def checkpoint_from_bytes(buf: bytes) -> Checkpoint:
    r = _Reader(buf, "checkpoint")
    if r.take(8) != CHECKPOINT_MAGIC:
        raise FormatError("checkpoint: bad magic")
    (version,) = r.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"checkpoint: unsupported version {version} (expected {CHECKPOINT_VERSION})")
    header = json.loads(r.blob())
    (count,) = r.unpack("<I")
    directory = []
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = r.take(n).decode("utf-8")
        tag, rank = r.unpack("<BB")
        if tag not in DTYPES:
            raise FormatError(f"checkpoint: unknown dtype tag {tag} for tensor {name!r}")
        directory.append((name, DTYPES[tag], r.unpack(f"<{rank}I")))
    tensors = {}
    for name, dt, shape in directory:
        n = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        tensors[name] = np.frombuffer(r.take(n), dtype=dt).reshape(shape).astype(np.float64)
    history = [EpochRecord(**d) for d in json.loads(r.blob())]
    if r.pos != len(buf):
        raise FormatError(f"checkpoint: {len(buf) - r.pos} trailing bytes")
    params = {k: tensors[k] for k in header["param_names"]}
    opt = None
    if header["optimizer"] is not None:
        o = header["optimizer"]
        opt = OptimizerState(
            {k: tensors[f"optimizer.m.{k}"] for k in o["names"]},
            {k: tensors[f"optimizer.v.{k}"] for k in o["names"]},
            o["step"], o["beta1"], o["beta2"], o["eps"],
        )
    return Checkpoint(
        config=ModelConfig.from_dict(header["config"]),
        params=params,
        history=history,
        recipe=TrainRecipe.from_dict(header["recipe"]) if header["recipe"] is not None else None,
        optimizer=opt,
        seed=header["seed"],
        extra=header["extra"],
        version=version,
    )


def save_checkpoint(path, ck: Checkpoint) -> None:
    atomic_write(path, checkpoint_to_bytes(ck))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        head = f.read(12)
        if len(head) < 12:
            raise TruncatedError(f"{path}: truncated header")
        if head[:8] != CHECKPOINT_MAGIC:
            raise FormatError(f"{path}: bad magic")
        (version,) = struct.unpack("<I", head[8:])
        if version != CHECKPOINT_VERSION:
            raise VersionError(f"{path}: unsupported checkpoint version {version}")
        return checkpoint_from_bytes(head + f.read())


# ------------------------------------------------------------------ configs


@dataclass
class ExperimentConfig:
    model: ModelConfig
    recipe: TrainRecipe

    @property
    def policy(self) -> AugPolicy:
        return self.recipe.policy


PRESETS = ("light", "canonical")


def preset(name: str) -> ExperimentConfig:
    """Recipe presets: light (no heavy augmentation, wd 0.5) and canonical (all four, wd 0.05)."""
    if name == "light":
        return ExperimentConfig(ModelConfig(), TrainRecipe(policy=light_policy(), weight_decay=0.5))
    if name == "canonical":
        return ExperimentConfig(ModelConfig(), TrainRecipe(policy=canonical_policy(), weight_decay=0.05))
    raise ValueError(f"unknown preset {name!r}; choose from {PRESETS}")


def _scalar(text: str) -> Any:
    t = text.strip()
    low = t.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low in ("none", "null"):
        return None
    for conv in (int, float):
        try:
            return conv(t)
        except ValueError:
            pass
    if "/" in t:
        num, _, den = t.partition("/")
        try:
            return float(num) / float(den)
        except (ValueError, ZeroDivisionError):
            pass
    if len(t) >= 2 and t[0] == t[-1] and t[0] in "\"'":
        return t[1:-1]
    return t


def _coerce(value_text: str, hint, key: str) -> Any:
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, types.UnionType):
        if type(None) in args and _scalar(value_text) is None:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value_text, inner[0], key)
    if origin is tuple:
        parts = [p for p in value_text.replace("(", "").replace(")", "").split(",") if p.strip()]
        elem = args[0] if args else float
        return tuple(_coerce(p, elem, key) for p in parts)
    v = _scalar(value_text)
    if hint is bool:
        if not isinstance(v, bool):
            raise TypeError(f"{key} expects true/false, got {value_text.strip()!r}")
        return v
    if hint is int:
        if isinstance(v, bool) or not isinstance(v, int):
            raise TypeError(f"{key} expects an integer, got {value_text.strip()!r}")
        return v
    if hint is float:
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise TypeError(f"{key} expects a number, got {value_text.strip()!r}")
        return float(v)
    if hint is str:
        return str(v)
    raise TypeError(f"{key}: unsupported field type {hint}")


def _hints(cls) -> dict:
    return typing.get_type_hints(cls)


SECTIONS = {"model": ModelConfig, "train": TrainRecipe, "augment": AugPolicy, "augment.basic": BasicAugConfig}


def parse_config(source: str | os.PathLike, is_text: bool | None = None) -> ExperimentConfig:
    """Parse ``key = value`` lines with ``#`` comments and dotted section keys.

    Sections are ``model.*``, ``train.*``, ``augment.*`` and
    ``augment.basic.*``; a top-level ``preset = light|canonical`` picks the
    starting point (light by default). Unknown keys, bad types and range
    violations raise :class:`ConfigSyntaxError` carrying the line number.
    """
    if is_text is None:
        is_text = not (isinstance(source, os.PathLike) or (isinstance(source, str) and "\n" not in source and "=" not in source and os.path.exists(source)))
    text = str(source) if is_text else Path(source).read_text()
    base = "light"
    values: dict[str, dict[str, tuple[int, Any]]] = {s: {} for s in SECTIONS}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigSyntaxError(lineno, f"expected 'key = value', got {raw.strip()!r}")
        key, _, val = (s.strip() for s in line.partition("="))
        if key == "preset":
            if val not in PRESETS:
                raise ConfigSyntaxError(lineno, f"unknown preset {val!r}")
            base = val
            continue
        section, _, name = key.rpartition(".")
        if section not in SECTIONS:
            raise ConfigSyntaxError(lineno, f"unknown key {key!r}")
        cls = SECTIONS[section]
        hints = _hints(cls)
        if name not in hints or (cls is TrainRecipe and name == "policy") or (cls is AugPolicy and name == "basic"):
            raise ConfigSyntaxError(lineno, f"unknown key {key!r}")
        try:
            values[section][name] = (lineno, _coerce(val, hints[name], key))
        except (TypeError, ValueError) as exc:
            raise ConfigSyntaxError(lineno, str(exc)) from None
    start = preset(base)
    basic = _build(values["augment.basic"], lambda kw: replace(start.recipe.policy.basic, **kw))
    policy = _build(values["augment"], lambda kw: replace(start.recipe.policy, basic=basic, **kw))
    recipe = _build(values["train"], lambda kw: replace(start.recipe, policy=policy, **kw))
    model = _build(values["model"], lambda kw: replace(start.model, **kw))
    return ExperimentConfig(model, recipe)


def _build(entries: Mapping[str, tuple[int, Any]], make):
    kw = {k: v for k, (_, v) in entries.items()}
    try:
        return make(kw)
    except (TypeError, ValueError) as exc:
        # find the first line whose addition breaks validation
        partial = {}
        for k, (line, v) in sorted(entries.items(), key=lambda e: e[1][0]):
            partial[k] = v
            try:
                make(partial)
            except (TypeError, ValueError) as inner:
                raise ConfigSyntaxError(line, str(inner)) from None
        raise ConfigSyntaxError(max((l for l, _ in entries.values()), default=0), str(exc)) from None


def format_config(cfg: ExperimentConfig) -> str:
    """Inverse of :func:`parse_config` (every field written explicitly)."""
    lines = []

    def emit(section, obj, skip=()):
        for f in fields(obj):
            if f.name in skip:
                continue
            v = getattr(obj, f.name)
            if isinstance(v, tuple):
                v = ", ".join(repr(x) for x in v)
            elif isinstance(v, bool):
                v = str(v).lower()
            elif v is None:
                v = "none"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{section}.{f.name} = {v}")

    emit("model", cfg.model)
    emit("train", cfg.recipe, skip=("policy",))
    emit("augment", cfg.recipe.policy, skip=("basic",))
    emit("augment.basic", cfg.recipe.policy.basic)
    return "\n".join(lines) + "\n"


# ------------------------------------------------------------------ metrics


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def write_metrics(path, records: Sequence[Mapping], columns: Sequence[str] | None = None, json_path=None) -> None:
    """CSV with a fixed column order (first record's keys unless given), reals at 17 digits."""
    records = [dict(r) for r in records]
    if columns is None:
        columns = list(records[0]) if records else []
    columns = list(columns)
    for i, r in enumerate(records):
        if set(r) != set(columns):
            raise ValueError(f"record {i} has columns {sorted(r)}, expected {sorted(columns)}")
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in records:
        w.writerow([_cell(r[c]) for c in columns])
    atomic_write(path, buf.getvalue().encode("utf-8"))
    if json_path is not None:
        clean = [{c: _jsonable(r[c]) for c in columns} for r in records]
        atomic_write(json_path, json.dumps(clean, indent=1).encode("utf-8") + b"\n")


def _jsonable(v):
    if isinstance(v, (np.bool_, bool)):
        return bool(v)
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, (np.floating, float)):
        f = float(v)
        return f if math.isfinite(f) else str(f)
    return v


def read_metrics(path) -> list[dict[str, str]]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


# ------------------------------------------------------------------ rasters


def write_pnm(path, image: np.ndarray) -> None:
    """Binary PGM (H, W) / (H, W, 1) or PPM (H, W, 3) from values in [0, 1]."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[..., 0]
    if img.ndim == 2:
        magic = b"P5"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"cannot write image of shape {image.shape} as PGM/PPM")
    H, W = img.shape[:2]
    u8 = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
    atomic_write(path, magic + f"\n{W} {H}\n255\n".encode() + u8.tobytes())


def read_pnm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        tokens.append(buf[start:pos])
    magic, W, H, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic not in (b"P5", b"P6") or maxval != 255:
        raise FormatError(f"{path}: unsupported raster ({magic!r}, maxval {maxval})")
    C = 1 if magic == b"P5" else 3
    data = np.frombuffer(buf[pos + 1 : pos + 1 + H * W * C], dtype=np.uint8)
    if data.size != H * W * C:
        raise TruncatedError(f"{path}: truncated raster payload")
    return data.reshape(H, W, C) / 255.0


def tile_images(images: np.ndarray, cols: int | None = None, pad: int = 1) -> np.ndarray:
    """Arrange (N, H, W, C) images in a grid with ``pad`` white pixels between them."""
    images = np.asarray(images)
    N, H, W, C = images.shape
    cols = cols or int(math.ceil(math.sqrt(N)))
    rows = int(math.ceil(N / cols))
    out = np.ones((rows * (H + pad) - pad, cols * (W + pad) - pad, C))
    for i, img in enumerate(images):
        r, c = divmod(i, cols)
        out[r * (H + pad) : r * (H + pad) + H, c * (W + pad) : c * (W + pad) + W] = img
    return out


__all__ = [
    "Checkpoint",
    "ConfigSyntaxError",
    "ExperimentConfig",
    "FormatError",
    "TruncatedError",
    "VersionError",
    "atomic_write",
    "format_config",
    "load_checkpoint",
    "load_dataset",
    "parse_config",
    "preset",
    "read_metrics",
    "read_pnm",
    "save_checkpoint",
    "save_dataset",
    "tile_images",
    "write_metrics",
    "write_pnm",
]
