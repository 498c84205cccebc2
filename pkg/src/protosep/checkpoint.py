"""Binary checkpoint format.

Layout, all little-endian:

    magic  b"PSEP1"
    u16    format version (1)
    u32    config text length, then that many UTF-8 bytes (key=value lines)
    u32    tensor count
    per tensor:
        u16    name length, then UTF-8 name
        u8     rank, then rank x u32 dims
        f32[]  row-major payload
    u32    prototype count m (0 for models without a bank)
    i32[m] class assignment per prototype
    i64[m*3] projection provenance (image id, row, col) per prototype

Tensors are written in dict order and parsed back in file order, so
save -> load -> save reproduces identical bytes. Values are stored at
f32; loading widens to f64, which round-trips the stored precision
exactly.
"""

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import InvalidArgumentError

MAGIC = b"PSEP1"
VERSION = 1


@dataclass
class CheckpointData:
    tensors: dict                 # name -> float64 ndarray
    class_of: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    provenance: np.ndarray = field(
        default_factory=lambda: np.zeros((0, 3), np.int64))
    config: dict = field(default_factory=dict)


def _encode_config(config):
    lines = [f"{k}={config[k]}" for k in config]
    return ("\n".join(lines)).encode("utf-8")


def _decode_config(blob):
    config = {}
    for line in blob.decode("utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        config[key.strip()] = value.strip()
    return config


def save_checkpoint(path, tensors, class_of=None, provenance=None,
                    config=None):
    """Write named arrays plus bank metadata; returns the byte count."""
    class_of = np.asarray(class_of if class_of is not None else [],
                          dtype=np.int64)
    provenance = np.asarray(
        provenance if provenance is not None else np.zeros((0, 3)),
        dtype=np.int64).reshape(-1, 3)
    m = len(class_of)
    if len(provenance) != m:
        raise InvalidArgumentError(
            f"provenance rows ({len(provenance)}) must match prototype "
            f"count ({m})")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<H", VERSION))
    blob = _encode_config(config or {})
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        encoded = name.encode("utf-8")
        data = np.ascontiguousarray(np.asarray(arr), dtype="<f4")
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<B", data.ndim))
        for dim in data.shape:
            buf.write(struct.pack("<I", dim))
        buf.write(data.tobytes())
    buf.write(struct.pack("<I", m))
    buf.write(class_of.astype("<i4").tobytes())
    buf.write(provenance.astype("<i8").tobytes())
    payload = buf.getvalue()
    with open(path, "wb") as fh:
        fh.write(payload)
    return len(payload)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    view = memoryview(raw)
    if raw[:5] != MAGIC:
        raise InvalidArgumentError(
            f"{path!r} is not a checkpoint (bad magic {raw[:5]!r})")
    version = struct.unpack_from("<H", view, 5)[0]
    if version != VERSION:
        raise InvalidArgumentError(f"unsupported checkpoint version {version}")
    off = 7
    (clen,) = struct.unpack_from("<I", view, off)
    off += 4
    config = _decode_config(bytes(view[off:off + clen]))
    off += clen
    (count,) = struct.unpack_from("<I", view, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", view, off)
        off += 2
        name = bytes(view[off:off + nlen]).decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<B", view, off)
        off += 1
        shape = struct.unpack_from(f"<{rank}I", view, off) if rank else ()
        off += 4 * rank
        size = int(np.prod(shape, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(view, dtype="<f4", count=size, offset=off)
        off += 4 * size
        tensors[name] = arr.astype(np.float64).reshape(shape)
    (m,) = struct.unpack_from("<I", view, off)
    off += 4
    class_of = np.frombuffer(view, dtype="<i4", count=m,
                             offset=off).astype(np.int64)
    off += 4 * m
    provenance = np.frombuffer(view, dtype="<i8", count=3 * m,
                               offset=off).astype(np.int64).reshape(m, 3)
    off += 24 * m
    if off != len(raw):
        raise InvalidArgumentError(
            f"{len(raw) - off} trailing bytes after checkpoint payload")
    return CheckpointData(tensors=tensors, class_of=class_of,
                          provenance=provenance, config=config)


def model_config_entries(model):
    """Flat key=value entries describing a model's architecture."""
    from .model import GlobalPoolNet, SeparationNet

    if isinstance(model, SeparationNet):
        cfg = model.config
        entries = {
            "model.kind": "separation",
            "model.variant": cfg.variant,
            "model.n_classes": cfg.n_classes,
            "model.prototypes_per_class": cfg.prototypes_per_class,
            "model.prototype_dim": cfg.prototype_dim,
            "model.gamma": repr(cfg.gamma),
        }
        bb = cfg.backbone
    elif isinstance(model, GlobalPoolNet):
        entries = {
            "model.kind": "pool",
            "model.n_classes": model.n_classes,
        }
        bb = model.backbone.config
    else:
        raise InvalidArgumentError(f"cannot describe {type(model).__name__}")
    entries["backbone.input_size"] = bb.input_size
    entries["backbone.in_channels"] = bb.in_channels
    entries["backbone.stages"] = ",".join(
        f"{ch}:{n}" for ch, n in bb.stages)
    return entries


def model_from_config_entries(config):
    """Rebuild an untrained model matching stored architecture keys."""
    from .backbone import BackboneConfig
    from .model import GlobalPoolNet, ModelConfig, SeparationNet

    def need(key):
        if key not in config:
            raise InvalidArgumentError(f"checkpoint config lacks {key!r}")
        return config[key]

    stages = tuple(
        (int(part.split(":")[0]), int(part.split(":")[1]))
        for part in need("backbone.stages").split(","))
    bb = BackboneConfig(input_size=int(need("backbone.input_size")),
                        in_channels=int(need("backbone.in_channels")),
                        stages=stages)
    kind = need("model.kind")
    if kind == "separation":
        cfg = ModelConfig(n_classes=int(need("model.n_classes")),
                          variant=need("model.variant"),
                          prototypes_per_class=int(
                              need("model.prototypes_per_class")),
                          prototype_dim=int(need("model.prototype_dim")),
                          gamma=float(need("model.gamma")),
                          backbone=bb)
        return SeparationNet(cfg, seed=0)
    if kind == "pool":
        return GlobalPoolNet(bb, n_classes=int(need("model.n_classes")),
                             seed=0)
    raise InvalidArgumentError(f"unknown model kind {kind!r}")


def save_model(path, model, config=None, extra_tensors=None):
    """Checkpoint a model plus optional optimizer/bookkeeping tensors."""
    entries = dict(config or {})
    entries.update(model_config_entries(model))
    tensors = {n: p.data for n, p in model.parameters().items()}
    for name, arr in (extra_tensors or {}).items():
        if name in tensors:
            raise InvalidArgumentError(f"extra tensor {name!r} collides "
                                       "with a model parameter")
        tensors[name] = arr
    bank = getattr(model, "bank", None)
    class_of = bank.class_of if bank is not None else None
    provenance = bank.provenance if bank is not None else None
    return save_checkpoint(path, tensors, class_of=class_of,
                           provenance=provenance, config=entries)


def load_model(path):
    """Rebuild the stored model; returns (model, CheckpointData)."""
    ckpt = load_checkpoint(path)
    model = model_from_config_entries(ckpt.config)
    restore_parameters(model.parameters(), ckpt)
    bank = getattr(model, "bank", None)
    if bank is not None:
        if len(ckpt.class_of) != bank.m:
            raise InvalidArgumentError(
                f"checkpoint stores {len(ckpt.class_of)} prototype "
                f"assignments, model expects {bank.m}")
        if not np.array_equal(ckpt.class_of, bank.class_of):
            raise InvalidArgumentError(
                "stored prototype class assignments do not match the "
                "balanced layout implied by the model config")
        bank.provenance = ckpt.provenance.copy()
    return model, ckpt


def restore_parameters(params, ckpt, extra_prefixes=("opt.", "train.")):
    """Copy stored tensors into a model's named parameters.

    Every non-bookkeeping name in the checkpoint must be a known
    parameter, and every parameter must be present; shapes must agree.
    """
    stored = {n: a for n, a in ckpt.tensors.items()
              if not n.startswith(extra_prefixes)}
    unknown = sorted(set(stored) - set(params))
    if unknown:
        raise InvalidArgumentError(
            f"checkpoint holds unknown tensors {unknown}")
    missing = sorted(set(params) - set(stored))
    if missing:
        raise InvalidArgumentError(
            f"checkpoint is missing tensors {missing}")
    for name, tensor in params.items():
        arr = stored[name]
        if tuple(arr.shape) != tensor.shape:
            raise InvalidArgumentError(
                f"shape mismatch for {name}: checkpoint "
                f"{tuple(arr.shape)} vs model {tensor.shape}")
        tensor.data = arr.astype(np.float64)
