"""Binary named-tensor checkpoints and System <-> tensor mapping.

Layout (little-endian)::

    b"ATM1" | version u32 | count u32
    count x ( name_len u32 | name utf-8 | rank u32 | dims u32*rank | float32 data, row-major )
    crc32 u32 over every preceding byte

Tensors are written in sorted-name order so identical contents give identical bytes.
"""

from __future__ import annotations

import re
import struct
import zlib
from pathlib import Path

import numpy as np

from .autodiff import DenseParams, LossParams, LstmParams, GATES, parameter
from .errors import CorruptCheckpointError, UnsupportedVersionError
from .models import AttNetModel, SeModel, SiModel
from .pipeline import VARIANTS, FeatureNorm, System

MAGIC = b"ATM1"
VERSION = 1


def encode(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f4", order="C")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode(blob: bytes) -> dict[str, np.ndarray]:
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise CorruptCheckpointError("not an ATM1 checkpoint")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptCheckpointError("checkpoint CRC mismatch")
    version, count = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise UnsupportedVersionError(f"checkpoint version {version}, expected {VERSION}")
    pos = 12
    out = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", body, pos)
            name = body[pos + 4 : pos + 4 + n].decode("utf-8")
            pos += 4 + n
            (rank,) = struct.unpack_from("<I", body, pos)
            dims = struct.unpack_from(f"<{rank}I", body, pos + 4)
            pos += 4 + 4 * rank
            size = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(body, dtype="<f4", count=size, offset=pos).reshape(dims)
            pos += 4 * size
            out[name] = arr.copy()
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CorruptCheckpointError(f"malformed checkpoint payload: {exc}") from exc
    if pos != len(body):
        raise CorruptCheckpointError("trailing bytes after the last tensor")
    return out


def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray]) -> int:
    """Write ``tensors``; returns the CRC32 stored in the file."""
    blob = encode(tensors)
    Path(path).write_bytes(blob)
    return struct.unpack("<I", blob[-4:])[0]


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())


def checkpoint_crc(path: str | Path) -> int:
    return struct.unpack("<I", Path(path).read_bytes()[-4:])[0]


# ---------------------------------------------------------------------------
# System mapping
# ---------------------------------------------------------------------------


def system_tensors(system: System) -> dict[str, np.ndarray]:
    out = {name: t.data for name, t in system.named_parameters().items()}
    out["meta/variant"] = np.array(VARIANTS.index(system.variant), dtype=np.float32)
    out["meta/context"] = np.array(system.context, dtype=np.float32)
    out["norm/noisy_mean"] = system.norm.noisy_mean
    out["norm/noisy_std"] = system.norm.noisy_std
    out["norm/clean_mean"] = system.norm.clean_mean
    out["norm/clean_std"] = system.norm.clean_std
    return out


def _layer_count(tensors, prefix: str, leaf: str) -> int:
    pat = re.compile(rf"^{prefix}/layer(\d+)/{leaf}$")
    idx = [int(m.group(1)) for k in tensors if (m := pat.match(k))]
    return max(idx) + 1 if idx else 0


def _dense(tensors, prefix: str) -> DenseParams:
    return DenseParams(parameter(tensors[f"{prefix}/weight"]), parameter(tensors[f"{prefix}/bias"]))


def _stack(tensors, prefix: str) -> list[DenseParams]:
    n = _layer_count(tensors, prefix, "weight")
    return [_dense(tensors, f"{prefix}/layer{i}") for i in range(n)]


def system_from_tensors(tensors: dict[str, np.ndarray]) -> System:
    t = {k: np.asarray(v, dtype=np.float64) for k, v in tensors.items()}
    try:
        variant = VARIANTS[int(t["meta/variant"])]
        norm = FeatureNorm(t["norm/noisy_mean"], t["norm/noisy_std"],
                           t["norm/clean_mean"], t["norm/clean_std"])
        se = si = att = loss = None
        n_lstm = _layer_count(t, "se", "w_i")
        if n_lstm:
            layers = []
            for i in range(n_lstm):
                p = f"se/layer{i}"
                layers.append(LstmParams(
                    {g: parameter(t[f"{p}/w_{g}"]) for g in GATES},
                    {g: parameter(t[f"{p}/u_{g}"]) for g in GATES},
                    {g: parameter(t[f"{p}/b_{g}"]) for g in GATES},
                ))
            se = SeModel(layers, _dense(t, f"se/layer{n_lstm}"))
        if "si/layer0/weight" in t:
            si = SiModel(_stack(t, "si"))
        if "att/layer0/weight" in t:
            att = AttNetModel(_stack(t, "att"))
        if "loss/log_sigma1" in t:
            loss = LossParams(parameter(t["loss/log_sigma1"]), parameter(t["loss/log_sigma2"]))
    except KeyError as exc:
        raise CorruptCheckpointError(f"checkpoint is missing tensor {exc}") from exc
    except IndexError:
        raise CorruptCheckpointError("checkpoint names an unknown variant") from None
    return System(variant, norm, int(t["meta/context"]), se, si, att, loss)


def save_system(path: str | Path, system: System) -> int:
    return save_checkpoint(path, system_tensors(system))


def load_system(path: str | Path) -> System:
    return system_from_tensors(load_checkpoint(path))
