"""Single-file checkpoint archive.

Layout (all integers little-endian)::

    b"LOGOCKPT" | u32 version | u64 header_len | header JSON | tensor blob | u32 crc32

The header echoes the full training config, the step counter, the RNG
scheme and an index of named tensors (dtype, shape, byte offset into the
blob). Floating tensors are stored as ``<f4``, integer buffers as ``<i8``.
The CRC covers every preceding byte.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError

MAGIC = b"LOGOCKPT"
VERSION = 1
RNG_SCHEME = "numpy SeedSequence([seed, stream, counter])"


def _named_tensors(state):
    out = {}
    for k, v in state.encoder.state_dict().items():
        out[f"encoder/{k}"] = v
    for k, v in state.regressor.state_dict().items():
        out[f"regressor/{k}"] = v
    for prefix, opt, named in (
        ("enc_opt", state.enc_opt, _online_named(state.encoder)),
        ("reg_opt", state.reg_opt, dict(state.regressor.named_parameters())),
    ):
        for name, p in named.items():
            buf = opt.state.get(p, {}).get("momentum_buffer")
            if buf is not None:
                out[f"{prefix}/{name}"] = buf
    if state.queue is not None:
        out["queue/buffer"] = state.queue.buffer
    return out


def _online_named(encoder):
    ids = {id(p) for p in encoder.online_parameters()}
    return {n: p for n, p in encoder.named_parameters() if id(p) in ids}


def _encode_array(t: torch.Tensor):
    t = t.detach().cpu()
    if t.is_floating_point():
        return "<f4", t.to(torch.float32).numpy().astype("<f4", copy=False)
    return "<i8", t.to(torch.int64).numpy().astype("<i8", copy=False)


def save_checkpoint(state, path) -> Path:
    """Write ``state`` to ``path`` atomically (temp file + rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    index, chunks, offset = [], [], 0
    for name, t in _named_tensors(state).items():
        dtype, arr = _encode_array(t)
        raw = arr.tobytes()
        index.append({"name": name, "dtype": dtype, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "version": VERSION,
        "config": state.cfg.to_dict(),
        "step": state.step,
        "total_steps": state.total_steps,
        "steps_per_epoch": state.steps_per_epoch,
        "best_knn": state.best_knn,
        "queue_head": state.queue.head if state.queue is not None else None,
        "rng": {"scheme": RNG_SCHEME, "seed": state.cfg.seed, "regressor_seed": state.cfg.regressor_seed,
                "counter": state.step},
        "tensors": index,
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    body = MAGIC + struct.pack("<IQ", VERSION, len(hbytes)) + hbytes + b"".join(chunks)
    body += struct.pack("<I", zlib.crc32(body))
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(body)
    os.replace(tmp, path)
    return path


def read_archive(path):
    """Parse and verify an archive; returns ``(header, {name: ndarray})``."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(data) < len(MAGIC) + 16 or data[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint archive")
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) != crc:
        raise CheckpointError(f"{path} is truncated or corrupted (checksum mismatch)")
    version, hlen = struct.unpack("<IQ", data[len(MAGIC):len(MAGIC) + 12])
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version} unsupported (expected {VERSION})")
    start = len(MAGIC) + 12
    header = json.loads(data[start:start + hlen])
    blob = memoryview(data)[start + hlen:-4]
    arrays = {}
    for ent in header["tensors"]:
        raw = blob[ent["offset"]:ent["offset"] + ent["nbytes"]]
        if len(raw) != ent["nbytes"]:
            raise CheckpointError(f"tensor {ent['name']} extends past the end of the archive")
        arrays[ent["name"]] = np.frombuffer(raw, dtype=ent["dtype"]).reshape(ent["shape"]).copy()
    return header, arrays


def load_checkpoint(path):
    """Rebuild a :class:`~logo_ssl.trainer.TrainState` from an archive."""
    from .trainer import TrainConfig, init_state

    header, arrays = read_archive(path)
    try:
        cfg = TrainConfig.from_dict(header["config"])
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"checkpoint config is invalid: {exc}") from exc
    state = init_state(cfg, header["total_steps"], header["steps_per_epoch"])
    state.step = header["step"]
    state.best_knn = header["best_knn"]

    def load_module(prefix, module):
        sd = module.state_dict()
        new = {}
        for k, v in sd.items():
            key = f"{prefix}/{k}"
            if key not in arrays:
                raise CheckpointError(f"checkpoint is missing tensor {key}")
            arr = arrays[key]
            if tuple(arr.shape) != tuple(v.shape):
                raise CheckpointError(f"shape mismatch for {key}: {arr.shape} vs {tuple(v.shape)}")
            new[k] = torch.from_numpy(arr).to(v.dtype)
        module.load_state_dict(new)

    load_module("encoder", state.encoder)
    load_module("regressor", state.regressor)
    for prefix, opt, named in (
        ("enc_opt", state.enc_opt, _online_named(state.encoder)),
        ("reg_opt", state.reg_opt, dict(state.regressor.named_parameters())),
    ):
        for name, p in named.items():
            key = f"{prefix}/{name}"
            if key in arrays:
                opt.state[p]["momentum_buffer"] = torch.from_numpy(arrays[key]).to(p.dtype)
    if state.queue is not None:
        state.queue.buffer = torch.from_numpy(arrays["queue/buffer"])
        state.queue.head = header["queue_head"]
    state.last_checkpoint = str(path)
    return state
