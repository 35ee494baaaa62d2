"""Binary checkpoint format for denoiser weights and optimizer state.

Layout: magic ``ERDF`` | u32 format version | u64 header length | JSON header
| little-endian float32 blobs in the header's declared order.  The header
carries the model config, build seed, training step count, optimizer
hyperparameters, and one manifest entry (name, shape, role) per blob.
Loading rejects wrong magic, unknown versions, truncated blobs, and config
mismatches.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .model import DenoiserConfig, DenoiserModel
from .tensor import AdamState, Tensor

MAGIC = b"ERDF"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    config: DenoiserConfig
    seed: int
    step: int
    params: dict[str, np.ndarray]
    adam: AdamState | None
    meta: dict

    def build_model(self) -> DenoiserModel:
        model = DenoiserModel.build(self.config, self.seed)
        load_params_into(model, self.params)
        return model


def save_checkpoint(
    path,
    model: DenoiserModel,
    step: int,
    adam: AdamState | None = None,
    meta: dict | None = None,
) -> None:
    names = [name for name, _ in model.parameters()]
    manifest = []
    blobs = []
    for name, p in model.parameters():
        manifest.append({"name": name, "shape": list(p.shape), "role": "param"})
        blobs.append(np.ascontiguousarray(p.data, dtype="<f4"))
    if adam is not None:
        if len(adam.m) != len(names):
            raise CheckpointError("optimizer state does not match the parameter list")
        for role, buffers in (("adam_m", adam.m), ("adam_v", adam.v)):
            for name, buf in zip(names, buffers):
                manifest.append({"name": name, "shape": list(buf.shape), "role": role})
                blobs.append(np.ascontiguousarray(buf, dtype="<f4"))
    header = {
        "format_version": FORMAT_VERSION,
        "model_config": model.config.to_dict(),
        "seed": model.seed,
        "step": int(step),
        "tensors": manifest,
        "adam": None
        if adam is None
        else {
            "lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2,
            "eps": adam.eps, "step_count": adam.step_count,
        },
        "meta": meta or {},
    }
    payload = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(payload)))
        fh.write(payload)
        for blob in blobs:
            fh.write(blob.tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic {raw[:4]!r})")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version} (expected {FORMAT_VERSION})")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + hlen].decode())
    offset = 16 + hlen
    arrays: dict[str, dict[str, np.ndarray]] = {"param": {}, "adam_m": {}, "adam_v": {}}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1
        nbytes = 4 * count
        if offset + nbytes > len(raw):
            raise CheckpointError(f"{path}: truncated blob for {entry['role']}:{entry['name']}")
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(entry["shape"])
        arrays[entry["role"]][entry["name"]] = arr.copy()
        offset += nbytes
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes after declared blobs")

    config = DenoiserConfig.from_dict(header["model_config"])
    adam = None
    if header["adam"] is not None:
        a = header["adam"]
        order = [e["name"] for e in header["tensors"] if e["role"] == "param"]
        adam = AdamState(
            lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"],
            step_count=a["step_count"],
            m=[arrays["adam_m"][n] for n in order],
            v=[arrays["adam_v"][n] for n in order],
        )
    return Checkpoint(
        config=config, seed=int(header["seed"]), step=int(header["step"]),
        params=arrays["param"], adam=adam, meta=header.get("meta", {}),
    )


def load_params_into(model: DenoiserModel, params: dict[str, np.ndarray]) -> None:
    dt = model.dtype
    for name, p in model.parameters():
        if name not in params:
            raise CheckpointError(f"checkpoint is missing parameter {name!r}")
        arr = params[name]
        if tuple(arr.shape) != p.shape:
            raise CheckpointError(f"parameter {name!r}: shape {arr.shape} != model {p.shape}")
        p.data[...] = arr.astype(dt)
    extra = set(params) - {name for name, _ in model.parameters()}
    if extra:
        raise CheckpointError(f"checkpoint has unknown parameters: {sorted(extra)}")


def load_model(path, expect_config: DenoiserConfig | None = None) -> tuple[DenoiserModel, Checkpoint]:
    ck = load_checkpoint(path)
    if expect_config is not None and ck.config != expect_config.validate():
        raise CheckpointError(
            f"{path}: checkpoint config {ck.config.to_dict()} does not match expected "
            f"{expect_config.to_dict()}"
        )
    return ck.build_model(), ck
