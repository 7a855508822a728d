"""Deterministic checkpoint archives.

A checkpoint is an uncompressed zip with two entries:

``manifest.json``
    format version, training step, the full run config, its hash, an optional
    ``extra`` dict, and a tensor table: name, dtype, shape and byte offset of
    every state-dict entry, sorted by name.
``weights.bin``
    the raw little-endian tensor bytes, concatenated in table order.

Entries are written with pinned zip metadata (fixed timestamp, no
compression), so saving the same state twice produces byte-identical files —
training determinism can be checked by hashing checkpoints.  Loading verifies
the format version, the tensor table against the blob size, and that the
stored config hash matches the stored config.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field

import numpy as np
import torch

from .config import RunConfig, config_from_dict, config_hash, config_to_dict
from .errors import CheckpointError

FORMAT_VERSION = 1

_DTYPE_CODES = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.float16: "<f2",
    torch.int64: "<i8",
    torch.int32: "<i4",
    torch.uint8: "|u1",
    torch.bool: "|b1",
}
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


@dataclass
class CheckpointData:
    state_dict: dict[str, torch.Tensor]
    config: RunConfig
    step: int
    extra: dict = field(default_factory=dict)


def _tensor_bytes(t: torch.Tensor) -> tuple[bytes, str]:
    code = _DTYPE_CODES.get(t.dtype)
    if code is None:
        raise CheckpointError(f"unsupported tensor dtype {t.dtype}")
    arr = t.detach().cpu().contiguous().numpy()
    return np.ascontiguousarray(arr).astype(code, copy=False).tobytes(), code


def _write_entry(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)


def save_checkpoint(path, state_dict: dict[str, torch.Tensor], config: RunConfig,
                    step: int, extra: dict | None = None) -> None:
    """Write a checkpoint archive; see the module docstring for the layout."""
    table = []
    blob = io.BytesIO()
    for name in sorted(state_dict):
        data, code = _tensor_bytes(state_dict[name])
        table.append({"name": name, "dtype": code,
                      "shape": list(state_dict[name].shape),
                      "offset": blob.tell(), "nbytes": len(data)})
        blob.write(data)
    manifest = {
        "format_version": FORMAT_VERSION,
        "step": int(step),
        "config": config_to_dict(config),
        "config_hash": config_hash(config),
        "extra": extra or {},
        "tensors": table,
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        _write_entry(zf, "manifest.json",
                     json.dumps(manifest, sort_keys=True, indent=1).encode())
        _write_entry(zf, "weights.bin", blob.getvalue())


def load_checkpoint(path) -> CheckpointData:
    """Read and validate a checkpoint archive."""
    try:
        with zipfile.ZipFile(path) as zf:
            names = set(zf.namelist())
            for required in ("manifest.json", "weights.bin"):
                if required not in names:
                    raise CheckpointError(f"{path}: missing archive entry {required!r}")
            manifest = json.loads(zf.read("manifest.json"))
            blob = zf.read("weights.bin")
    except (zipfile.BadZipFile, OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc

    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {version!r} is not supported (expected "
            f"{FORMAT_VERSION})")
    config = config_from_dict(manifest["config"])
    stated = manifest.get("config_hash")
    actual = config_hash(config)
    if stated != actual:
        raise CheckpointError(
            f"{path}: config hash mismatch (manifest says {stated}, config "
            f"hashes to {actual})")

    state: dict[str, torch.Tensor] = {}
    end = 0
    for row in manifest["tensors"]:
        off, nb = row["offset"], row["nbytes"]
        if off < 0 or off + nb > len(blob):
            raise CheckpointError(
                f"{path}: tensor {row['name']!r} byte range [{off}, {off + nb}) "
                f"exceeds blob of {len(blob)} bytes")
        dtype = np.dtype(row["dtype"])
        expect = int(np.prod(row["shape"], dtype=np.int64)) if row["shape"] else 1
        if nb != expect * dtype.itemsize:
            raise CheckpointError(
                f"{path}: tensor {row['name']!r} has {nb} bytes, shape "
                f"{row['shape']} at dtype {dtype} needs {expect * dtype.itemsize}")
        arr = np.frombuffer(blob[off:off + nb], dtype=dtype)
        state[row["name"]] = torch.from_numpy(arr.reshape(row["shape"]).copy())
        end = max(end, off + nb)
    if end != len(blob):
        raise CheckpointError(f"{path}: weights blob has {len(blob) - end} "
                              f"trailing bytes not covered by the manifest")
    return CheckpointData(state_dict=state, config=config,
                          step=int(manifest["step"]),
                          extra=manifest.get("extra", {}))


def build_model(data: CheckpointData):
    """Instantiate the network described by a checkpoint and load its weights."""
    from .model import BevCarNet

    net = BevCarNet(data.config)
    missing, unexpected = net.load_state_dict(data.state_dict, strict=False)
    if missing or unexpected:
        raise CheckpointError(
            f"state dict does not match the configured model "
            f"(missing: {sorted(missing)}, unexpected: {sorted(unexpected)})")
    net.eval()
    return net


def load_model(path):
    data = load_checkpoint(path)
    return build_model(data), data
