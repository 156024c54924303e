"""Checkpoints: a JSON manifest next to a blob of little-endian float32 data.

``save_checkpoint(..., "run/ckpt")`` writes ``run/ckpt.json`` and
``run/ckpt.bin``. Scalars of the regularizer and quantizer state live in the
manifest as JSON numbers (float64 round-trips exactly); parameter tensors and
palette codebooks live in the blob as float32, palette indices as
little-endian packed bitfields.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CorruptionError, FormatError
from .models import Model
from .palettizers import Palette
from .quantizers import QuantState
from .regularizers import RegState

FORMAT = "r2lab-checkpoint"
VERSION = 1


def atomic_write(path, data):
    """Write bytes or text to ``path`` via a temp file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode()
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def config_hash(config):
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def pack_indices(indices, bits):
    idx = np.asarray(indices, dtype=np.uint32)
    planes = ((idx[:, None] >> np.arange(bits, dtype=np.uint32)) & 1).astype(np.uint8)
    return np.packbits(planes.ravel(), bitorder="little").tobytes()


def unpack_indices(raw, count, bits):
    planes = np.unpackbits(np.frombuffer(raw, dtype=np.uint8), bitorder="little")
    if planes.size < count * bits:
        raise CorruptionError("packed index field shorter than its count")
    planes = planes[:count * bits].reshape(count, bits).astype(np.int64)
    return planes @ (1 << np.arange(bits, dtype=np.int64))


def _paths(path):
    path = Path(path)
    if path.suffix in (".json", ".bin"):
        path = path.with_suffix("")
    return path.with_name(path.name + ".json"), path.with_name(path.name + ".bin")


@dataclass
class Checkpoint:
    model: Model
    reg: RegState | None = None
    quant: QuantState | None = None
    palettes: dict = field(default_factory=dict)
    config: dict | None = None
    seed: int | None = None
    metrics: dict | None = None


def save_checkpoint(ckpt, path):
    manifest_path, blob_path = _paths(path)
    chunks, entries, offset = [], [], 0

    def put(raw):
        nonlocal offset
        start = offset
        chunks.append(raw)
        offset += len(raw)
        return start

    for name, t in ckpt.model.named_parameters():
        raw = t.data.astype("<f4").tobytes()
        entries.append({"name": name, "shape": list(t.shape), "dtype": "<f4",
                        "offset": put(raw), "nbytes": len(raw)})
    palettes = []
    for name, p in ckpt.palettes.items():
        cb = p.codebook.astype("<f4").tobytes()
        rec = p.to_dict()
        rec["codebook"] = {"shape": list(p.codebook.shape), "dtype": "<f4",
                           "offset": put(cb), "nbytes": len(cb)}
        if p.assignments is not None:
            raw = pack_indices(p.assignments, p.bits)
            rec["indices"] = {"count": int(p.assignments.size), "dtype": "bitpacked-le",
                              "offset": put(raw), "nbytes": len(raw)}
        palettes.append(rec)
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "architecture": ckpt.model.spec(),
        "blob": blob_path.name,
        "blob_bytes": offset,
        "tensors": entries,
        "reg_state": ckpt.reg.to_dict() if ckpt.reg is not None else None,
        "quant_state": ckpt.quant.to_dict() if ckpt.quant is not None else None,
        "palettes": palettes,
        "config": ckpt.config,
        "config_hash": config_hash(ckpt.config) if ckpt.config is not None else None,
        "seed": ckpt.seed,
        "metrics": ckpt.metrics,
    }
    atomic_write(blob_path, b"".join(chunks))
    atomic_write(manifest_path, json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest_path, blob_path


def _check_extents(records, blob_len):
    spans = []
    for name, r in records:
        off, nb = r.get("offset"), r.get("nbytes")
        if not isinstance(off, int) or not isinstance(nb, int) or off < 0 or nb < 0:
            raise CorruptionError(f"{name}: invalid offset/size")
        if off + nb > blob_len:
            raise CorruptionError(f"{name}: bytes [{off}, {off + nb}) exceed blob size {blob_len}")
        spans.append((off, off + nb, name))
    spans.sort()
    for (a0, a1, an), (b0, b1, bn) in zip(spans, spans[1:]):
        if b0 < a1:
            raise CorruptionError(f"{an} and {bn} overlap in the blob")


def _float_block(blob, rec, name):
    shape = tuple(rec["shape"])
    if rec.get("dtype") != "<f4" or rec["nbytes"] != 4 * int(np.prod(shape, dtype=np.int64)):
        raise CorruptionError(f"{name}: size does not match shape {shape}")
    arr = np.frombuffer(blob, dtype="<f4", count=int(np.prod(shape)), offset=rec["offset"])
    return arr.reshape(shape).astype(np.float64)


def load_checkpoint(path):
    manifest_path, blob_path = _paths(path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{manifest_path}: {e}") from e
    if manifest.get("format") != FORMAT:
        raise FormatError(f"{manifest_path}: not an r2lab checkpoint")
    blob = (manifest_path.parent / manifest.get("blob", blob_path.name)).read_bytes()
    if manifest.get("blob_bytes", len(blob)) != len(blob):
        raise CorruptionError(f"blob has {len(blob)} bytes, manifest says {manifest['blob_bytes']}")

    records = [(e["name"], e) for e in manifest["tensors"]]
    for p in manifest.get("palettes", []):
        records.append((f"{p['layer_name']}.codebook", p["codebook"]))
        if "indices" in p:
            records.append((f"{p['layer_name']}.indices", p["indices"]))
    _check_extents(records, len(blob))

    model = Model.from_spec(manifest["architecture"])
    model.load_state({e["name"]: _float_block(blob, e, e["name"]) for e in manifest["tensors"]})

    palettes = {}
    for p in manifest.get("palettes", []):
        name = p["layer_name"]
        codebook = _float_block(blob, p["codebook"], f"{name}.codebook")
        assign = None
        if "indices" in p:
            r = p["indices"]
            assign = unpack_indices(blob[r["offset"]:r["offset"] + r["nbytes"]], r["count"], p["bits"])
        palettes[name] = Palette(name, p["bits"], p["dim"], tuple(p["shape"]), codebook,
                                 assign, p.get("pad", 0))

    config = manifest.get("config")
    if config is not None and manifest.get("config_hash") != config_hash(config):
        warnings.warn(f"{manifest_path}: config hash mismatch", RuntimeWarning)
    reg = RegState.from_dict(manifest["reg_state"]) if manifest.get("reg_state") else None
    quant = QuantState.from_dict(manifest["quant_state"]) if manifest.get("quant_state") else None
    return Checkpoint(model, reg, quant, palettes, config, manifest.get("seed"), manifest.get("metrics"))
