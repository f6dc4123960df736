"""Binary checkpoint: b"PPKS", u32 version, u64 header length, JSON header, float32 payload.

The header carries everything that is not a tensor plus an array directory
``name -> {"offset": bytes, "shape": [...]}``; arrays are stored little-endian
float32 back to back in directory order. Provenance pixels (uint8) are kept
as float32 too, which is exact.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .backbone import BackboneConfig, build_backbone
from .baseline import BaselineNet
from .data import NormalizationStats
from .prototypes import ClassifierHead, Provenance, PrototypeLayer, ProtoPNet

MAGIC = b"PPKS"
VERSION = 1
_LE_F32 = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


def _model_arrays(model) -> tuple[str, dict[str, np.ndarray]]:
    arrays = {f"backbone.{k}": v for k, v in model.backbone.named_arrays().items()}
    if isinstance(model, ProtoPNet):
        arrays["prototypes"] = model.prototypes.vectors.data
        arrays["head.weight"] = model.head.weight.data
        for j, prov in enumerate(model.prototypes.provenance):
            if prov is not None:
                arrays[f"provenance.{j}.patch"] = prov.patch_pixels
                arrays[f"provenance.{j}.source"] = prov.source_pixels
        return "protopnet", arrays
    if isinstance(model, BaselineNet):
        arrays["head.weight"] = model.weight.data
        arrays["head.bias"] = model.bias.data
        return "baseline", arrays
    raise TypeError(f"cannot checkpoint {type(model).__name__}")


def encode(model) -> bytes:
    kind, arrays = _model_arrays(model)
    directory, chunks, offset = {}, [], 0
    for name in sorted(arrays):
        buf = np.ascontiguousarray(arrays[name], dtype=_LE_F32).tobytes()
        directory[name] = {"offset": offset, "shape": list(np.shape(arrays[name]))}
        chunks.append(buf)
        offset += len(buf)
    header = {
        "kind": kind,
        "backbone": model.backbone.cfg.to_dict(),
        "class_names": model.class_names,
        "stats": model.stats.to_json() if model.stats is not None else None,
        "metadata": model.metadata,
        "arrays": directory,
        "payload_bytes": offset,
    }
    if kind == "protopnet":
        layer = model.prototypes
        header.update(P=layer.count, D=layer.dim, class_of=layer.class_of.tolist(),
                      provenance=[p.to_json() if p is not None else None for p in layer.provenance])
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<IQ", VERSION, len(raw)) + raw + b"".join(chunks)


def save_checkpoint(model, path) -> None:
    Path(path).write_bytes(encode(model))


def read_header(blob: bytes) -> tuple[dict, memoryview]:
    if blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version, length = struct.unpack("<IQ", blob[4:16])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    header = json.loads(blob[16:16 + length])
    payload = memoryview(blob)[16 + length:]
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError("payload length disagrees with header")
    for name, entry in header["arrays"].items():
        end = entry["offset"] + 4 * int(np.prod(entry["shape"], dtype=np.int64))
        if end > len(payload):
            raise CheckpointError(f"array {name} overruns the payload")
    return header, payload


def _array(header, payload, name) -> np.ndarray:
    entry = header["arrays"][name]
    n = int(np.prod(entry["shape"], dtype=np.int64))
    flat = np.frombuffer(payload, dtype=_LE_F32, count=n, offset=entry["offset"])
    return flat.astype(np.float32).reshape(entry["shape"])


def decode(blob: bytes):
    header, payload = read_header(blob)
    cfg = BackboneConfig(**header["backbone"])
    stats = NormalizationStats.from_json(header["stats"]) if header["stats"] else None
    names = header["class_names"]
    backbone = build_backbone(cfg, 0)
    backbone.load_arrays({k[len("backbone."):]: _array(header, payload, k)
                          for k in header["arrays"] if k.startswith("backbone.")})
    if header["kind"] == "baseline":
        model = BaselineNet(backbone, Tensor(_array(header, payload, "head.weight")),
                            Tensor(_array(header, payload, "head.bias")), names, stats)
    elif header["kind"] == "protopnet":
        layer = PrototypeLayer(Tensor(_array(header, payload, "prototypes")),
                               np.array(header["class_of"]), len(names))
        for j, prov in enumerate(header["provenance"]):
            if prov is not None:
                layer.provenance[j] = Provenance(
                    prov["train_image_id"], tuple(prov["latent_cell"]), tuple(prov["input_rectangle"]),
                    _array(header, payload, f"provenance.{j}.patch").astype(np.uint8),
                    _array(header, payload, f"provenance.{j}.source").astype(np.uint8))
        model = ProtoPNet(backbone, layer, ClassifierHead(Tensor(_array(header, payload, "head.weight"))),
                          names, stats)
    else:
        raise CheckpointError(f"unknown model kind {header['kind']!r}")
    for p in backbone.parameters():
        p.requires_grad = False
    model.metadata = header["metadata"]
    return model


def load_checkpoint(path):
    return decode(Path(path).read_bytes())
