import struct

import numpy as np
import pytest

from protoparts.backbone import BackboneConfig
from protoparts.baseline import BaselineNet
from protoparts.checkpoint import MAGIC, CheckpointError, decode, encode, load_checkpoint, read_header, save_checkpoint
from protoparts.data import whiten_batch


def test_round_trip_bit_identical(tiny_model, tmp_path):
    path = tmp_path / "m.ppks"
    save_checkpoint(tiny_model, path)
    blob = path.read_bytes()
    back = load_checkpoint(path)
    assert encode(back) == blob
    assert back.prototypes.vectors.data.tobytes() == tiny_model.prototypes.vectors.data.tobytes()
    for name, arr in tiny_model.backbone.named_arrays().items():
        assert back.backbone.named_arrays()[name].tobytes() == arr.tobytes()
    for a, b in zip(tiny_model.prototypes.provenance, back.prototypes.provenance):
        assert a.train_image_id == b.train_image_id and tuple(a.latent_cell) == tuple(b.latent_cell)
        assert np.array_equal(a.source_pixels, b.source_pixels) and b.source_pixels.dtype == np.uint8


def test_loaded_model_predicts_identically(tiny_model, tiny_dataset):
    back = decode(encode(tiny_model))
    x = whiten_batch(tiny_dataset.test.images, tiny_dataset.stats)
    assert back.predict(x)[1].tobytes() == tiny_model.predict(x)[1].tobytes()


def test_layout(tiny_model):
    blob = encode(tiny_model)
    assert blob[:4] == MAGIC
    version, length = struct.unpack("<IQ", blob[4:16])
    assert version == 1
    header, payload = read_header(blob)
    assert header["P"] == 60 and header["D"] == 8
    total = sum(4 * int(np.prod(e["shape"])) for e in header["arrays"].values())
    assert total == len(payload) == len(blob) - 16 - length
    offsets = [header["arrays"][k]["offset"] for k in sorted(header["arrays"])]
    assert offsets == sorted(offsets)


def test_unknown_version_rejected(tiny_model):
    blob = bytearray(encode(tiny_model))
    blob[4:8] = struct.pack("<I", 2)
    with pytest.raises(CheckpointError, match="version"):
        decode(bytes(blob))


def test_bad_magic_and_truncation(tiny_model):
    blob = encode(tiny_model)
    with pytest.raises(CheckpointError):
        decode(b"XXXX" + blob[4:])
    with pytest.raises(CheckpointError):
        decode(blob[:-4])


def test_baseline_round_trip(tiny_dataset):
    b = BaselineNet.create(BackboneConfig(block_channels=[4, 8, 8], add_on_dim=8), tiny_dataset.class_names,
                           seed=0, stats=tiny_dataset.stats)
    blob = encode(b)
    back = decode(blob)
    assert isinstance(back, BaselineNet) and encode(back) == blob
