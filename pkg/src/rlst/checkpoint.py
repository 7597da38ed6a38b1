"""Binary checkpoints.

Layout::

    b"RLST1\\n"
    <one line of UTF-8 JSON metadata>\\n
    parameters, Adam first moments, Adam second moments

Each block holds every array of the manifest in order as little-endian
float32. The manifest records name, shape and byte offset within a block.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import AdamState
from .data import Vocabulary
from .network import RLSTNet, RLSTNetConfig, with_values

MAGIC = b"RLST1\n"
_F32 = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    net: RLSTNet
    adam: AdamState
    meta: dict
    src_vocab: Vocabulary
    trg_vocab: Vocabulary


def _manifest(net: RLSTNet):
    out, offset = [], 0
    for name, p in net.params.items():
        out.append({"name": name, "shape": list(p.shape), "offset": offset})
        offset += p.value.size * _F32.itemsize
    return out, offset


def save_checkpoint(path, net: RLSTNet, adam: AdamState, src_vocab: Vocabulary,
                    trg_vocab: Vocabulary, **meta):
    manifest, block = _manifest(net)
    doc = dict(meta)
    doc.update(net_config=net.config.to_dict(), manifest=manifest, block_bytes=block,
               adam_step=adam.step, src_vocab=src_vocab.tokens, trg_vocab=trg_vocab.tokens)
    header = json.dumps(doc, sort_keys=True, ensure_ascii=False).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(header + b"\n")
        for source in (None, adam.m, adam.v):
            for name, p in net.params.items():
                arr = p.value if source is None else source.get(name, np.zeros_like(p.value))
                f.write(np.ascontiguousarray(arr, dtype=_F32).tobytes())
    os.replace(tmp, path)


def read_header(path) -> dict:
    with open(path, "rb") as f:
        if f.read(len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path}: not an RLST1 checkpoint (bad magic)")
        line = f.readline()
    try:
        return json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable metadata: {exc}") from None


def load_checkpoint(path, precision=None) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"{path}: no such checkpoint")
    data = path.read_bytes()
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: not an RLST1 checkpoint (bad magic)")
    end = data.index(b"\n", len(MAGIC))
    try:
        meta = json.loads(data[len(MAGIC):end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable metadata: {exc}") from None
    body = memoryview(data)[end + 1:]
    manifest = meta["manifest"]
    block = sum(int(np.prod(e["shape"])) for e in manifest) * _F32.itemsize
    if block != meta["block_bytes"] or len(body) != 3 * block:
        raise CheckpointError(f"{path}: expected {3 * block} data bytes, found {len(body)}")
    cfg = dict(meta["net_config"])
    if precision:
        cfg["precision"] = precision
    config = RLSTNetConfig(**cfg)

    def read_block(k):
        out = {}
        for e in manifest:
            n = int(np.prod(e["shape"]))
            start = k * block + e["offset"]
            arr = np.frombuffer(body[start:start + n * _F32.itemsize], dtype=_F32)
            out[e["name"]] = arr.reshape(e["shape"]).astype(config.dtype)
        return out

    net = with_values(config, read_block(0))
    adam = AdamState(m=read_block(1), v=read_block(2), step=int(meta["adam_step"]))
    return Checkpoint(net=net, adam=adam, meta=meta,
                      src_vocab=Vocabulary(meta["src_vocab"]),
                      trg_vocab=Vocabulary(meta["trg_vocab"]))
