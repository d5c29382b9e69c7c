"""Named-tensor checkpoint container.

Layout::

    SEQDISTILL-CKPT 1\\n
    <name> <ndim> <d1> ... <dk>\\n   followed by prod(d) float64 little-endian
    ...
    __meta__ <nbytes>\\n             followed by a UTF-8 JSON object

The metadata holds the ModelConfig fields, the vocabularies and their
checksums. Loading validates tensor names and shapes against the config.
"""

from __future__ import annotations

import json
from typing import Optional, Tuple

import numpy as np

from .autodiff import Tensor
from .data import Vocabulary
from .model import ModelConfig, ModelParams, param_shapes

MAGIC = b"SEQDISTILL-CKPT 1\n"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str, params: ModelParams, src_vocab: Optional[Vocabulary] = None,
                    tgt_vocab: Optional[Vocabulary] = None, extra: Optional[dict] = None) -> None:
    meta = {"config": params.cfg.to_dict()}
    for side, vocab in (("src", src_vocab), ("tgt", tgt_vocab)):
        if vocab is not None:
            meta[f"{side}_vocab"] = vocab.tokens
            meta[f"{side}_vocab_sha256"] = vocab.checksum()
    if extra:
        meta["extra"] = extra
    with open(path, "wb") as f:
        f.write(MAGIC)
        for name, t in params.items():
            f.write(f"{name} {t.ndim} {' '.join(str(d) for d in t.shape)}\n".encode("ascii"))
            f.write(np.ascontiguousarray(t.values, dtype="<f8").tobytes())
        blob = json.dumps(meta, sort_keys=True).encode("utf-8")
        f.write(f"__meta__ {len(blob)}\n".encode("ascii"))
        f.write(blob)


def _readline(buf: bytes, pos: int) -> Tuple[str, int]:
    end = buf.index(b"\n", pos)
    return buf[pos:end].decode("ascii"), end + 1


def load_checkpoint(path: str) -> Tuple[ModelParams, dict]:
    """Return the parameters and the metadata dict (vocabularies as :class:`Vocabulary`)."""
    with open(path, "rb") as f:
        buf = f.read()
    if not buf.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    pos = len(MAGIC)
    arrays = {}
    meta = None
    while pos < len(buf):
        header, pos = _readline(buf, pos)
        fields = header.split(" ")
        if fields[0] == "__meta__":
            n = int(fields[1])
            meta = json.loads(buf[pos: pos + n].decode("utf-8"))
            pos += n
            break
        name, ndim = fields[0], int(fields[1])
        shape = tuple(int(d) for d in fields[2: 2 + ndim])
        count = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * count
    if meta is None:
        raise CheckpointError(f"{path}: missing metadata record")
    cfg = ModelConfig(**meta["config"])
    expected = param_shapes(cfg)
    if list(arrays) != list(expected):
        raise CheckpointError(f"{path}: tensor names do not match the stored config")
    for name, shape in expected.items():
        if arrays[name].shape != shape:
            raise CheckpointError(f"{path}: {name} has shape {arrays[name].shape}, config implies {shape}")
    params = ModelParams(cfg, {k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()})
    for side in ("src", "tgt"):
        if f"{side}_vocab" in meta:
            vocab = Vocabulary(meta[f"{side}_vocab"])
            if vocab.checksum() != meta.get(f"{side}_vocab_sha256"):
                raise CheckpointError(f"{path}: {side} vocabulary checksum mismatch")
            meta[f"{side}_vocab"] = vocab
    return params, meta
