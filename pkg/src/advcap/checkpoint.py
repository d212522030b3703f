"""Binary checkpoint format.

Layout (all integers little-endian):

    magic "ADVC" | u32 format version | u32 metadata length | metadata JSON |
    u32 tensor count | per tensor:
        u16 name length | name (UTF-8) | u8 rank | u32 dims[rank] |
        row-major float64 payload (little-endian)

Metadata carries the config snapshot, vocabulary, RNG stream states, idf
table, phase and iteration, so load(save(x)) round-trips bit-identically and
a resumed run continues exactly. A version mismatch is rejected, never
migrated.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import CheckpointError

MAGIC = b"ADVC"
VERSION = 1


def save_checkpoint(path, metadata: dict, tensors: dict) -> None:
    """Write metadata and named float64 arrays to ``path``."""
    blob = json.dumps(metadata, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            arr = np.asarray(arr, dtype=np.float64)   # 0-d stays 0-d
            encoded = name.encode("utf-8")
            if len(encoded) > 0xFFFF:
                raise CheckpointError(f"tensor name too long: {name[:40]}...")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(arr.astype("<f8").tobytes(order="C"))


def load_checkpoint(path) -> tuple[dict, dict]:
    """Read (metadata, {name: array}) written by save_checkpoint."""
    with open(path, "rb") as fh:
        raw = fh.read()
    view = memoryview(raw)
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    off = 4

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(raw):
            raise CheckpointError(f"{path}: truncated checkpoint")
        vals = struct.unpack_from(fmt, raw, off)
        off += size
        return vals[0] if len(vals) == 1 else vals

    version = take("<I")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} "
                              f"(expected {VERSION})")
    meta_len = take("<I")
    if off + meta_len > len(raw):
        raise CheckpointError(f"{path}: truncated metadata")
    try:
        metadata = json.loads(bytes(view[off:off + meta_len]).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt metadata: {e}") from None
    off += meta_len

    tensors = {}
    count = take("<I")
    for _ in range(count):
        name_len = take("<H")
        name = bytes(view[off:off + name_len]).decode("utf-8")
        off += name_len
        rank = take("<B")
        dims = tuple(take("<I") for _ in range(rank))
        n = int(np.prod(dims)) if dims else 1
        nbytes = 8 * n
        if off + nbytes > len(raw):
            raise CheckpointError(f"{path}: truncated tensor payload for {name!r}")
        arr = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(dims)
        tensors[name] = arr.astype(np.float64)   # own, writable copy
        off += nbytes
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    return metadata, tensors


# ---------------------------------------------------------------------------
# model shells for decode/eval without training data
# ---------------------------------------------------------------------------

def generator_from_checkpoint(meta: dict, tensors: dict):
    """Rebuild (generator, vocab, config, idf) from checkpoint contents."""
    from .config import TrainConfig
    from .generator import zero_generator
    from .metrics import IdfTable
    from .textdata import Vocabulary

    config, _ = TrainConfig.from_json_dict(dict(meta["config"]))
    vocab = Vocabulary(list(meta["vocab"]))
    gen = zero_generator(int(meta["feature_dim"]), config.embed_dim,
                         config.hidden, vocab.size)
    for name, t in gen.named_tensors().items():
        key = f"gen.{name}"
        if key not in tensors:
            raise CheckpointError(f"checkpoint is missing tensor {key!r}")
        if tensors[key].shape != t.data.shape:
            raise CheckpointError(f"tensor {key!r} has shape {tensors[key].shape}, "
                                  f"expected {t.data.shape}")
        t.data[...] = tensors[key]
    idf = IdfTable.from_json(meta["idf"]) if meta.get("idf") else None
    return gen, vocab, config, idf


def discriminator_from_checkpoint(meta: dict, tensors: dict):
    """Rebuild the discriminator, or None if the checkpoint has none."""
    from .config import TrainConfig
    from .discriminator import make_discriminator
    from .rng import Stream
    from .textdata import Vocabulary

    if not meta.get("use_discriminator") or not any(k.startswith("disc.") for k in tensors):
        return None
    config, _ = TrainConfig.from_json_dict(dict(meta["config"]))
    vocab = Vocabulary(list(meta["vocab"]))
    disc = make_discriminator(config.disc_arch, int(meta["feature_dim"]), vocab.size,
                              config.t_max, Stream(0),
                              kernel_preset=config.kernel_preset,
                              disc_hidden=config.disc_hidden)
    for name, t in disc.named_tensors().items():
        key = f"disc.{name}"
        if key not in tensors:
            raise CheckpointError(f"checkpoint is missing tensor {key!r}")
        t.data[...] = tensors[key]
    return disc
