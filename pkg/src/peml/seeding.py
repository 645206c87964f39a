"""Named random substreams derived from one top-level seed."""

import zlib

import numpy as np

STREAMS = ("data", "init", "dropout", "gumbel", "tpe", "batch", "pretrain")


def stream_key(name: str) -> int:
    return zlib.crc32(name.encode())


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), stream_key(name), *[int(e) for e in extra]])


def subseed(seed: int, name: str, *extra: int) -> int:
    return int(substream(seed, name, *extra).integers(0, 2**63 - 1))
