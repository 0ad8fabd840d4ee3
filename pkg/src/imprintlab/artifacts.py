"""Versioned binary container for on-disk artifacts.

Layout (little-endian):

    bytes 0-7    magic  b"IMPRLAB\\0"
    bytes 8-11   format version (uint32)
    bytes 12-19  header length in bytes (uint64)
    ...          JSON header: {"kind": str, "meta": {...}, "arrays": [names]}
    ...          one raw .npy block per array name, in header order

Loaders verify the magic, the format version, and (optionally) the artifact
kind, and refuse pickled payloads.
"""

import hashlib
import json

import numpy as np

from .errors import ArtifactError

MAGIC = b"IMPRLAB\x00"
FORMAT_VERSION = 1


def config_hash(config_dict):
    """Stable short hash of a JSON-serializable config mapping."""
    blob = json.dumps(config_dict, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def save_container(path, kind, meta, arrays):
    names = list(arrays)
    header = json.dumps({"kind": kind, "meta": meta, "arrays": names}).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(np.uint32(FORMAT_VERSION).tobytes())
        fh.write(np.uint64(len(header)).tobytes())
        fh.write(header)
        for name in names:
            np.lib.format.write_array(fh, np.ascontiguousarray(arrays[name]),
                                      allow_pickle=False)


def load_container(path, expected_kind=None):
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MAGIC:
            raise ArtifactError(f"{path}: bad magic {magic!r}; not an imprintlab artifact")
        version = int(np.frombuffer(fh.read(4), dtype=np.uint32)[0])
        if version != FORMAT_VERSION:
            raise ArtifactError(
                f"{path}: format version {version} unsupported (expected {FORMAT_VERSION})")
        header_len = int(np.frombuffer(fh.read(8), dtype=np.uint64)[0])
        header = json.loads(fh.read(header_len).decode())
        arrays = {}
        for name in header["arrays"]:
            arrays[name] = np.lib.format.read_array(fh, allow_pickle=False)
    if expected_kind is not None and header["kind"] != expected_kind:
        raise ArtifactError(
            f"{path}: artifact kind {header['kind']!r}, expected {expected_kind!r}")
    return header["kind"], header["meta"], arrays
