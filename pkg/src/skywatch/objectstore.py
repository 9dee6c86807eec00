"""Content-addressed blob storage for uploaded images."""

from __future__ import annotations

import hashlib
from pathlib import Path


class ObjectStoreError(Exception):
    pass


class ObjectStore:
    """Interface: put bytes, get them back bit-exact by ref."""

    def put(self, data: bytes) -> str:
        raise NotImplementedError

    def get(self, ref: str) -> bytes:
        raise NotImplementedError


class MemoryObjectStore(ObjectStore):
    def __init__(self) -> None:
        self._blobs: dict[str, bytes] = {}

    def put(self, data: bytes) -> str:
        ref = "mem/" + hashlib.sha256(data).hexdigest()
        self._blobs[ref] = data
        return ref

    def get(self, ref: str) -> bytes:
        try:
            return self._blobs[ref]
        except KeyError:
            raise ObjectStoreError(f"unknown ref: {ref}") from None


class LocalDirObjectStore(ObjectStore):
    """Default backend: one file per blob under a root directory, named by
    content hash so repeated uploads deduplicate."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def put(self, data: bytes) -> str:
        digest = hashlib.sha256(data).hexdigest()
        ref = f"local/{digest}"
        path = self.root / digest
        if not path.exists():
            tmp = path.with_suffix(".tmp")
            tmp.write_bytes(data)
            tmp.replace(path)
        return ref

    def get(self, ref: str) -> bytes:
        if not ref.startswith("local/"):
            raise ObjectStoreError(f"not a local ref: {ref}")
        path = self.root / ref.split("/", 1)[1]
        if not path.exists():
            raise ObjectStoreError(f"unknown ref: {ref}")
        return path.read_bytes()
