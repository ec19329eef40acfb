"""On-disk formats: raw image store, tensor bundles and the content-addressed artifact index."""
import hashlib
import json
import logging
import os
import struct
from pathlib import Path

import numpy as np

from cavlab.config import SCHEMA_VERSION
from cavlab.errors import MissingArtifactError, SchemaVersionError

logger = logging.getLogger(__name__)

IMAGE_MAGIC = b"CAVL"
BUNDLE_MAGIC = b"CAVB"
BUNDLE_VERSION = 1


def digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


# ---------------------------------------------------------------- image store

def encode_images(images: np.ndarray) -> bytes:
    """16-byte header (magic, H, W, C as uint32 LE) followed by LE float32 pixels of N images."""
    if images.ndim == 3:
        images = images[None]
    _, h, w, c = images.shape
    header = IMAGE_MAGIC + struct.pack("<III", h, w, c)
    return header + np.ascontiguousarray(images, dtype="<f4").tobytes()


def decode_images(data: bytes) -> np.ndarray:
    if len(data) < 16 or data[:4] != IMAGE_MAGIC:
        raise SchemaVersionError("not an image store: bad magic")
    h, w, c = struct.unpack("<III", data[4:16])
    pixels = np.frombuffer(data, dtype="<f4", offset=16)
    per_image = h * w * c
    if per_image == 0 or pixels.size % per_image:
        raise SchemaVersionError(f"image store length does not divide into {h}x{w}x{c} images")
    return pixels.reshape(-1, h, w, c).astype(np.float32)


# ---------------------------------------------------------------- tensor bundle

def encode_bundle(arrays: dict[str, np.ndarray], meta: dict | None = None, dtype: str = "<f4") -> bytes:
    """Named tensors in one little-endian blob with a JSON header.

    Layout: magic, version (uint32), header length (uint32), header, tensors in header order.
    """
    entries = []
    blobs = []
    for name, array in arrays.items():
        array = np.asarray(array)
        kind = dtype if array.dtype.kind == "f" else "<i8"
        entries.append({"name": name, "dtype": kind, "shape": list(array.shape)})
        blobs.append(np.ascontiguousarray(array, dtype=kind).tobytes())
    header = json.dumps(
        {"schema_version": SCHEMA_VERSION, "tensors": entries, "meta": meta or {}}, sort_keys=True
    ).encode("utf-8")
    return BUNDLE_MAGIC + struct.pack("<II", BUNDLE_VERSION, len(header)) + header + b"".join(blobs)


def decode_bundle(data: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if data[:4] != BUNDLE_MAGIC:
        raise SchemaVersionError("not a tensor bundle: bad magic")
    version, header_len = struct.unpack("<II", data[4:12])
    if version != BUNDLE_VERSION:
        raise SchemaVersionError(f"tensor bundle version {version}, expected {BUNDLE_VERSION}")
    header = json.loads(data[12 : 12 + header_len].decode("utf-8"))
    if header.get("schema_version") != SCHEMA_VERSION:
        raise SchemaVersionError(
            f"tensor bundle schema {header.get('schema_version')}, expected {SCHEMA_VERSION}"
        )
    offset = 12 + header_len
    arrays = {}
    for entry in header["tensors"]:
        dt = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arrays[entry["name"]] = np.frombuffer(data, dtype=dt, count=count, offset=offset).reshape(entry["shape"]).copy()
        offset += count * dt.itemsize
    return arrays, header["meta"]


# ---------------------------------------------------------------- artifact index

class ArtifactStore:
    """Output directory whose `index.json` maps stage names to digest-named files."""

    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)

    @property
    def index_path(self) -> Path:
        return self.root / "index.json"

    def index(self) -> dict[str, dict[str, str]]:
        if not self.index_path.exists():
            return {}
        return json.loads(self.index_path.read_text(encoding="utf-8"))

    def put(self, stage: str, data: bytes, suffix: str) -> Path:
        self.root.mkdir(parents=True, exist_ok=True)
        d = digest(data)
        path = self.root / f"{stage}-{d[:16]}{suffix}"
        if path.exists() and digest(path.read_bytes()) == d:
            logger.info("cache hit for %s: %s", stage, path.name)
        else:
            path.write_bytes(data)
        index = self.index()
        index[stage] = {"file": path.name, "digest": d}
        self.index_path.write_text(json.dumps(index, indent=2, sort_keys=True), encoding="utf-8")
        return path

    def path(self, stage: str) -> Path:
        entry = self.index().get(stage)
        if entry is None:
            raise MissingArtifactError(f"Missing artifact store {stage!r} in {self.root}; run the upstream stage first")
        path = self.root / entry["file"]
        if not path.exists():
            raise MissingArtifactError(f"Artifact file {path} for {stage!r} is missing")
        return path

    def get(self, stage: str) -> bytes:
        return self.path(stage).read_bytes()

    def has(self, stage: str) -> bool:
        try:
            self.path(stage)
        except MissingArtifactError:
            return False
        return True

    def digest_of(self, stage: str) -> str:
        return self.index()[stage]["digest"] if self.has(stage) else ""

    def put_json(self, stage: str, payload: dict) -> Path:
        return self.put(stage, json.dumps(payload, indent=2, sort_keys=True).encode("utf-8"), ".json")

    def get_json(self, stage: str) -> dict:
        return json.loads(self.get(stage).decode("utf-8"))
