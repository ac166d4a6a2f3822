"""
Model persistence: the flat binary weight container with its JSON sidecar,
and the head registry index mapping (meal_id, texture) to weight files.

Container layout (little-endian):
    magic b"PNTW" | version <H | manifest length <I | manifest JSON | float64 payload
The manifest lists every array as {name, shape, dtype, offset} with offsets
in bytes from the start of the payload.
"""

import json
import logging
import struct
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

from errors import MissingModel, WeightFormatError

logger = logging.getLogger(__name__)

MAGIC = b"PNTW"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHI")
_DTYPE = "<f8"


def sidecar_path(path: Union[str, Path]) -> Path:
    return Path(path).with_suffix(".json")


def save_weights(path: Union[str, Path], params: Dict[str, np.ndarray],
                 metadata: Optional[Dict[str, Any]] = None) -> Path:
    """Write a weight container plus its JSON sidecar; arrays are stored in name order"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    manifest = []
    chunks = []
    offset = 0
    for name in sorted(params):
        array = np.ascontiguousarray(params[name], dtype=_DTYPE)
        manifest.append({"name": name, "shape": list(array.shape), "dtype": _DTYPE, "offset": offset})
        chunks.append(array.tobytes())
        offset += array.nbytes

    manifest_bytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, FORMAT_VERSION, len(manifest_bytes)))
        f.write(manifest_bytes)
        for chunk in chunks:
            f.write(chunk)

    with open(sidecar_path(path), "w", encoding="utf-8") as f:
        json.dump(metadata or {}, f, indent=2, sort_keys=True, ensure_ascii=False)

    logger.info("Saved %d arrays to %s", len(manifest), path)
    return path


def load_weights(path: Union[str, Path]) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    """Read a weight container and its sidecar (empty metadata when the sidecar is missing)"""
    path = Path(path)
    if not path.exists():
        raise MissingModel(f"weight file not found: {path}")

    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise WeightFormatError(f"{path}: truncated header")
    magic, version, manifest_len = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise WeightFormatError(f"{path}: not a weight container (magic {magic!r})")
    if version != FORMAT_VERSION:
        raise WeightFormatError(f"{path}: unsupported container version {version}")

    start = _HEADER.size
    try:
        manifest = json.loads(data[start:start + manifest_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise WeightFormatError(f"{path}: unreadable manifest ({e})") from e
    payload = data[start + manifest_len:]

    params = {}
    for entry in manifest:
        if entry.get("dtype") != _DTYPE:
            raise WeightFormatError(f"{path}: unsupported dtype {entry.get('dtype')}")
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = entry["offset"] + count * 8
        if end > len(payload):
            raise WeightFormatError(f"{path}: payload truncated at '{entry['name']}'")
        params[entry["name"]] = np.frombuffer(
            payload, dtype=_DTYPE, count=count, offset=entry["offset"]).reshape(shape).astype(np.float64)

    metadata = {}
    sidecar = sidecar_path(path)
    if sidecar.exists():
        with open(sidecar, "r", encoding="utf-8") as f:
            metadata = json.load(f)
    return params, metadata


class HeadRegistry:
    """JSON index of trained meal heads, keyed by meal id then texture tag ("*" = unfiltered)"""

    ANY_TEXTURE = "*"

    def __init__(self, index_path: Union[str, Path]):
        self.index_path = Path(index_path)
        self.entries: Dict[str, Dict[str, str]] = {}
        self.init_registry()

    def init_registry(self):
        """Load the index, creating an empty one if it does not exist yet"""
        if self.index_path.exists():
            with open(self.index_path, "r", encoding="utf-8") as f:
                self.entries = json.load(f)
        else:
            self.index_path.parent.mkdir(parents=True, exist_ok=True)
            self._write()

    def _write(self):
        with open(self.index_path, "w", encoding="utf-8") as f:
            json.dump(self.entries, f, indent=2, sort_keys=True)

    def register(self, meal_id: str, weight_path: Union[str, Path], texture: Optional[str] = None):
        """Add or replace a head; paths are stored relative to the index file when possible"""
        weight_path = Path(weight_path)
        try:
            stored = str(weight_path.resolve().relative_to(self.index_path.parent.resolve()))
        except ValueError:
            stored = str(weight_path.resolve())
        self.entries.setdefault(meal_id, {})[texture or self.ANY_TEXTURE] = stored
        self._write()

    def lookup(self, meal_id: str, texture: Optional[str] = None) -> Optional[Path]:
        """Head file for the meal and texture, falling back to the unfiltered head"""
        by_texture = self.entries.get(meal_id)
        if not by_texture:
            return None
        stored = by_texture.get(texture or self.ANY_TEXTURE) or by_texture.get(self.ANY_TEXTURE)
        if stored is None:
            return None
        path = Path(stored)
        return path if path.is_absolute() else self.index_path.parent / path

    def meals(self) -> List[str]:
        return sorted(self.entries)
