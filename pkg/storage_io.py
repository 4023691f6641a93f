# backend/storage_io.py
"""
Binary file formats, all little-endian:

  FBNK      "FBNK" | u32 rows | u32 cols | rows*cols float32 (row-major)
  SVMODEL1  "SVMODEL1" | u32 header length | JSON header | float32 params in declaration order
  SVSPK1    "SVSPK1" | u32 id length | id bytes (utf-8) | u32 count | u32 dim | dim float32
"""
import binascii
import json
import struct
from pathlib import Path
from typing import Union

import numpy as np

from errors import FormatError
from features import FeatureMatrix
from networks import NetworkParams
from scoring import SpeakerModel
from settings import NetworkConfig

FBNK_MAGIC = b"FBNK"
MODEL_MAGIC = b"SVMODEL1"
SPEAKER_MAGIC = b"SVSPK1"
_U32 = struct.Struct("<I")
_F32 = np.dtype("<f4")

PathLike = Union[str, Path]


def _ensure_parent(path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)


def _read_magic(path: Path, blob: bytes, magic: bytes) -> None:
    if not blob.startswith(magic):
        raise FormatError(f"{path} does not look like a {magic.decode()} file (header={binascii.hexlify(blob[:16])!r})")


class _Reader:
    def __init__(self, path: Path, blob: bytes, offset: int) -> None:
        self.path, self.blob, self.offset = path, blob, offset

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.blob):
            raise FormatError(f"{self.path} is truncated at byte {self.offset} (wanted {n} more)")
        out = self.blob[self.offset:self.offset + n]
        self.offset += n
        return out

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def floats(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(count * 4), dtype=_F32).astype(np.float64)

    def done(self) -> None:
        if self.offset != len(self.blob):
            raise FormatError(f"{self.path} has {len(self.blob) - self.offset} trailing bytes")


def _read(path: PathLike, magic: bytes) -> _Reader:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise FormatError(f"cannot read {path}: {e}") from e
    _read_magic(path, blob, magic)
    return _Reader(path, blob, len(magic))


# ------------------------------ FBNK ------------------------------
def write_features(path: PathLike, fbank: FeatureMatrix) -> Path:
    path = Path(path)
    _ensure_parent(path)
    rows, cols = fbank.values.shape
    path.write_bytes(FBNK_MAGIC + _U32.pack(rows) + _U32.pack(cols) + fbank.values.astype(_F32).tobytes())
    return path


def read_features(path: PathLike) -> FeatureMatrix:
    r = _read(path, FBNK_MAGIC)
    rows, cols = r.u32(), r.u32()
    values = r.floats(rows * cols).reshape(rows, cols)
    r.done()
    return FeatureMatrix(values)


# ------------------------------ SVMODEL1 ------------------------------
def save_checkpoint(path: PathLike, params: NetworkParams) -> Path:
    path = Path(path)
    _ensure_parent(path)
    header = {
        "network": params.config.network,
        "architecture": params.config.model_dump(),
        "speaker_ids": list(params.speaker_ids),
        "params": [[name, list(arr.shape)] for name, arr in params.arrays.items()],
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(arr, dtype=_F32).tobytes() for arr in params.arrays.values())
    path.write_bytes(MODEL_MAGIC + _U32.pack(len(head)) + head + payload)
    print(f"[storage_io] checkpoint -> {path} ({path.stat().st_size} bytes)")
    return path


def load_checkpoint(path: PathLike) -> NetworkParams:
    r = _read(path, MODEL_MAGIC)
    try:
        header = json.loads(r.take(r.u32()).decode("utf-8"))
        config = NetworkConfig(**header["architecture"])
        arrays = {}
        for name, shape in header["params"]:
            arrays[name] = r.floats(int(np.prod(shape, dtype=np.int64))).reshape(shape)
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"{path}: malformed checkpoint header: {e}") from e
    r.done()
    if config.network != header.get("network"):
        raise FormatError(f"{path}: network tag {header.get('network')!r} disagrees with architecture")
    return NetworkParams(config, arrays, list(header.get("speaker_ids", [])))


# ------------------------------ SVSPK1 ------------------------------
def save_speaker_model(path: PathLike, model: SpeakerModel) -> Path:
    path = Path(path)
    _ensure_parent(path)
    sid = model.speaker_id.encode("utf-8")
    vec = np.asarray(model.vector).astype(_F32)
    path.write_bytes(SPEAKER_MAGIC + _U32.pack(len(sid)) + sid + _U32.pack(model.count) + _U32.pack(vec.size) + vec.tobytes())
    return path


def load_speaker_model(path: PathLike) -> SpeakerModel:
    r = _read(path, SPEAKER_MAGIC)
    try:
        speaker_id = r.take(r.u32()).decode("utf-8")
    except UnicodeDecodeError as e:
        raise FormatError(f"{path}: speaker id is not valid UTF-8: {e}") from e
    count, dim = r.u32(), r.u32()
    vector = r.floats(dim)
    r.done()
    return SpeakerModel(speaker_id=speaker_id, vector=vector, count=count)
