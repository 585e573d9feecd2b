"""Bit-exact binary files for model checkpoints and galleries.

Checkpoint layout (magic LGN1):
  bytes 0-3   magic "LGN1"
  u32         format version
  u32         config text length, then that many UTF-8 bytes
  u32         record count
  per record  u32 name length, UTF-8 name, u32 ndim, ndim x u32 dims,
              raw little-endian float32 values in C order

Gallery layout (magic LGG1):
  bytes 0-3   magic "LGG1"
  u32         format version
  u32         producing-model fingerprint length, then UTF-8 fingerprint
  u32         row count, then per row: u32 id length, UTF-8 instance id
  u32         embedding dim, then raw little-endian float32 rows

All integers are little-endian u32. Any layout change requires bumping
FORMAT_VERSION; the committed fixture files under tests/data pin the
current layout byte for byte. Writes land in a temp file next to the
target and move into place with os.replace, so a concurrent reader never
sees a partial file.
"""

import os
import struct
import tempfile
import warnings
from pathlib import Path

import numpy as np

from .model import LogoNetConfig, LogoNetModel
from .retrieval import Gallery
from .tensor import Tensor

CHECKPOINT_MAGIC = b"LGN1"
GALLERY_MAGIC = b"LGG1"
FORMAT_VERSION = 1


def _u32(value: int) -> bytes:
    return struct.pack("<I", value)


def _text(value: str) -> bytes:
    raw = value.encode("utf-8")
    return _u32(len(raw)) + raw


def _f4(array: np.ndarray) -> bytes:
    return np.ascontiguousarray(array, dtype="<f4").tobytes()


class _Reader:
    """Cursor over a byte string; every failure names the offset."""

    def __init__(self, buf: bytes):
        self.buf = buf
        self.offset = 0

    def take(self, n: int) -> bytes:
        have = len(self.buf) - self.offset
        if have < n:
            raise ValueError(f"truncated file at offset {self.offset}: "
                             f"wanted {n} bytes, have {have}")
        out = self.buf[self.offset:self.offset + n]
        self.offset += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def text(self) -> str:
        start = self.offset
        raw = self.take(self.u32())
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ValueError(f"invalid UTF-8 at offset {start}: {exc}") from exc

    def done(self):
        if self.offset != len(self.buf):
            raise ValueError(f"trailing data at offset {self.offset}")


def _check_header(reader: _Reader, magic: bytes):
    got = reader.take(4)
    if got != magic:
        raise ValueError(f"bad magic at offset 0: {got!r}")
    version = reader.u32()
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported format version {version} at offset 4")


def _atomic_write(path, blob: bytes):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def save_checkpoint(model: LogoNetModel, path) -> None:
    parts = [CHECKPOINT_MAGIC, _u32(FORMAT_VERSION),
             _text(model.config.canonical_text())]
    params = model.parameters()
    parts.append(_u32(len(params)))
    for name, tensor in params:
        parts.append(_text(name))
        parts.append(_u32(tensor.data.ndim))
        for dim in tensor.data.shape:
            parts.append(_u32(dim))
        parts.append(_f4(tensor.data))
    _atomic_write(path, b"".join(parts))


def _read_record(reader: _Reader):
    name = reader.text()
    ndim = reader.u32()
    shape = tuple(reader.u32() for _ in range(ndim))
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    raw = reader.take(4 * count)
    values = np.frombuffer(raw, dtype="<f4").reshape(shape)
    return name, values.astype(np.float32)


def load_checkpoint(path) -> LogoNetModel:
    reader = _Reader(Path(path).read_bytes())
    _check_header(reader, CHECKPOINT_MAGIC)
    config = LogoNetConfig.from_text(reader.text())
    names, tensors = [], []
    for _ in range(reader.u32()):
        name, values = _read_record(reader)
        names.append(name)
        tensors.append(Tensor(values, requires_grad=True))
    reader.done()
    model = LogoNetModel.from_tensors(config, tensors)
    expected = [n for n, _ in model.parameters()]
    for i, (got, want) in enumerate(zip(names, expected)):
        if got != want:
            raise ValueError(f"record {i} named {got!r}, expected {want!r}")
    return model


def save_gallery(gallery: Gallery, path) -> None:
    if gallery.embeddings.shape[0] == 0:
        raise ValueError("refusing to save an empty gallery")
    parts = [GALLERY_MAGIC, _u32(FORMAT_VERSION), _text(gallery.fingerprint),
             _u32(len(gallery.instance_ids))]
    parts += [_text(instance_id) for instance_id in gallery.instance_ids]
    parts.append(_u32(gallery.embeddings.shape[1]))
    parts.append(_f4(gallery.embeddings))
    _atomic_write(path, b"".join(parts))


def load_gallery(path, expected_fingerprint: str = None) -> Gallery:
    """Read a gallery file; warns if it came from a different model."""
    reader = _Reader(Path(path).read_bytes())
    _check_header(reader, GALLERY_MAGIC)
    fingerprint = reader.text()
    ids = tuple(reader.text() for _ in range(reader.u32()))
    dim = reader.u32()
    raw = reader.take(4 * len(ids) * dim)
    embeddings = np.frombuffer(raw, dtype="<f4").reshape(len(ids), dim)
    reader.done()
    if expected_fingerprint is not None and fingerprint != expected_fingerprint:
        warnings.warn(f"gallery fingerprint {fingerprint} does not match "
                      f"model fingerprint {expected_fingerprint}",
                      RuntimeWarning, stacklevel=2)
    return Gallery(instance_ids=ids, embeddings=embeddings.astype(np.float32),
                   fingerprint=fingerprint)
