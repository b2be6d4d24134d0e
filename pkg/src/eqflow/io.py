"""Array containers on disk.

Layout (little-endian): 5-byte magic, ``uint32`` rank, ``rank`` x ``uint32``
shape, then the array as row-major float32.  ``EQFD1`` holds datasets
(``n x d`` or ``n x c x h x w``); ``EQFR1`` holds rollouts with frames on the
leading axis.
"""
import os
import struct
import tempfile

import numpy as np

from ._util import FormatError

DATASET_MAGIC = b"EQFD1"
ROLLOUT_MAGIC = b"EQFR1"


def pack_array(arr, magic=DATASET_MAGIC):
    arr = np.ascontiguousarray(arr, dtype="<f4")
    return magic + struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape) + arr.tobytes()


def unpack_array(buf, magic=DATASET_MAGIC):
    if buf[:5] != magic:
        raise FormatError(f"expected magic {magic!r}, found {bytes(buf[:5])!r}")
    if len(buf) < 9:
        raise FormatError("truncated header")
    (rank,) = struct.unpack_from("<I", buf, 5)
    if rank == 0 or rank > 8 or len(buf) < 9 + 4 * rank:
        raise FormatError("bad rank in header")
    shape = struct.unpack_from(f"<{rank}I", buf, 9)
    off = 9 + 4 * rank
    count = int(np.prod(shape))
    if len(buf) - off != 4 * count:
        raise FormatError(f"payload holds {(len(buf) - off) // 4} values, header says {count}")
    return np.frombuffer(buf, dtype="<f4", offset=off).reshape(shape).astype(np.float32)


def atomic_write(path, data):
    """Write bytes via a temp file in the same directory, then rename into place."""
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)), prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_dataset(path, arr):
    atomic_write(path, pack_array(arr, DATASET_MAGIC))


def load_dataset(path):
    with open(path, "rb") as fh:
        return unpack_array(fh.read(), DATASET_MAGIC)


def save_rollout(path, frames):
    atomic_write(path, pack_array(frames, ROLLOUT_MAGIC))


def load_rollout(path):
    with open(path, "rb") as fh:
        return unpack_array(fh.read(), ROLLOUT_MAGIC)
