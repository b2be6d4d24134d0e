import zlib

import numpy as np
import torch


class NumericalError(RuntimeError):
    """Raised when a state, loss or estimate becomes non-finite."""


class FormatError(ValueError):
    """Raised when a binary artifact has a bad magic tag or shape header."""


def derive_rng(seed, role=""):
    """Child generator keyed by ``(seed, role)``.

    The role string is hashed with crc32 so streams are stable across
    processes and Python versions (``hash()`` is salted).
    """
    return np.random.default_rng([int(seed), zlib.crc32(role.encode())])


def derive_seed(seed, role=""):
    return int(derive_rng(seed, role).integers(2**31 - 1))


def to_tensor(x, dtype=None):
    if isinstance(x, torch.Tensor):
        return x if dtype is None else x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype or torch.float64)


def check_finite(x, what="state"):
    ok = torch.isfinite(x).all() if isinstance(x, torch.Tensor) else np.isfinite(x).all()
    if not ok:
        raise NumericalError(f"non-finite {what}")
