#############################
#  RewardWin - Common
#
#  Errors, logging, binary IO and seeding
#  shared by every module.
#
#  This program is distributed free
#  of charge (open source) under the
#  GNU General Public License
#############################

from __future__ import annotations

import logging
import os
import platform
import struct
import sys
import time
from pathlib import Path
from typing import Iterable, Optional, Union

import numpy as np

log = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s | %(levelname)s | %(message)s"


class RewardWinError(Exception):
    """Base class of every error raised by this package."""


class ConfigError(RewardWinError):
    pass


class UsageError(RewardWinError):
    pass


class ShapeError(RewardWinError):
    pass


class StaleTapeError(RewardWinError):
    pass


class NonFiniteError(RewardWinError):
    pass


class DataError(RewardWinError):
    pass


class FormatError(RewardWinError):
    pass


class MagicMismatchError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class DimensionMismatchError(FormatError):
    pass


def setup_logging(run_dir: Optional[Union[str, Path]] = None, verbose: bool = False) -> Optional[Path]:
    """
    Log to the console, and to run.log inside run_dir when one is given.
    Existing handlers are cleared so repeated calls don't duplicate lines.
    """
    level = logging.DEBUG if verbose else logging.INFO
    root = logging.getLogger()
    root.setLevel(level)
    for h in list(root.handlers):
        root.removeHandler(h)

    ch = logging.StreamHandler()
    ch.setLevel(level)
    ch.setFormatter(logging.Formatter(LOG_FORMAT))
    root.addHandler(ch)

    log_path = None
    if run_dir is not None:
        os.makedirs(run_dir, exist_ok=True)
        log_path = Path(run_dir) / "run.log"
        fh = logging.FileHandler(log_path, mode="w", encoding="utf-8")
        fh.setLevel(level)
        fh.setFormatter(logging.Formatter(LOG_FORMAT))
        root.addHandler(fh)
    return log_path


def derive_seed(*parts: Union[int, str]) -> int:
    # strings are hashed through their bytes so the result doesn't depend on PYTHONHASHSEED
    entropy = []
    for p in parts:
        if isinstance(p, str):
            entropy.extend(p.encode("utf-8"))
        else:
            entropy.append(int(p))
    return int(np.random.SeedSequence(entropy).generate_state(2, dtype=np.uint64)[0] >> np.uint64(1))


def make_rng(*parts: Union[int, str]) -> np.random.Generator:
    return np.random.default_rng(derive_seed(*parts))


def run_info() -> dict:
    # gather what is needed to tell two runs apart
    info = {
        "date": time.ctime(),
        "python": sys.version.split()[0],
        "numpy": np.__version__,
        "platform": platform.platform(),
        "machine": platform.machine(),
        "cwd": os.getcwd(),
    }
    for name in ("USER", "LANG", "OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS"):
        if name in os.environ:
            info[name] = os.environ[name]
    return info


def check_finite(name: str, arrays: Iterable[np.ndarray]) -> None:
    for i, a in enumerate(arrays):
        if a is not None and not np.all(np.isfinite(a)):
            raise NonFiniteError("%s: non-finite values in entry %d" % (name, i))


class BinaryWriter:
    """Little-endian record writer used by all the RW* file formats."""

    def __init__(self) -> None:
        self._parts: list = []

    def raw(self, data: bytes) -> "BinaryWriter":
        self._parts.append(bytes(data))
        return self

    def pack(self, fmt: str, *values) -> "BinaryWriter":
        self._parts.append(struct.pack("<" + fmt, *values))
        return self

    def f64(self, array: np.ndarray) -> "BinaryWriter":
        self._parts.append(np.ascontiguousarray(array, dtype="<f8").tobytes())
        return self

    def text(self, value: str) -> "BinaryWriter":
        data = value.encode("utf-8")
        return self.pack("H", len(data)).raw(data)

    def getvalue(self) -> bytes:
        return b"".join(self._parts)


class BinaryReader:

    def __init__(self, data: bytes, what: str = "file") -> None:
        self._data = memoryview(data)
        self._pos = 0
        self.what = what

    @property
    def remaining(self) -> int:
        return len(self._data) - self._pos

    def raw(self, n: int) -> bytes:
        if n < 0 or self._pos + n > len(self._data):
            raise TruncatedFileError("%s: truncated at byte %d (wanted %d more, have %d)"
                                     % (self.what, self._pos, n, self.remaining))
        out = self._data[self._pos:self._pos + n].tobytes()
        self._pos += n
        return out

    def unpack(self, fmt: str):
        fmt = "<" + fmt
        values = struct.unpack(fmt, self.raw(struct.calcsize(fmt)))
        return values[0] if len(values) == 1 else values

    def f64(self, count: int) -> np.ndarray:
        return np.frombuffer(self.raw(8 * count), dtype="<f8").astype(np.float64)

    def text(self) -> str:
        n = self.unpack("H")
        return self.raw(n).decode("utf-8")

    def expect_magic(self, magic: bytes) -> None:
        found = self.raw(len(magic))
        if found != magic:
            raise MagicMismatchError("%s: bad magic %r, expected %r" % (self.what, found, magic))

    def expect_version(self, version: int) -> None:
        found = self.unpack("H")
        if found != version:
            raise VersionMismatchError("%s: format version %d, expected %d" % (self.what, found, version))

    def expect_end(self) -> None:
        if self.remaining:
            raise DimensionMismatchError("%s: %d unexpected trailing bytes" % (self.what, self.remaining))


def write_atomically(path: Union[str, Path], payload: bytes) -> Path:
    path = Path(path)
    if path.parent and not path.parent.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(payload)
    os.replace(tmp, path)
    return path


def read_bytes(path: Union[str, Path]) -> bytes:
    try:
        with open(path, "rb") as f:
            return f.read()
    except OSError as e:
        raise ConfigError("cannot read %s: %s" % (path, e.strerror or e)) from e
