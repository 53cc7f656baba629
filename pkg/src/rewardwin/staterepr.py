#############################
#  RewardWin - State Representations
#
#  Raw pixels, PCA-compressed images and the
#  window of the last N predicted rewards.
#
#  This program is distributed free
#  of charge (open source) under the
#  GNU General Public License
#############################

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

from . import constants as C
from .rewardwin_common import (BinaryReader, BinaryWriter, ConfigError, DataError,
                               DimensionMismatchError, ShapeError, read_bytes, write_atomically)

log = logging.getLogger(__name__)

Resolution = Tuple[int, int]

# relative floor under which a Gram eigenvalue counts as zero
EIGEN_FLOOR = 1e-12


class StateSpec:
    """Which state the agent sees. Parse from "pixels:32x24", "pca:50" or "rewards:15"."""

    kind = ""

    @property
    def dimension(self) -> int:
        raise NotImplementedError

    @staticmethod
    def parse(text: str) -> "StateSpec":
        m = re.fullmatch(r"\s*(\w+)\s*:\s*(\d+)(?:\s*x\s*(\d+))?(?:\s*@\s*(\d+)\s*x\s*(\d+))?\s*", text or "")
        if not m:
            raise ConfigError("bad state spec %r (try pixels:32x24, pca:50 or rewards:15)" % text)
        kind, a, b, rw, rh = m.groups()
        kind = kind.lower()
        res = (int(rw), int(rh)) if rw else None
        if kind == "pixels" and b and not res:
            return Pixels(int(a), int(b))
        if kind == "pca" and not b:
            return PcaImage(int(a), res)
        if kind in ("rewards", "reward") and not b:
            return RewardWindow(int(a), res)
        raise ConfigError("bad state spec %r (try pixels:32x24, pca:50 or rewards:15)" % text)


def _suffix(resolution: Optional[Resolution]) -> str:
    return "@%dx%d" % resolution if resolution else ""


@dataclass(frozen=True)
class Pixels(StateSpec):
    width: int
    height: int
    kind = "pixels"

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ConfigError("pixel state needs positive dimensions, got %dx%d" % (self.width, self.height))

    @property
    def dimension(self) -> int:
        return self.width * self.height

    def __str__(self) -> str:
        return "pixels:%dx%d" % (self.width, self.height)


@dataclass(frozen=True)
class PcaImage(StateSpec):
    k: int = C.PCA_COMPONENTS
    resolution: Optional[Resolution] = None    # basis resolution, None = whatever the basis holds
    kind = "pca"

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("pca state needs k >= 1, got %d" % self.k)

    @property
    def dimension(self) -> int:
        return self.k

    def __str__(self) -> str:
        return "pca:%d%s" % (self.k, _suffix(self.resolution))


@dataclass(frozen=True)
class RewardWindow(StateSpec):
    n: int = C.REWARD_WINDOW
    resolution: Optional[Resolution] = None    # classifier resolution the rewards come from
    kind = "rewards"

    def __post_init__(self):
        if self.n < 1:
            raise ConfigError("reward window needs n >= 1, got %d" % self.n)

    @property
    def dimension(self) -> int:
        return self.n

    def __str__(self) -> str:
        return "rewards:%d%s" % (self.n, _suffix(self.resolution))


@dataclass(frozen=True, eq=False)
class PcaBasis:
    mean: np.ndarray                  # (d,)
    components: np.ndarray            # (k, d), rows orthonormal
    explained_variance: np.ndarray    # (k,), nonincreasing
    resolution: Optional[Resolution] = None

    @property
    def k(self) -> int:
        return int(self.components.shape[0])

    @property
    def dim(self) -> int:
        return int(self.mean.shape[0])

    def same_as(self, other: "PcaBasis") -> bool:
        return (np.array_equal(self.mean, other.mean) and np.array_equal(self.components, other.components)
                and np.array_equal(self.explained_variance, other.explained_variance))


def _as_rows(images: np.ndarray) -> Tuple[np.ndarray, Optional[Resolution]]:
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 3:
        return x.reshape(x.shape[0], -1), (int(x.shape[2]), int(x.shape[1]))
    if x.ndim == 2:
        return x, None
    raise ShapeError("expected (m, height, width) images or (m, d) rows, got %r" % (x.shape,))


def _fix_signs(components: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(components), axis=1)
    signs = np.sign(components[np.arange(components.shape[0]), idx])
    signs[signs == 0] = 1.0
    return components * signs[:, None]


def fit_pca(images: np.ndarray, k: int = C.PCA_COMPONENTS, method: str = "auto") -> PcaBasis:
    """
    Principal components of a stack of images.

    With fewer samples than pixels the m x m Gram matrix is decomposed and its
    eigenvectors mapped back to pixel space; otherwise the d x d covariance is
    decomposed directly. Components come out unit norm, ordered by decreasing
    variance, with the largest-magnitude entry of each one positive.
    """
    x, resolution = _as_rows(images)
    m, d = x.shape
    if k < 1 or k > min(m - 1, d):
        raise DataError("cannot fit %d components to %d samples of dimension %d" % (k, m, d))
    if method == "auto":
        method = "gram" if m < d else "covariance"
    mean = x.mean(axis=0)
    y = x - mean

    if method == "covariance":
        values, vectors = np.linalg.eigh(y.T @ y / (m - 1))
        order = np.argsort(values)[::-1][:k]
        values = values[order]
        components = vectors[:, order].T
    elif method == "gram":
        values, vectors = np.linalg.eigh(y @ y.T / (m - 1))
        order = np.argsort(values)[::-1][:k]
        values = values[order]
        if values[-1] <= EIGEN_FLOOR * max(values[0], EIGEN_FLOOR):
            raise DataError("images span fewer than %d directions" % k)
        components = (y.T @ vectors[:, order]).T
        components /= np.linalg.norm(components, axis=1, keepdims=True)
    else:
        raise ConfigError("unknown pca method %r" % method)

    components = _fix_signs(np.ascontiguousarray(components))
    log.debug("pca: %d of %d samples, d=%d, method %s, top variance %.4g", k, m, d, method, values[0])
    return PcaBasis(mean, components, np.maximum(values, 0.0), resolution)


def pca_project(basis: PcaBasis, image: np.ndarray) -> np.ndarray:
    x = np.asarray(image, dtype=np.float64)
    if x.size == basis.dim:
        return basis.components @ (x.reshape(-1) - basis.mean)
    if x.ndim >= 2 and int(np.prod(x.shape[1:])) == basis.dim:
        return (x.reshape(x.shape[0], -1) - basis.mean) @ basis.components.T
    raise ShapeError("image of shape %r does not match a basis of dimension %d" % (x.shape, basis.dim))


def reconstruct(basis: PcaBasis, coeffs: np.ndarray) -> np.ndarray:
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.shape[-1] != basis.k:
        raise ShapeError("expected %d coefficients, got %r" % (basis.k, coeffs.shape))
    return basis.mean + coeffs @ basis.components


def downsample(image: np.ndarray, width: int, height: int) -> np.ndarray:
    """Block-mean pooling of (..., H, W) down to (..., height, width)."""
    x = np.asarray(image, dtype=np.float64)
    h, w = x.shape[-2:]
    if (w, h) == (width, height):
        return x
    if width < 1 or height < 1 or w % width or h % height:
        raise ShapeError("cannot downsample %dx%d to %dx%d evenly" % (w, h, width, height))
    fy, fx = h // height, w // width
    return x.reshape(x.shape[:-2] + (height, fy, width, fx)).mean(axis=(-3, -1))


class RewardWindowBuffer:
    """The last n rewards of the current episode, oldest first, zero padded."""

    def __init__(self, n: int = C.REWARD_WINDOW):
        if n < 1:
            raise ConfigError("reward window needs n >= 1, got %d" % n)
        self.n = int(n)
        self._values = np.zeros(self.n)
        self.count = 0

    def reset(self) -> None:
        self._values = np.zeros(self.n)
        self.count = 0

    def push(self, reward: float) -> None:
        reward = float(reward)
        if not (0.0 <= reward <= 1.0):
            raise DataError("reward %r outside [0, 1]" % reward)
        self._values = np.roll(self._values, -1)
        self._values[-1] = reward
        self.count += 1

    def encode(self) -> np.ndarray:
        return self._values.copy()

    def __len__(self) -> int:
        return self.n


def push_and_encode(window: RewardWindowBuffer, reward: float) -> np.ndarray:
    window.push(reward)
    return window.encode()


def encode(spec: StateSpec, observation: Optional[np.ndarray] = None,
           window: Optional[RewardWindowBuffer] = None,
           basis: Optional[PcaBasis] = None) -> np.ndarray:
    if isinstance(spec, Pixels):
        if observation is None:
            raise ShapeError("%s needs an observation" % spec)
        return downsample(observation, spec.width, spec.height).reshape(-1)
    if isinstance(spec, PcaImage):
        if observation is None or basis is None:
            raise ShapeError("%s needs an observation and a fitted basis" % spec)
        if basis.k != spec.k:
            raise ShapeError("%s does not match a basis with %d components" % (spec, basis.k))
        if basis.resolution is not None:
            observation = downsample(observation, *basis.resolution)
        return pca_project(basis, observation)
    if isinstance(spec, RewardWindow):
        if window is None or window.n != spec.n:
            raise ShapeError("%s needs a reward window of length %d" % (spec, spec.n))
        return window.encode()
    raise ConfigError("unknown state spec %r" % (spec,))


def _guess_resolution(dim: int) -> Optional[Resolution]:
    # the camera is 4:3
    width = int(round(math.sqrt(dim * 4 / 3)))
    height = dim // width if width else 0
    return (width, height) if width * height == dim and 3 * width == 4 * height else None


def pca_to_bytes(basis: PcaBasis) -> bytes:
    w = BinaryWriter()
    w.raw(C.PCA_MAGIC).pack("HIH", C.PCA_VERSION, basis.dim, basis.k)
    w.f64(basis.mean).f64(basis.components).f64(basis.explained_variance)
    return w.getvalue()


def pca_from_bytes(data: bytes, what: str = "pca basis", resolution: Optional[Resolution] = None) -> PcaBasis:
    r = BinaryReader(data, what)
    r.expect_magic(C.PCA_MAGIC)
    r.expect_version(C.PCA_VERSION)
    dim, k = r.unpack("IH")
    mean = r.f64(dim)
    components = r.f64(k * dim).reshape(k, dim)
    variance = r.f64(k)
    r.expect_end()
    if resolution is None:
        resolution = _guess_resolution(dim)
    elif resolution[0] * resolution[1] != dim:
        raise DimensionMismatchError("%s: %dx%d images do not have %d pixels" % ((what,) + tuple(resolution) + (dim,)))
    return PcaBasis(mean, components, variance, resolution)


def save_pca(path: Union[str, Path], basis: PcaBasis) -> Path:
    return write_atomically(path, pca_to_bytes(basis))


def load_pca(path: Union[str, Path], resolution: Optional[Resolution] = None) -> PcaBasis:
    return pca_from_bytes(read_bytes(path), str(path), resolution)
