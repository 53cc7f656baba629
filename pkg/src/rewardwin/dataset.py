#############################
#  RewardWin - Capture Sessions
#
#  Labelled success / non-success renders,
#  grouped in sessions, saved as RWDS files.
#
#  This program is distributed free
#  of charge (open source) under the
#  GNU General Public License
#############################

from __future__ import annotations

import dataclasses
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from . import constants as C
from . import simenv
from .rewardwin_common import (BinaryReader, BinaryWriter, ConfigError, DataError,
                               DimensionMismatchError, derive_seed, make_rng, read_bytes,
                               write_atomically)
from .simenv import EnvConfig, JointAngles, WorldState

log = logging.getLogger(__name__)

# per-session offset applied to every joint sampling range, degrees
SESSION_OFFSET = 10.0
SUCCESS_PER_ROLLOUT = 10
NEAR_MISS_FRACTION = 0.5
ROLLOUT_TRIES = 5

# perturbations of grasped-and-lifted poses (pitch is only raised)
LIFT_PITCH = (0.0, 30.0)
LIFT_ROLL = 20.0
LIFT_ELBOW = 15.0
NEAR_MISS_JITTER = 6.0

HEADER_SIZE = 4 + 2 + 2 + 2 + 2
SESSION_HEADER_SIZE = 2 + 4 + 8


class LabeledImage(NamedTuple):
    image: np.ndarray
    label: int


def quantize(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def dequantize(pixels: np.ndarray) -> np.ndarray:
    return pixels.astype(np.float64) / 255.0


@dataclass(frozen=True, eq=False)
class CaptureSession:
    session_id: int
    seed: int
    labels: np.ndarray               # (n,) uint8, 1 = Success
    pixels: np.ndarray               # (n, height, width) uint8
    states: Optional[Tuple[WorldState, ...]] = None

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.labels.shape != (self.pixels.shape[0],):
            raise DimensionMismatchError("session %d: %d labels for pixel block %r"
                                         % (self.session_id, self.labels.shape[0], self.pixels.shape))

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[2])

    @property
    def height(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def n_success(self) -> int:
        return int(np.count_nonzero(self.labels == C.LABEL_SUCCESS))

    @property
    def n_nonsuccess(self) -> int:
        return len(self) - self.n_success

    def images(self) -> np.ndarray:
        return dequantize(self.pixels)

    @classmethod
    def of(cls, session_id: int, seed: int, images: Sequence[LabeledImage],
           states: Optional[Tuple[WorldState, ...]] = None) -> "CaptureSession":
        if not images:
            raise DataError("session %d has no images" % session_id)
        labels = np.array([item.label for item in images], dtype=np.uint8)
        pixels = np.stack([quantize(item.image) for item in images])
        return cls(int(session_id), int(seed), labels, pixels, states)

    def labeled_images(self) -> Iterator[LabeledImage]:
        for pix, label in zip(self.pixels, self.labels):
            yield LabeledImage(dequantize(pix), int(label))

    def same_as(self, other: "CaptureSession") -> bool:
        return (self.session_id == other.session_id and self.seed == other.seed
                and np.array_equal(self.labels, other.labels)
                and np.array_equal(self.pixels, other.pixels))


@dataclass(frozen=True)
class DatasetSplit:
    train: Tuple[CaptureSession, ...]
    validation: Tuple[CaptureSession, ...]
    test: Tuple[CaptureSession, ...]

    @staticmethod
    def stack(sessions: Sequence[CaptureSession]) -> Tuple[np.ndarray, np.ndarray]:
        if not sessions:
            raise DataError("empty dataset partition")
        images = np.concatenate([s.images() for s in sessions])
        labels = np.concatenate([s.labels for s in sessions]).astype(np.int64)
        return images, labels

    def sizes(self) -> Tuple[int, int, int]:
        return tuple(sum(len(s) for s in part) for part in (self.train, self.validation, self.test))

    @property
    def resolution(self) -> Tuple[int, int]:
        first = (self.train + self.validation + self.test)[0]
        return first.width, first.height


def _offset_joints(joints: JointAngles, offsets: np.ndarray) -> JointAngles:
    return JointAngles.from_array(joints.as_array() + offsets)


def _grasped_at(joints: JointAngles, state: WorldState, config: EnvConfig) -> WorldState:
    cube = tuple(float(c) for c in simenv.gripper_position(joints, config))
    return WorldState(joints, cube, True, state.step_index, state.distractor_position)


def _success_states(rollout_end: WorldState, config: EnvConfig, rng: np.random.Generator,
                    count: int) -> List[WorldState]:
    # the lifted end state itself, then grasped poses seen "from different angles"
    out = [rollout_end]
    base = rollout_end.joints.as_array()
    tries = 0
    while len(out) < count and tries < 20 * count:
        tries += 1
        delta = np.array([rng.uniform(*LIFT_PITCH), rng.uniform(-LIFT_ROLL, LIFT_ROLL),
                          rng.uniform(-LIFT_ELBOW, LIFT_ELBOW), 0.0])
        joints = JointAngles.from_array(base + delta)
        joints = dataclasses.replace(joints, hand=float(rng.uniform(config.hand_close_threshold, C.JOINT_MAX)))
        state = _grasped_at(joints, rollout_end, config)
        if simenv.is_success(state, config):
            out.append(state)
    return out


def _near_miss(states: Sequence[WorldState], config: EnvConfig, rng: np.random.Generator) -> WorldState:
    state = states[int(rng.integers(len(states)))]
    joints = state.joints.as_array()
    joints[:3] += rng.uniform(-NEAR_MISS_JITTER, NEAR_MISS_JITTER, size=3)
    if state.grasped:
        # grasped but short of the lift height stays grasped and below it
        candidate = _grasped_at(JointAngles.from_array(joints), state, config)
        if not simenv.is_success(candidate, config):
            return candidate
        return state
    joints[3] = rng.uniform(C.JOINT_MIN, C.JOINT_MAX)
    return dataclasses.replace(state, joints=JointAngles.from_array(joints), grasped=False)


def _far_pose(config: EnvConfig, rng: np.random.Generator, offsets: np.ndarray) -> WorldState:
    for _ in range(simenv.PLACEMENT_TRIES):
        start = simenv.reset(config, int(rng.integers(2 ** 31)))
        lo = np.clip(C.JOINT_MIN + offsets, C.JOINT_MIN, C.JOINT_MAX)
        hi = np.clip(C.JOINT_MAX + offsets, C.JOINT_MIN, C.JOINT_MAX)
        joints = JointAngles.from_array(rng.uniform(lo, hi))
        gripper = simenv.gripper_position(joints, config)
        if np.linalg.norm(gripper - np.array(start.cube_position)) > config.grasp_radius:
            return dataclasses.replace(start, joints=joints)
    raise ConfigError("no arm pose keeps the gripper outside the %.2f m grasp radius after %d tries"
                      % (config.grasp_radius, simenv.PLACEMENT_TRIES))


def generate_session(config: EnvConfig, session_id: int, seed: int,
                     n_success: int = C.SESSION_SUCCESS,
                     n_nonsuccess: int = C.SESSION_NONSUCCESS) -> CaptureSession:
    """
    Render one capture session. Success images come from scripted-expert
    rollouts that reached the lift, plus perturbed grasped-and-lifted poses.
    Half of the non-success images are near misses taken around the expert's
    pre-success states, the other half random arm poses away from the cube.
    Every joint range is shifted by a per-session offset.
    """
    if n_success < 1 or n_nonsuccess < 1:
        raise ConfigError("session needs at least one image of each class, got %d/%d"
                          % (n_success, n_nonsuccess))
    if not 0 <= session_id <= 0xFFFF:
        raise ConfigError("session_id must fit in u16, got %r" % session_id)
    rng = make_rng(seed)
    offsets = np.zeros(C.N_JOINTS)
    offsets[:3] = rng.uniform(-SESSION_OFFSET, SESSION_OFFSET, size=3)

    success: List[WorldState] = []
    approach: List[WorldState] = []
    failures = 0
    while len(success) < n_success:
        start = simenv.reset(config, int(rng.integers(2 ** 31)))
        state = dataclasses.replace(start, joints=_offset_joints(start.joints, offsets))
        visited = [state]
        while not simenv.is_done(state, config):
            state = simenv.simulate(state, simenv.scripted_expert(state, config), config)
            visited.append(state)
        if not simenv.is_success(state, config):
            failures += 1
            if failures >= ROLLOUT_TRIES and not success:
                raise ConfigError("environment looks unsolvable: the scripted expert failed "
                                  "%d rollouts in a row" % failures)
            continue
        approach.extend(visited[:-1])
        need = min(SUCCESS_PER_ROLLOUT, n_success - len(success))
        success.extend(_success_states(state, config, rng, need))

    n_near = int(round(n_nonsuccess * NEAR_MISS_FRACTION))
    nonsuccess = [_near_miss(approach, config, rng) for _ in range(n_near)]
    nonsuccess += [_far_pose(config, rng, offsets) for _ in range(n_nonsuccess - n_near)]

    states = tuple(success[:n_success] + nonsuccess)
    images = [LabeledImage(simenv.render(s, config),
                           C.LABEL_SUCCESS if simenv.is_success(s, config) else C.LABEL_NONSUCCESS)
              for s in states]
    log.debug("session %d: %d success, %d non-success, offsets %s",
              session_id, n_success, n_nonsuccess, np.round(offsets[:3], 2))
    return CaptureSession.of(session_id, seed, images, states)


def session_seed(base_seed: int, session_id: int) -> int:
    return derive_seed(base_seed, "session", session_id)


def _session_job(args) -> CaptureSession:
    config, session_id, seed, n_success, n_nonsuccess = args
    return generate_session(config, session_id, seed, n_success, n_nonsuccess)


def generate_sessions(config: EnvConfig, count: int = C.SESSION_COUNT, base_seed: int = 0,
                      workers: int = 1, n_success: int = C.SESSION_SUCCESS,
                      n_nonsuccess: int = C.SESSION_NONSUCCESS) -> List[CaptureSession]:
    jobs = [(config, sid, session_seed(base_seed, sid), n_success, n_nonsuccess) for sid in range(count)]
    if workers <= 1:
        sessions = [_session_job(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            sessions = list(pool.map(_session_job, jobs))
    log.info("generated %d sessions of %d images at %dx%d", count, n_success + n_nonsuccess,
             config.width, config.height)
    return sessions


def split(sessions: Sequence[CaptureSession], n_train: int = C.SPLIT_TRAIN,
          n_validation: int = C.SPLIT_VALIDATION, n_test: int = C.SPLIT_TEST) -> DatasetSplit:
    """Whole sessions only: lowest ids train, the next validate, the highest test."""
    ids = [s.session_id for s in sessions]
    if len(set(ids)) != len(ids):
        raise DataError("duplicate session ids %r" % sorted(ids))
    if min(n_train, n_validation, n_test) < 1:
        raise DataError("every partition needs at least one session")
    if len(sessions) != n_train + n_validation + n_test:
        raise DataError("expected %d sessions, got %d" % (n_train + n_validation + n_test, len(sessions)))
    ordered = tuple(sorted(sessions, key=lambda s: s.session_id))
    return DatasetSplit(ordered[:n_train], ordered[n_train:n_train + n_validation],
                        ordered[n_train + n_validation:])


def dataset_file_size(width: int, height: int, session_counts: Sequence[int]) -> int:
    return HEADER_SIZE + sum(SESSION_HEADER_SIZE + n * (1 + width * height) for n in session_counts)


def dataset_to_bytes(sessions: Sequence[CaptureSession]) -> bytes:
    if not sessions:
        raise DataError("no sessions to save")
    width, height = sessions[0].width, sessions[0].height
    w = BinaryWriter()
    w.raw(C.DATASET_MAGIC).pack("HHHH", C.DATASET_VERSION, width, height, len(sessions))
    for s in sessions:
        if (s.width, s.height) != (width, height):
            raise DimensionMismatchError("session %d is %dx%d, expected %dx%d"
                                         % (s.session_id, s.width, s.height, width, height))
        w.pack("HIQ", s.session_id, len(s), s.seed)
        flat = s.pixels.reshape(len(s), -1)
        for label, row in zip(s.labels, flat):
            w.pack("B", int(label)).raw(row.tobytes())
    return w.getvalue()


def dataset_from_bytes(data: bytes, what: str = "dataset",
                       expected_composition: Optional[Tuple[int, int]] = None) -> List[CaptureSession]:
    r = BinaryReader(data, what)
    r.expect_magic(C.DATASET_MAGIC)
    r.expect_version(C.DATASET_VERSION)
    width, height, count = r.unpack("HHH")
    if width < 1 or height < 1:
        raise DimensionMismatchError("%s: bad image size %dx%d" % (what, width, height))
    sessions = []
    for _ in range(count):
        sid, n, seed = r.unpack("HIQ")
        block = np.frombuffer(r.raw(n * (1 + width * height)), dtype=np.uint8).reshape(n, 1 + width * height)
        labels = block[:, 0].copy()
        if np.any(labels > 1):
            raise DataError("%s: session %d holds labels other than 0/1" % (what, sid))
        pixels = block[:, 1:].reshape(n, height, width).copy()
        session = CaptureSession(sid, seed, labels, pixels)
        if expected_composition is not None and (session.n_success, session.n_nonsuccess) != tuple(expected_composition):
            raise DataError("%s: session %d has %d/%d success/non-success images, expected %d/%d"
                            % ((what, sid, session.n_success, session.n_nonsuccess) + tuple(expected_composition)))
        sessions.append(session)
    r.expect_end()
    return sessions


def save_dataset(path: Union[str, Path], sessions: Sequence[CaptureSession]) -> Path:
    return write_atomically(path, dataset_to_bytes(sessions))


def load_dataset(path: Union[str, Path],
                 expected_composition: Optional[Tuple[int, int]] = None) -> List[CaptureSession]:
    return dataset_from_bytes(read_bytes(path), str(path), expected_composition)
