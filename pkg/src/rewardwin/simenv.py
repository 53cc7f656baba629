#############################
#  RewardWin - Simulated Grab-and-Lift
#
#  A deterministic kinematic right arm (four
#  joints), a cube on a table and a grayscale
#  camera looking at both.
#
#  This program is distributed free
#  of charge (open source) under the
#  GNU General Public License
#############################

from __future__ import annotations

import dataclasses
import itertools
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Tuple, Union

import numpy as np

from . import constants as C
from .preferences import (format_preferences, read_preferences, to_bool, to_float, to_int,
                          to_floats, to_pair, to_resolution)
from .rewardwin_common import ConfigError, UsageError, make_rng

log = logging.getLogger(__name__)

Image = np.ndarray   # (height, width) float64 in [0, 1]
Vec3 = Tuple[float, float, float]

# default rest pose and the half-ranges rest_spread scales
REST_POSE = (25.0, 90.0, 5.0, 15.0)
REST_HALF_RANGE = (15.0, 25.0, 5.0, 15.0)

# cube placement acceptance, relative to total arm reach
MIN_REACH_FRACTION = 0.10
MAX_REACH_FRACTION = 0.92
MIN_HORIZONTAL_FRACTION = 0.35
AZIMUTH_RANGE = (-60.0, 30.0)
PLACEMENT_TRIES = 100
DISTRACTOR_GAP = 0.12

# per-joint step fractions searched by the scripted expert
EXPERT_FRACTIONS = (-1.0, -0.5, -0.25, 0.0, 0.25, 0.5, 1.0)
EXPERT_CLOSE_BAND = 2.0


@dataclass(frozen=True)
class JointAngles:
    shoulder_pitch: float
    shoulder_roll: float
    elbow_roll: float
    hand: float

    @classmethod
    def from_array(cls, values) -> "JointAngles":
        v = np.clip(np.asarray(values, dtype=np.float64), C.JOINT_MIN, C.JOINT_MAX)
        return cls(float(v[0]), float(v[1]), float(v[2]), float(v[3]))

    def as_array(self) -> np.ndarray:
        return np.array([self.shoulder_pitch, self.shoulder_roll, self.elbow_roll, self.hand])


@dataclass(frozen=True)
class EnvConfig:
    upper_arm_len: float = C.UPPER_ARM_LEN
    forearm_len: float = C.FOREARM_LEN
    shoulder_height: float = C.SHOULDER_HEIGHT
    table_height: float = C.TABLE_HEIGHT
    table_near: float = C.TABLE_NEAR
    table_far: float = C.TABLE_FAR
    table_half_width: float = C.TABLE_HALF_WIDTH
    cube_side: float = C.CUBE_SIDE
    grasp_radius: float = C.GRASP_RADIUS
    hand_close_threshold: float = C.HAND_CLOSE_THRESHOLD
    lift_height: float = C.LIFT_HEIGHT
    max_steps: int = C.MAX_STEPS
    omega_max: float = C.OMEGA_MAX
    resolution: Tuple[int, int] = C.RESOLUTION
    seed: int = 0
    cube_center: Tuple[float, float] = (0.25, -0.05)
    cube_spread: float = 1.0
    rest_pose: Tuple[float, float, float, float] = REST_POSE
    rest_spread: float = 1.0
    distractor: bool = True

    def __post_init__(self):
        for name in ("upper_arm_len", "forearm_len", "shoulder_height", "table_height",
                     "cube_side", "grasp_radius", "lift_height", "omega_max"):
            if not getattr(self, name) > 0:
                raise ConfigError("%s must be > 0, got %r" % (name, getattr(self, name)))
        if self.max_steps < 1:
            raise ConfigError("max_steps must be >= 1, got %r" % self.max_steps)
        if len(self.resolution) != 2 or min(self.resolution) < 8:
            raise ConfigError("resolution components must be >= 8, got %r" % (self.resolution,))
        if not self.table_near < self.table_far:
            raise ConfigError("table_near must be < table_far")
        if not C.JOINT_MIN < self.hand_close_threshold <= C.JOINT_MAX:
            raise ConfigError("hand_close_threshold must be in (0, 180]")
        if self.cube_spread < 0 or self.rest_spread < 0:
            raise ConfigError("cube_spread and rest_spread must be >= 0")
        if len(self.rest_pose) != C.N_JOINTS or not all(C.JOINT_MIN <= a <= C.JOINT_MAX for a in self.rest_pose):
            raise ConfigError("rest_pose must be %d angles in [0, 180], got %r" % (C.N_JOINTS, self.rest_pose))

    @property
    def reach(self) -> float:
        return self.upper_arm_len + self.forearm_len

    @property
    def width(self) -> int:
        return int(self.resolution[0])

    @property
    def height(self) -> int:
        return int(self.resolution[1])

    def with_resolution(self, width: int, height: int) -> "EnvConfig":
        return dataclasses.replace(self, resolution=(int(width), int(height)))

    @classmethod
    def keys(cls) -> Tuple[str, ...]:
        return tuple(f.name for f in dataclasses.fields(cls))

    @classmethod
    def from_preferences(cls, values: Mapping[str, str], base: Optional["EnvConfig"] = None) -> "EnvConfig":
        base = base or cls()
        changes = {}
        for key, raw in values.items():
            if key not in cls.keys():
                raise ConfigError("unknown environment key %r" % key)
            if key in ("max_steps", "seed"):
                changes[key] = to_int(key, raw)
            elif key == "resolution":
                changes[key] = to_resolution(key, raw)
            elif key == "cube_center":
                changes[key] = to_pair(key, raw)
            elif key == "rest_pose":
                changes[key] = to_floats(key, raw, C.N_JOINTS)
            elif key == "distractor":
                changes[key] = to_bool(key, raw)
            else:
                changes[key] = to_float(key, raw)
        return dataclasses.replace(base, **changes)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "EnvConfig":
        return cls.from_preferences(read_preferences(path, cls.keys()))

    def to_preferences(self) -> str:
        return format_preferences(dataclasses.asdict(self), "environment")


@dataclass(frozen=True)
class WorldState:
    joints: JointAngles
    cube_position: Vec3
    grasped: bool = False
    step_index: int = 0
    distractor_position: Optional[Vec3] = None


@dataclass(frozen=True, eq=False)
class StepResult:
    observation: Image
    ground_truth_success: bool
    done: bool
    done_reason: str


def _fk_arrays(pitch, roll, elbow, upper, fore):
    # angles in degrees; returns elbow and gripper in the shoulder frame
    p = np.radians(pitch)
    f = p - np.radians(elbow)
    psi = np.radians(np.asarray(roll) - 90.0)
    h_elbow = upper * np.sin(p)
    v_elbow = -upper * np.cos(p)
    h = h_elbow + fore * np.sin(f)
    v = v_elbow - fore * np.cos(f)
    cos_psi, sin_psi = np.cos(psi), np.sin(psi)
    elbow_pt = np.stack([h_elbow * cos_psi, h_elbow * sin_psi, v_elbow], axis=-1)
    gripper = np.stack([h * cos_psi, h * sin_psi, v], axis=-1)
    return elbow_pt, gripper


def forward_kinematics(joints: JointAngles, config: EnvConfig) -> np.ndarray:
    """
    Gripper position in the shoulder frame (shoulder at the origin, x forward,
    y left, z up). The zero pose hangs straight down. Pitch swings the upper
    arm from down towards forward and up, roll turns the arm plane about the
    vertical (azimuth = roll - 90), elbow_roll folds the forearm back by that
    angle inside the arm plane.
    """
    _, gripper = _fk_arrays(joints.shoulder_pitch, joints.shoulder_roll, joints.elbow_roll,
                            config.upper_arm_len, config.forearm_len)
    return gripper


def shoulder_position(config: EnvConfig) -> np.ndarray:
    return np.array([0.0, 0.0, config.shoulder_height])


def gripper_position(joints: JointAngles, config: EnvConfig) -> np.ndarray:
    return forward_kinematics(joints, config) + shoulder_position(config)


def arm_points(joints: JointAngles, config: EnvConfig) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    elbow, gripper = _fk_arrays(joints.shoulder_pitch, joints.shoulder_roll, joints.elbow_roll,
                                config.upper_arm_len, config.forearm_len)
    s = shoulder_position(config)
    return s, elbow + s, gripper + s


def resting_height(config: EnvConfig) -> float:
    return config.table_height + config.cube_side / 2.0


def is_success(state: WorldState, config: EnvConfig) -> bool:
    return bool(state.grasped and state.cube_position[2] >= config.table_height + config.lift_height)


def is_done(state: WorldState, config: EnvConfig) -> bool:
    return is_success(state, config) or state.step_index >= config.max_steps


def _placement_ok(config: EnvConfig, x: float, y: float) -> bool:
    z_rel = resting_height(config) - config.shoulder_height
    rho = math.hypot(x, y)
    d = math.hypot(rho, z_rel)
    reach = config.reach
    if d < abs(config.upper_arm_len - config.forearm_len) + MIN_REACH_FRACTION * reach:
        return False
    if d > MAX_REACH_FRACTION * reach or rho < MIN_HORIZONTAL_FRACTION * reach:
        return False
    azimuth = math.degrees(math.atan2(y, x))
    return AZIMUTH_RANGE[0] <= azimuth <= AZIMUTH_RANGE[1]


def _placement_box(config: EnvConfig) -> Tuple[float, float, float, float]:
    cx, cy = config.cube_center
    s = config.cube_spread
    x_lo, x_hi = max(config.table_near, cx - s), min(config.table_far, cx + s)
    y_lo, y_hi = max(-config.table_half_width, cy - s), min(config.table_half_width, cy + s)
    if x_lo > x_hi or y_lo > y_hi:
        raise ConfigError("cube placement area %r lies off the table" % ((cx, cy, s),))
    return x_lo, x_hi, y_lo, y_hi


def reset(config: EnvConfig, episode_seed: int) -> WorldState:
    rng = make_rng(config.seed, episode_seed)
    jitter = config.rest_spread * rng.uniform(-1.0, 1.0, size=4) * np.array(REST_HALF_RANGE)
    rest = np.array(config.rest_pose) + jitter
    joints = JointAngles.from_array(rest)
    gripper = gripper_position(joints, config)
    z = resting_height(config)

    x_lo, x_hi, y_lo, y_hi = _placement_box(config)
    cube = None
    for _ in range(PLACEMENT_TRIES):
        x, y = rng.uniform(x_lo, x_hi), rng.uniform(y_lo, y_hi)
        if not _placement_ok(config, x, y):
            continue
        if np.linalg.norm(gripper - np.array([x, y, z])) > config.reach:
            continue
        cube = (float(x), float(y), float(z))
        break
    if cube is None:
        raise ConfigError("no reachable cube placement after %d tries; check table and arm settings"
                          % PLACEMENT_TRIES)

    distractor = None
    if config.distractor:
        # the distractor only has to sit on the table, apart from the target
        for _ in range(PLACEMENT_TRIES):
            x = rng.uniform(config.table_near, config.table_far)
            y = rng.uniform(-config.table_half_width, config.table_half_width)
            if math.hypot(x - cube[0], y - cube[1]) >= DISTRACTOR_GAP:
                distractor = (float(x), float(y), float(z))
                break
    return WorldState(joints, cube, False, 0, distractor)


def simulate(state: WorldState, action, config: EnvConfig) -> WorldState:
    """Pure dynamics of one step; no rendering."""
    if is_done(state, config):
        raise UsageError("episode is already done (step %d); call reset first" % state.step_index)
    a = np.asarray(action, dtype=np.float64).reshape(-1)
    if a.shape != (C.N_JOINTS,) or not np.all(np.isfinite(a)):
        raise UsageError("action must be %d finite numbers, got %r" % (C.N_JOINTS, action))
    a = np.clip(a, -1.0, 1.0)
    joints = JointAngles.from_array(state.joints.as_array() + a * config.omega_max)
    gripper = gripper_position(joints, config)
    closed = joints.hand >= config.hand_close_threshold

    grasped = state.grasped
    cube = state.cube_position
    if grasped and not closed:
        grasped = False
        cube = (cube[0], cube[1], resting_height(config))
    elif grasped:
        cube = tuple(float(c) for c in gripper)
    elif closed and np.linalg.norm(gripper - np.array(cube)) <= config.grasp_radius:
        grasped = True
        cube = tuple(float(c) for c in gripper)
    return WorldState(joints, cube, grasped, state.step_index + 1, state.distractor_position)


def step(state: WorldState, action, config: EnvConfig) -> Tuple[WorldState, StepResult]:
    new = simulate(state, action, config)
    success = is_success(new, config)
    if success:
        reason = C.DONE_SUCCESS
    elif new.step_index >= config.max_steps:
        reason = C.DONE_TIMEOUT
    else:
        reason = C.DONE_RUNNING
    return new, StepResult(render(new, config), success, reason != C.DONE_RUNNING, reason)


def _pixel_grid(width: int, height: int) -> Tuple[np.ndarray, np.ndarray]:
    # image right is the robot's right (-y), image up is +z
    dy = 2.0 * C.VIEW_Y_HALF / width
    dz = (C.VIEW_Z_HIGH - C.VIEW_Z_LOW) / height
    ys = C.VIEW_Y_HALF - (np.arange(width) + 0.5) * dy
    zs = C.VIEW_Z_HIGH - (np.arange(height) + 0.5) * dz
    return np.meshgrid(ys, zs)


def _segment_distance(py, pz, a, b):
    ay, az = a
    by, bz = b
    vy, vz = by - ay, bz - az
    length2 = vy * vy + vz * vz
    if length2 == 0.0:
        return np.hypot(py - ay, pz - az)
    t = np.clip(((py - ay) * vy + (pz - az) * vz) / length2, 0.0, 1.0)
    return np.hypot(py - (ay + t * vy), pz - (az + t * vz))


def render(state: WorldState, config: EnvConfig, resolution: Optional[Tuple[int, int]] = None) -> Image:
    width, height = resolution or config.resolution
    py, pz = _pixel_grid(int(width), int(height))
    img = np.full(py.shape, C.BACKGROUND_INTENSITY)

    table = ((pz <= config.table_height) & (pz >= config.table_height - C.TABLE_EDGE_THICKNESS)
             & (np.abs(py) <= config.table_half_width))
    img[table] = C.TABLE_INTENSITY

    shoulder, elbow, gripper = arm_points(state.joints, config)
    for a, b in ((shoulder, elbow), (elbow, gripper)):
        img[_segment_distance(py, pz, (a[1], a[2]), (b[1], b[2])) <= C.LINK_HALF_WIDTH] = C.ARM_INTENSITY

    closure = state.joints.hand / C.JOINT_MAX
    radius = C.GRIPPER_RADIUS_OPEN - (C.GRIPPER_RADIUS_OPEN - C.GRIPPER_RADIUS_CLOSED) * closure
    img[np.hypot(py - gripper[1], pz - gripper[2]) <= radius] = C.GRIPPER_INTENSITY

    half = config.cube_side / 2.0
    for cube in (state.distractor_position, state.cube_position):
        if cube is None:
            continue
        img[(np.abs(py - cube[1]) <= half) & (np.abs(pz - cube[2]) <= half)] = C.CUBE_INTENSITY
    return img


_EXPERT_MOVES = np.array(list(itertools.product(EXPERT_FRACTIONS, repeat=3)))


def scripted_expert(state: WorldState, config: EnvConfig) -> np.ndarray:
    """
    Reference controller. Before the grasp it tries every move on a small
    lattice of per-joint step fractions and keeps the one that brings the
    gripper closest to the cube, closing the hand once the cube is near.
    After the grasp it raises the shoulder pitch until the cube is lifted.
    """
    if is_success(state, config):
        return np.zeros(C.N_JOINTS)
    if state.grasped:
        return np.array([1.0, 0.0, 0.0, 1.0])

    current = state.joints.as_array()
    arm = np.clip(current[:3] + _EXPERT_MOVES * config.omega_max, C.JOINT_MIN, C.JOINT_MAX)
    _, tips = _fk_arrays(arm[:, 0], arm[:, 1], arm[:, 2], config.upper_arm_len, config.forearm_len)
    target = np.asarray(state.cube_position) - shoulder_position(config)
    dist = np.linalg.norm(tips - target, axis=1)
    best = int(np.argmin(dist))
    hand = 1.0 if dist[best] <= EXPERT_CLOSE_BAND * config.grasp_radius else 0.0
    move = _EXPERT_MOVES[best]
    return np.array([move[0], move[1], move[2], hand])


def expert_rollout(config: EnvConfig, episode_seed: int) -> list:
    """States visited by the scripted expert from reset to the end of the episode."""
    state = reset(config, episode_seed)
    states = [state]
    while not is_done(state, config):
        state = simulate(state, scripted_expert(state, config), config)
        states.append(state)
    return states


class Environment:
    """Stateful wrapper with the usual reset/step surface."""

    def __init__(self, config: EnvConfig):
        self.config = config
        self.state: Optional[WorldState] = None

    def reset(self, episode_seed: int) -> Image:
        self.state = reset(self.config, episode_seed)
        return render(self.state, self.config)

    def step(self, action) -> StepResult:
        if self.state is None:
            raise UsageError("call reset before step")
        self.state, result = step(self.state, action, self.config)
        return result

    @property
    def done(self) -> bool:
        return self.state is not None and is_done(self.state, self.config)

    def expert_action(self) -> np.ndarray:
        return scripted_expert(self.state, self.config)
