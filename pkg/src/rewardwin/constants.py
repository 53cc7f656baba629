#############################
#  RewardWin - Constants
#
#  This program is distributed free
#  of charge (open source) under the
#  GNU General Public License
#############################

## here are some things to tweak, if you want
### default arm geometry (meters), Pepper-scale, chosen for solvability
UPPER_ARM_LEN = 0.18
FOREARM_LEN = 0.22
SHOULDER_HEIGHT = 0.95
TABLE_HEIGHT = 0.75
TABLE_NEAR = 0.10
TABLE_FAR = 0.40
TABLE_HALF_WIDTH = 0.35
CUBE_SIDE = 0.05
GRASP_RADIUS = 0.06
LIFT_HEIGHT = 0.10
HAND_CLOSE_THRESHOLD = 120.0   # degrees
OMEGA_MAX = 12.0               # degrees per step
MAX_STEPS = 50
RESOLUTION = (32, 24)          # (width, height)

### render intensities
BACKGROUND_INTENSITY = 0.05
TABLE_INTENSITY = 0.35
ARM_INTENSITY = 0.6
GRIPPER_INTENSITY = 0.75
CUBE_INTENSITY = 0.9

### camera window in world coordinates (meters)
VIEW_Y_HALF = 0.40
VIEW_Z_LOW = 0.50
VIEW_Z_HIGH = 1.10
TABLE_EDGE_THICKNESS = 0.03
LINK_HALF_WIDTH = 0.02
GRIPPER_RADIUS_OPEN = 0.04
GRIPPER_RADIUS_CLOSED = 0.02

#######################################
##### Don't change anything under here!
#######################################

# joint order inside JointAngles / Action vectors
JOINT_NAMES = ("shoulder_pitch", "shoulder_roll", "elbow_roll", "hand")
JOINT_MIN = 0.0
JOINT_MAX = 180.0
N_JOINTS = 4

# episode end reasons
DONE_SUCCESS = "success"
DONE_TIMEOUT = "timeout"
DONE_RUNNING = "running"

# labels, as stored in dataset files
LABEL_NONSUCCESS = 0
LABEL_SUCCESS = 1

# capture sessions
SESSION_SUCCESS = 200
SESSION_NONSUCCESS = 440
SESSION_COUNT = 10
SPLIT_TRAIN = 8
SPLIT_VALIDATION = 1
SPLIT_TEST = 1

# binary formats
NETWORK_MAGIC = b"RWNN"
NETWORK_VERSION = 1
DATASET_MAGIC = b"RWDS"
DATASET_VERSION = 1
CLASSIFIER_MAGIC = b"RWCL"
PCA_MAGIC = b"RWPC"
PCA_VERSION = 1
POLICY_MAGIC = b"RWPL"
POLICY_VERSION = 1

# layer kind tags for RWNN files
KIND_DENSE = 0
KIND_CONV2D = 1
KIND_MAXPOOL2D = 2
KIND_RELU = 3
KIND_TANH = 4
KIND_FLATTEN = 5
KIND_SOFTMAX = 6

# algorithm tags for RWPL files
ALGO_DDPG = "ddpg"
ALGO_TD3 = "td3"
ALGO_TAGS = {ALGO_DDPG: 0, ALGO_TD3: 1}

# Adam
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPSILON = 1e-8

# state representations
REWARD_WINDOW = 15
PCA_COMPONENTS = 50

# harness
TRAIN_STEPS = 10000
EVAL_STEPS = 10000
N_SEEDS = 5
CSV_HEADER = ("spec", "algorithm", "seed", "avg_reward", "task_success_pct",
              "episodes", "train_steps")

# published task success % per state as (ddpg, td3), best of five runs
REFERENCE_SUCCESS = {
    "pixels:320x240": (76.60, 78.11),
    "pixels:160x120": (80.09, 78.34),
    "pixels:80x60": (28.40, 88.04),
    "pca:50": (11.33, 57.80),
    "rewards:15": (97.04, 96.78),
}
# desk-scale pixel states stand in for the camera resolutions above
REFERENCE_SCALE = {
    "pixels:32x24": "pixels:320x240",
    "pixels:16x12": "pixels:160x120",
    "pixels:8x6": "pixels:80x60",
}

# exit codes
EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
