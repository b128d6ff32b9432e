# Configuration file for the MABE Laboratory

# Storage Configuration
RUNS_DIR = "runs"
LOG_DIR = "logs"
ARTIFACT_VERSION = "1.0.0"

# Logging Configuration
LOG_LEVEL = "INFO"
LOG_LEVEL_ENV = "MABE_LAB_LOG_LEVEL"

# Performance Configuration
MAX_WORKERS_ENV = "MABE_LAB_MAX_WORKERS"
DEFAULT_MAX_WORKERS = 4

# Vocabulary Configuration
EOS_TOKEN = 0
MAX_LENGTH_MULTIPLIER = 2
MAX_LENGTH_MINIMUM = 1
MAX_TABULAR_ROWS = 1_000_000

# Numerical tolerances
DISTRIBUTION_TOL = 1e-12
COEFFICIENT_SUM_TOL = 1e-10
UPPER_CLIP_WARN_TOL = 1e-12
FD_STEP = 1e-5

# Task Configuration
SUPPORT_CAP = 10**5

# Model initialization
INIT_SCALE = 0.1

# Training Configuration
DEFAULT_BATCH_SIZE = 16
DEFAULT_STEPS = 1000
DEFAULT_EVAL_EVERY = 50
DEFAULT_PROBE_SIZE = 32
CONVERGENCE_TOL = 1e-8
ADAM_LR_TABULAR = 1e-2
ADAM_LR_LINEAR = 1e-2
ADAM_LR_HIDDEN = 1e-3
MOMENTUM_BETA = 0.9
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# Decoding Configuration
NODE_BUDGET = 10**7
DEFAULT_BEAM_SIZES = [1, 2, 4, 8]
DEFAULT_BETAS = [0.0, 0.5, 1.0]

# Analysis Configuration
FIXED_POINT_LR = 0.5
FIXED_POINT_TOL = 1e-10
FIXED_POINT_MAX_STEPS = 500_000
ECE_BINS = 10
DEFAULT_EVAL_INSTANCES = 100
LANDSCAPE_GRID = (-8.0, 4.0, 1e-3)

# Sweep Configuration
SWEEP_LAMBDAS = [-2.0, -1.0, 0.0, 1.0, 2.0]

# Report Configuration
CSV_FLOAT_FORMAT = "%.9g"
SVG_HASH_SALT = "mabe-lab"
DEFAULT_SEED = 0
