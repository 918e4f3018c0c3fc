# Please modify the settings below according to your needs.
# Every value here is a default; run configs (configs/*.json) and
# `--override key=value` flags take precedence for a single run.

# --- Randomness ---

# Master seed used when neither the run config nor --seed provides one.
# Every Gaussian stream in a run is derived from this single number.
DEFAULT_SEED = 20240611

# Number of replicas simulated together in one vectorised block.
# Block k always draws from stream k, so results do not depend on --jobs.
# Changing this value changes the random numbers (and therefore the outputs).
REPLICA_BLOCK_SIZE = 2048

# --- Worker pool ---

# Number of parallel workers for surface tabulation and replica blocks.
# A higher number means faster runs but uses more CPU/RAM.
MAX_WORKERS = 4

# --- Fast process simulation ---

# Euler-Maruyama step for exponential-moment estimates (rescaled fast time).
MOMENT_DT = 1e-3

# Euler-Maruyama step for occupation histograms and time averages.
OCCUPATION_DT = 1e-2

# Step in rescaled fast time used by the coupled slow-fast simulator.
# Must not exceed 0.01.
COUPLED_DT_FAST = 1e-2

# --- Hamiltonian (principal eigenvalue) ---

# Grid points per fast dimension for the Feynman-Kac generator.
# With the default beta box below, 128 keeps the half-grid check quiet on the builtins.
SPECTRAL_GRID_N = 128

# Largest fast dimension allowed for tabulated generators.
# Dimension 3 runs with a warning; larger dimensions are rejected.
MAX_FAST_DIM = 2

# Stopping tolerance on the Collatz-Wielandt bracket of the principal eigenvalue.
EIGEN_TOL = 1e-10

# Maximum number of power iterations before giving up.
EIGEN_MAX_ITERS = 2_000_000

# Power iteration applies this many matrix steps between bracket checks.
POWER_BLOCK = 8

# Compare against a half-resolution grid and warn when the two disagree.
RICHARDSON_CHECK = True

# Disagreement (after Richardson scaling, relative to max(1, |H|)) that triggers
# the accuracy warning.
RICHARDSON_TOL = 5e-4

# Finite-difference step for gradients of H in beta.
GRADIENT_STEP = 1e-2

# Default beta box half-width and nodes per axis for surface tabulation.
SURFACE_BOX_RADIUS = 6.0
SURFACE_NODES_PER_AXIS = 41

# --- Rate function ---

# Optimiser tolerance for synthetic (closed-form) surfaces.
SYNTHETIC_SOLVER_TOL = 1e-8

# Optimiser tolerance for surfaces built from eigenvalue solves.
SPECTRAL_SOLVER_TOL = 1e-5

# Dense scan points per fast dimension for the domain box of f.
DOMAIN_GRID_N = 256

# Range width below which a direction is treated as degenerate.
DEGENERATE_TOL = 1e-9

# --- Two-scale schedule ---

# Constant c in t(eps) = c * sqrt(log(1/eps)).
SCHEDULE_C = 2.0

# Upper bound on t(eps) / log(1/eps).
SCHEDULE_LOG_CAP = 3.0

# Effective sample size below which exponential-moment estimates are unreliable.
MIN_EFFECTIVE_SAMPLE_SIZE = 10

# --- Minimum action ---

MINPATH_MAX_ITERS = 2000
MINPATH_TOL = 1e-6

# --- Output ---

# Default output directory for CLI runs. The environment variable below,
# when set, overrides it.
DEFAULT_OUT_DIR = 'results'
OUT_DIR_ENV_VAR = 'SLOWFAST_LDP_OUT_DIR'

# Float format used in every CSV file.
CSV_FLOAT_FORMAT = '%.12g'
