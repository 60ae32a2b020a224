import math

from common import config as common_config  # Makes sure .env is loaded  # pylint: disable=unused-import


TOOL_VERSION = "0.3.0"

# Basis normalization: ∫ γ_k² dx over [−π, π]² for every k
BASIS_NORM_SQ = 2.0 * math.pi**2

# Bracket analysis
RANK_TOLERANCE = 1e-9

# Transport / metrics
WASSERSTEIN_EXACT_CAP = 256
DEFAULT_QUAD_NODES = 16
DEFAULT_ETA_FRACTION = 0.5  # of sqrt(ν / (4 B₀))

# Slope fits drop this leading share of the window
FIT_DROP_FRACTION = 0.2

# Centering run for the CLT
CLT_CENTERING_PERIODS = 512
CLT_CENTERING_BURN_IN = 64

# Replicas are advanced in batches of this fixed size, whatever TSNS_THREADS is
REPLICA_CHUNK = 32

# Ladyzhenskaya constant estimator used when c₀ is not configured
DEFAULT_C0_TRUNCATION = 8
DEFAULT_C0_SAMPLES = 10_000
DEFAULT_C0_SEED = 0x00C0_5EED
C0_HILL_CLIMB_STEPS = 24

# Warn once the outer spectral shell carries more than this share of ‖w‖²
SPECTRAL_TAIL_WARNING = 1e-3

# Pullback onset threshold on the Cauchy increments
PULLBACK_ONSET_TOL = 1e-8

# Salt separating the auxiliary streams of an experiment from its replica streams
AUX_STREAM_SALT = 0x5EED_A0C5

# Fixed-point iteration for the midpoint advection step (sup-norm, relative)
MIDPOINT_TOL = 1e-14
MIDPOINT_MAX_ITER = 100

# Energy balance: summation round-off per step, relative to the energy scale
ENERGY_ROUNDOFF = 1e-12
