import math

ONE_MB = 1024 * 1024

INF = math.inf
INF_TEXT = "inf"
CSV_FLOAT_FORMAT = ".6g"

EXIT_UNEXPECTED = 1
EXIT_CONFIG_ERROR = 2
EXIT_LAB_ERROR = 3

DSNR_DENOMINATOR_EPS = 1e-12
DEFAULT_DSNR_THRESHOLD = 5.0
DEFAULT_TSNR_THRESHOLD = 1.0

DEFAULT_CDF_BATCHES = 20_000
DEFAULT_GOLDEN_TOLERANCE = 1e-6

DEFAULT_LEARNING_RATE = 1e-4
DEFAULT_ACCUMULATION = 10
DEFAULT_BETA0 = -2.0
DEFAULT_STEPS_PER_EPOCH = 100
DEFAULT_BATCH_AUGMENT_ITERATIONS = 50
DEFAULT_MAX_REDRAWS = 10
DEFAULT_SUBSAMPLE_FRACTION = 0.001
DEFAULT_SUBSAMPLE_MIN = 8400

DEFAULT_CLIP_BATCHES = 1000
DEFAULT_CALIBRATION_COVERAGE = 0.9

PSNR_REC_THRESHOLD = 19.0
PSNR_CAP = 100.0
TOP_FRACTION = 1 / math.e

CRAFTED_MIN_FACTOR = 10.0
CRAFTED_LOGIT_SCALE = 25.0
