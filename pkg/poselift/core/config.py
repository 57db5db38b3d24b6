# poselift/core/config.py
import os
from dotenv import load_dotenv

load_dotenv(dotenv_path='config/.env')

# Runtime
LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO")
POSELIFT_THREADS = max(1, int(os.getenv("POSELIFT_THREADS", 1)))
POSELIFT_OUTPUT_DIR = os.getenv("POSELIFT_OUTPUT_DIR", "runs")
# Check every recorded op output for NaN/inf
POSELIFT_DEBUG = os.getenv("POSELIFT_DEBUG", "0").lower() in ("1", "true", "yes")

# Synthetic camera
DEFAULT_IMAGE_SIZE = int(os.getenv("POSELIFT_IMAGE_SIZE", 1000))
DEFAULT_FOCAL_PX = float(os.getenv("POSELIFT_FOCAL_PX", 1145.0))

# Pose attributes: 0.1 x the canonical 500 mm pelvis-to-thorax length
DEFAULT_TAU_MM = float(os.getenv("POSELIFT_TAU_MM", 50.0))

# Evaluation (MPI-INF-3DHP convention)
PCK_THRESHOLD_MM = 150.0
AUC_STEP_MM = 5.0

# File formats
DATASET_FORMAT_VERSION = 1
CHECKPOINT_FORMAT_VERSION = 1
