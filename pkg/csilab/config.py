"""Environment configuration for csilab."""

import os
from dotenv import load_dotenv

load_dotenv()

# Root for experiment outputs when --out is not given
RUNS_DIR = os.getenv("CSILAB_RUNS_DIR", "runs")

# Logging level name for the CLI
LOG_LEVEL = os.getenv("CSILAB_LOG_LEVEL", "INFO").upper()

# Concurrent sweep cells
PARALLEL = int(os.getenv("CSILAB_PARALLEL", "1"))

# Floating point type for parameters during training runs ("float32" or "float64")
DTYPE = os.getenv("CSILAB_DTYPE", "float32").lower()

# Experiment document loaded when --config is not given (optional)
SETTINGS_PATH = os.getenv("CSILAB_SETTINGS_PATH")

# Output file names inside a run directory
DATA_SUBDIR = "data"
CONFIG_ECHO = "config.echo"
CHECKPOINT_FILE = "model.csiw"
BEST_CHECKPOINT_FILE = "best.csiw"
OPTIMIZER_FILE = "optimizer.csiw"
HISTORY_FILE = "history.csv"
RESULTS_FILE = "results.csv"
SPLITS = ("train", "val", "test")
