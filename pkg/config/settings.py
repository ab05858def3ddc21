import os
from dotenv import load_dotenv

load_dotenv()


def _flag(name: str, default: str) -> bool:
    return os.getenv(name, default).strip().lower() in ("1", "true", "yes", "on")


# Presets
DESK_SCALE = _flag("EPSR_DESK_SCALE", "0")

# Logging Settings
LOG_LEVEL = os.getenv("EPSR_LOG_LEVEL", "INFO")
LOG_DIR = os.getenv("EPSR_LOG_DIR", "logs")
LOG_TO_FILE = _flag("EPSR_LOG_TO_FILE", "true")
PROGRESS = _flag("EPSR_PROGRESS", "true")

# Run Settings
OUTPUT_DIR = os.getenv("EPSR_OUTPUT_DIR", "runs")
VGG_WEIGHTS = os.getenv("EPSR_VGG_WEIGHTS")
NUM_WORKERS = int(os.getenv("EPSR_NUM_WORKERS", "1"))
