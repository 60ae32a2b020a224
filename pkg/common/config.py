import os
from pathlib import Path

from dotenv import load_dotenv

from common.utils import env_var_to_bool, env_var_to_int

# Environment variables set explicitly take precedence over the ones in .env
load_dotenv(override=False)


THREADS = max(1, env_var_to_int(os.getenv("TSNS_THREADS"), os.cpu_count() or 1))
VERBOSE = env_var_to_bool(os.getenv("TSNS_VERBOSE"), "false")
WRITE_TRACES_TO_FILES = env_var_to_bool(os.getenv("TSNS_WRITE_TRACES"), "true")

# NOTE: An empty TSNS_OUT_DIR falls back to the default as well
OUT_DIR = Path(os.getenv("TSNS_OUT_DIR") or (Path.cwd() / ".runs"))
