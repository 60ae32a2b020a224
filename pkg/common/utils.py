import os
from datetime import datetime, timezone
from typing import Any, Optional, Union


class SimulationError(RuntimeError):
    def __init__(self, error: Union[BaseException, str], highlight: Optional[bool] = None):

        final_highlight: bool
        if highlight is None:
            # No value provided, read from env var (default 'True')
            final_highlight = env_var_to_bool(os.environ.get("TSNS_ERROR_HIGHLIGHT"), "true")
        else:
            # Value was provided, use it
            final_highlight = highlight

        self.plain_message = str(error)
        if final_highlight:
            # Highlight error messages in red, so the actual problems are
            # easier to spot in long tracebacks
            super().__init__(f"\033[1;31m{error}\033[0m")
        else:
            super().__init__(error)


class BlowUpError(SimulationError):
    def __init__(self, message: str, last_finite_index: int, **kwargs: Any):
        self.last_finite_index = last_finite_index
        super().__init__(f"{message} (last finite frame index: {last_finite_index})", **kwargs)


class ConfigError(SimulationError):
    pass


class IntegrityError(SimulationError):
    def __init__(self, message: str, *, path: Any = None, frame_index: Optional[int] = None, **kwargs: Any):
        self.path = path
        self.frame_index = frame_index
        details = message
        if path is not None:
            details += f" [{path}]"
        if frame_index is not None:
            details += f" (frame {frame_index})"
        super().__init__(details, **kwargs)


class NonConvergenceError(SimulationError):
    pass


class UnsupportedSizeError(SimulationError):
    pass


def env_var_to_bool(value: Optional[str], default: str = "false") -> bool:
    """
    Convert environment variable string to boolean.

    Args:
        value: The environment variable value (or None if not set)
        default: Default value to use if value is None

    Returns:
        True if the value (or default) is a truthy string, False otherwise
    """
    return (value or default).lower() in ("true", "1", "on", "yes", "y")


def env_var_to_int(value: Optional[str], default: int) -> int:
    if value is None or not value.strip():
        return default
    try:
        return int(value)
    except ValueError as e:
        raise ConfigError(f"Expected an integer in the environment, got {value!r}") from e


def generate_timestamp_utc() -> str:
    """
    Generate timestamp in format YYYYmmdd_HHMMSS_fff_fff in UTC.

    An example of how these timestamps are used later:

    `.runs/20251005_140642_180_342_SYNC.md`
    """
    now = datetime.now(timezone.utc)

    str_repr = now.strftime("%Y%m%d_%H%M%S_%f")
    # Let's separate the milliseconds from the microseconds with an underscore
    # to make it more readable
    return f"{str_repr[:-3]}_{str_repr[-3:]}"


def log_progress(msg: str) -> None:
    # Read on every call so tests and the CLI can toggle it at runtime
    if not env_var_to_bool(os.environ.get("TSNS_VERBOSE"), "false"):
        return
    timestamp = datetime.now(timezone.utc).isoformat()
    print(f"\033[2m[tsns {timestamp}]\033[0m {msg}")


def log_warning(msg: str) -> None:
    if not env_var_to_bool(os.environ.get("TSNS_VERBOSE"), "false"):
        return
    print(f"\033[1;33m[tsns warning]\033[0m {msg}")


def highlight_good(text: Any) -> str:
    return f"\033[1m\033[32m{text}\033[0m"


def highlight_info(text: Any) -> str:
    return f"\033[1m\033[36m{text}\033[0m"


def highlight_warn(text: Any) -> str:
    return f"\033[1m\033[33m{text}\033[0m"
