import logging
import time
from typing import Optional


class TimingContext:
    """Log the wall-clock duration of a named phase."""

    def __init__(self, name: str, logger: Optional[logging.Logger] = None):
        self.name = name
        self.logger = logger or logging.getLogger(__name__)
        self.elapsed: Optional[float] = None

    def __enter__(self):
        self.start_time = time.perf_counter()
        self.logger.info(f"Starting {self.name}...")
        return self

    def __exit__(self, exc_type, exc_value, traceback):
        self.elapsed = time.perf_counter() - self.start_time
        if exc_type is None:
            self.logger.info(f"Finished {self.name} in {self.elapsed:.2f} seconds.")
        else:
            self.logger.warning(
                f"Aborted {self.name} after {self.elapsed:.2f} seconds: {exc_value}"
            )
