import time
from contextlib import contextmanager

import psutil

from utils.logger import setup_logger

logger = setup_logger(__name__)

# Desk-scale budget; runs above it get flagged in the performance line
SLOW_RUN_MS = 60000
HIGH_MEMORY_MB = 2048


def memory_usage_mb() -> float:
    """Resident memory of this process in MB"""
    return psutil.Process().memory_info().rss / 1024 / 1024


@contextmanager
def performance_log(label: str):
    """Time a block and log one performance line (elapsed, memory) when it finishes"""
    start = time.time()
    stats = {}
    try:
        yield stats
    finally:
        elapsed_ms = int((time.time() - start) * 1000)
        mem = memory_usage_mb()
        status = "🟢 OPTIMAL" if elapsed_ms < SLOW_RUN_MS else "🟡 SLOW"
        memory_status = "🟢 OK" if mem < HIGH_MEMORY_MB else "🟡 HIGH"
        extra = " | ".join(f"{k}={v}" for k, v in stats.items())
        logger.info(f"⚡ Performance [{label}]: {status} Total={elapsed_ms}ms | Memory={mem:.1f}MB {memory_status}"
                    + (f" | {extra}" if extra else ""))
