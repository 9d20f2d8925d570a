"""Process resource monitoring utilities.

These helpers feed the progress lines of the adaptation loop with memory
and CPU figures.
"""

from __future__ import annotations

import psutil


def get_cpu_usage() -> float:
    """Return the system-wide CPU utilization since the previous call, in percent.

    Non-blocking: the first call in a process returns 0.0.
    """
    return psutil.cpu_percent(interval=None)


def get_memory_usage() -> float:
    """Return the current memory usage as a percentage of total available memory."""
    return psutil.virtual_memory().percent


def get_process_rss_mb() -> float:
    """Return the resident set size of this process in megabytes."""
    return psutil.Process().memory_info().rss / (1024 ** 2)


def resource_summary() -> str:
    """Return a short human-readable resource line for log messages."""
    return f"cpu={get_cpu_usage():.0f}% mem={get_memory_usage():.0f}% rss={get_process_rss_mb():.0f}MB"
