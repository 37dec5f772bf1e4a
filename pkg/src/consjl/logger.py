from __future__ import annotations

import os

from rich.console import Console
from rich.panel import Panel

console = Console()
err_console = Console(stderr=True)


def is_suppressed() -> bool:
    """Check whether harness output is muted (used by the test-suite)."""
    return os.environ.get("CONSJL_SUPPRESS_OUTPUT", "").lower() in ("1", "true", "yes")


def safe_print(message: str) -> None:
    """Print a rich-markup message unless output is suppressed."""
    if not is_suppressed():
        console.print(message)


def log_success_panel(content: str) -> None:
    if not is_suppressed():
        console.print(Panel(content, style="green", title="Info"))


def log_warning_panel(content: str) -> None:
    if not is_suppressed():
        console.print(Panel(content, style="yellow", title="Warning"))
