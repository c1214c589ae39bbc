"""Terminal output helpers for the command-line front end."""

import os
import sys


class Colors:
    """ANSI color codes for terminal output."""

    RED = "\033[0;31m"
    GREEN = "\033[0;32m"
    YELLOW = "\033[1;33m"
    CYAN = "\033[0;36m"
    NC = "\033[0m"  # No Color (reset)

    enabled: bool = sys.stdout.isatty() and "NO_COLOR" not in os.environ

    @classmethod
    def _wrap(cls, code: str, text: str) -> str:
        if not cls.enabled:
            return text
        return f"{code}{text}{cls.NC}"

    @classmethod
    def red(cls, text: str) -> str:
        """Errors."""
        return cls._wrap(cls.RED, text)

    @classmethod
    def green(cls, text: str) -> str:
        """Success lines."""
        return cls._wrap(cls.GREEN, text)

    @classmethod
    def yellow(cls, text: str) -> str:
        """Notices and progress."""
        return cls._wrap(cls.YELLOW, text)

    @classmethod
    def cyan(cls, text: str) -> str:
        """Section headers."""
        return cls._wrap(cls.CYAN, text)


def banner(title: str, width: int = 60) -> str:
    """Three-line banner used at the top of every subcommand's output."""
    rule = "=" * width
    return f"{rule}\n{title}\n{rule}"


def error_line(message: str) -> str:
    """Single-line diagnostic for stderr."""
    return Colors.red(f"Error: {message}")
