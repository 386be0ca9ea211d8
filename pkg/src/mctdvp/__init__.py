"""Monte Carlo TDVP for open spin chains on matrix product states."""

from __future__ import annotations

__version__ = "0.1.0"
