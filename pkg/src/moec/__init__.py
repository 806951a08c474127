"""Volume compression by overfitting a mixture of sine-activated experts."""

from __future__ import annotations

__version__ = "0.1.0"
