"""Interface-frozen anisotropic tetrahedral mesh adaptation."""
from __future__ import annotations

__version__ = "0.1.0"
