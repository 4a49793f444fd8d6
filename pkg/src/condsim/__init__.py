"""condsim: conditional similarity learning from unlabeled triplets, with a
condition-alignment evaluation protocol (greedy and exact optimal transport).
"""

from condsim.backend import BACKEND

__all__ = ["BACKEND"]
__version__ = "0.1.0"
