"""purple: contextual-bandit construction of user profiles.

A propensity scorer reads a query and a pool of user-history records and
emits a score per record; a Plackett-Luce policy turns the scores into a
distribution over ordered K-selections; REINFORCE with z-scored rewards
trains the scorer against a downstream reward (an LLM log-likelihood service,
task metrics, or a synthetic ground-truth utility).  Brute-force enumeration
oracles verify the whole chain on small instances.
"""

from ._kernels import IMPLEMENTATION as KERNEL_IMPLEMENTATION

__version__ = "0.1.0"

__all__ = ["KERNEL_IMPLEMENTATION", "__version__"]
