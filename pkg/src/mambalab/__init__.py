"""Selective SSMs on random Markov chains, with add-beta smoothing oracles.

Subpackages cover the pieces of the laboratory: a minimal reverse-mode
autodiff engine (`autodiff`), random Markov data generation (`markov`), the
Bayes-optimal add-beta smoother (`smoothing`), the Mamba-style model stack
(`model`), the exact weight construction and its certifier (`construction`),
AdamW training (`training`), measurement surfaces (`metrics`), and the
command-line interface (`cli`).
"""

__version__ = "0.1.0"
