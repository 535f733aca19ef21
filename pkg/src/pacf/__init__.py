"""pacf: feature-space domain adaptation laboratory.

Prototype-augmented losses (prototype cross entropy, mutual regularization),
cosine-weighted prototype maintenance, a mean-teacher self-training loop over
synthetic or file-loaded feature distributions, and the distribution
diagnostics to measure what the adaptation did.
"""

__version__ = "0.1.0"
