"""
Stochastic normalizing flows: density estimation and sampler design with
SDEs driven by smooth approximations of Brownian motion.
"""

__version__ = "0.1.0"
