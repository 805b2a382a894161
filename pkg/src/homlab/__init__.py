"""Monte Carlo laboratory for quantitative homogenization of diffusions in random environments."""

__version__ = "0.1.0"
