"""fblab: numerical laboratory for one- and two-phase Bernoulli free boundaries."""

__version__ = "0.1.0"
