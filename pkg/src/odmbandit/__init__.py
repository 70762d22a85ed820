"""Cost-efficient online decision making as a combinatorial semi-bandit."""

__version__ = "0.1.0"
