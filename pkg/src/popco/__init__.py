"""Population policies for constructive combinatorial optimization."""

__version__ = "0.1.0"
