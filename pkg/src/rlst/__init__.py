"""On-line sequence transduction with a recurrent READ/WRITE agent trained by reinforcement."""

__version__ = "0.1.0"
