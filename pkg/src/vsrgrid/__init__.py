"""Multigrid easy-to-hard schedules and large-minibatch training for a
tiny recurrent video super-resolution model."""

__version__ = "0.1.0"
