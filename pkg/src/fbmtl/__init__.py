"""Multi-task networks with iterative task-output feedback, on a small numpy autodiff engine."""

__version__ = "0.1.0"
