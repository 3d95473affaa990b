"""GraphCliff: activity-cliff aware molecular property regression built on a small autodiff engine."""

__version__ = "0.1.0"
