"""EIT tactile e-skin toolkit: forward simulation on bendable sheets and
classical plus learned touch-map reconstruction."""

__version__ = "0.1.0"
