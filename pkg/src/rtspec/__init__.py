"""Essential growth rates and unstable modes of sheared Rayleigh-Taylor flows."""

__version__ = "0.1.0"
