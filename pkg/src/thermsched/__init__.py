"""thermsched: physics-coupled scheduling simulator for geo-distributed fleets."""

__version__ = "0.1.0"
