"""Frequency-selective metaprism surfaces: ideal model, multiport model, Foster synthesis and optimization."""

from .scenario import Direction, BandPlan, MtpGeometry, Scenario, ScenarioError, load_scenario

__version__ = "0.1.0"

__all__ = ["Direction", "BandPlan", "MtpGeometry", "Scenario", "ScenarioError", "load_scenario", "__version__"]
