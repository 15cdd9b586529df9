"""Action Shapley valuation of RL training action sets.

Modules
-------
domain     action points, coalitions, boundary geometry
envsim     trace synthesis / ingestion and the surrogate model
agent      PID agent and episode runner
valuation  cut-off cardinality, categorization, ranking, Shapley values
cli        experiment orchestration and the command line
"""
__version__ = "0.1.0"
