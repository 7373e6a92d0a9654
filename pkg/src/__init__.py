"""
Dough rolling with dynamic heterogeneous graphs.
Graph abstraction, a unified graph policy/dynamics/value model, demonstration-guided
training and a bimanual trajectory planner around a height-field dough simulator.
"""

__version__ = "1.0.0"
