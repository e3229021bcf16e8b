"""Task-oriented exploration for sim-to-real system identification.

Exploration policies are trained so that the system parameters identified
from their trajectories minimize downstream task regret, instantiated on a
finite-horizon LQR task and an analytical two-cup pouring task.
"""

__version__ = "0.1.0"
