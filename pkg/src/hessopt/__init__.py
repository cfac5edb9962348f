"""Second-order optimization toolkit.

Modules:
  - :mod:`hessopt.autodiff`: reverse-mode tape with double-backprop support
  - :mod:`hessopt.problems`: differentiable benchmark objectives
  - :mod:`hessopt.hutchinson`: stochastic Hessian-diagonal estimation
  - :mod:`hessopt.optim`: adaptive second-order optimizer and first-order baselines
  - :mod:`hessopt.oracle`: finite-difference and dense-Hessian verification
  - :mod:`hessopt.harness`: experiment runner, sweeps, and reports
  - :mod:`hessopt.cli`: command-line entry point
"""

__version__ = "0.1.0"
