"""Numerical laboratory for partially hyperbolic examples on T^2 x R.

Submodules:

- ``core``: torus geometry, height graphs, leaf arcs and the d_H / d_u distances
- ``maps``: linear and DA torus maps, the calzone skew product, basins
- ``cones``: splittings, adapted cone fields, invariance certification
- ``graph_transform``: invariant tori by fiber contraction, periodicity
- ``fuller``: cross sections of flows by Fuller averaging
- ``semiconj``: semiconjugacy to the linear model on the universal cover
"""
__version__ = "0.1.0"
