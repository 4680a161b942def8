"""Minimizing-movements mean curvature flow on uniform grids."""
