"""Stochastic Lagrangian flows and backward Navier-Stokes on the torus."""
