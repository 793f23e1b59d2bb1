"""Passive impedance control, E-CBF constrained QP, compensation and passivity checks."""
