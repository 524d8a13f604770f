"""Numerical services (linear algebra, networks, heads, losses, metrics), data, training and orchestration."""
