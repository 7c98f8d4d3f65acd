"""Simulated quantum differentially private Frank-Wolfe Lasso."""
