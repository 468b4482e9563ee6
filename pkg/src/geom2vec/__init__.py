"""Geometric featurization and dynamics-learning toolkit."""
