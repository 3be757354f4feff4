"""Domain layer - pure numerics with no I/O"""
