"""Learning forced Lagrangian dynamics from position-only data"""
