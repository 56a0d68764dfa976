"""
Simulation package for netfx.

Data-generating processes with closed-form truths and the Monte-Carlo runner.
"""
