"""
CLI package for netfx.

argparse command surface over the estimation service.
"""

from .commands import main

__all__ = ['main']
