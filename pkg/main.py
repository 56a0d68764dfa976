#!/usr/bin/env python3
"""
netfx - Main Entry Point

Command-line entry point for network treatment effect estimation under
partial interference.

Usage:
    python main.py estimate data.csv config.json
    python main.py sweep data.csv config.json --grid 0.05:0.95:19
    python main.py simulate --scenario glmm --n 2000 --seed 7
    python main.py mc-study --scenario glmm --spec CO,CP,CT --reps 200 --n 2000
    python main.py validate data.csv config.json
"""

import sys
from pathlib import Path

# Add src directory to Python path
src_path = Path(__file__).parent / "src"
sys.path.insert(0, str(src_path))

from cli import main

if __name__ == '__main__':
    sys.exit(main())
