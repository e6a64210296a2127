"""
Entry point for running the src package.

Supports:
- python -m src <potentials|simulate|steer|verify|scale-study> --config FILE [args]
- python -m src --config FILE   (runs the experiment named in the config)
"""

import sys

from .main import main

if __name__ == '__main__':
    sys.exit(main())
