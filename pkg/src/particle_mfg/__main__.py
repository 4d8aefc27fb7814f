"""Allow running as `python -m particle_mfg`."""

import sys

from .cli import main

if __name__ == "__main__":
    sys.exit(main())
