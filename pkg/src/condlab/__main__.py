"""Module entry point so `python -m condlab` works like the installed script."""

import sys

from .harness import main

if __name__ == "__main__":
    sys.exit(main())
