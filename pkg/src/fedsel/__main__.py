"""Entry point for `python -m fedsel`."""
import sys

from .cli import main

sys.exit(main())
