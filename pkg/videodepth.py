"""Entry point for the videodepth command line - run this file directly.

Usage: python videodepth.py --help
"""

import sys
from pathlib import Path

# Add project root to path so imports work
project_root = Path(__file__).parent
sys.path.insert(0, str(project_root))

from src.videodepth.cli import main  # noqa: E402

if __name__ == "__main__":
    sys.exit(main())
