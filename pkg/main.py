#!/usr/bin/env python3
"""
BTSeg - Barlow Twins regularized semantic segmentation across a clear and an
adverse domain. Main entry point.
"""
from dotenv import load_dotenv
load_dotenv()

import sys
from pathlib import Path

# Make the repo root importable when launched from elsewhere
sys.path.insert(0, str(Path(__file__).parent))

from modules import cli
from utils.config import Config


if __name__ == "__main__":
    Config().apply()
    sys.exit(cli.main())
