#!/usr/bin/env python3
"""
ACT Lab - Main Entry Point

Adversarial concurrent training experiments: train, attack, evaluate and
analyze robust/natural model pairs.
"""

import sys
from pathlib import Path

# Add project root to Python path
project_root = Path(__file__).parent
sys.path.insert(0, str(project_root))

from act_lab.lab import main  # noqa: E402

if __name__ == "__main__":
    sys.exit(main())
