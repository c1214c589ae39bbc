#!/usr/bin/env python3
"""
Low-bit layer quantizer

Quantize linear layers captured as weight/activation tensors:
- Twin-log weights with shift-only integer execution
- Adaptive rotation of activation outliers

Usage:
    python scripts/quantize_layers.py synth --out corpus/
    python scripts/quantize_layers.py quantize --corpus corpus/ --out quant/
    python scripts/quantize_layers.py simulate --corpus corpus/ --artifacts quant/ --out sim/
    python scripts/quantize_layers.py report --corpus corpus/ --out report/ --ablation
"""

import sys
from pathlib import Path

# Add parent directory to path for package import
sys.path.insert(0, str(Path(__file__).parent))

from lowbit_quant.cli import main

if __name__ == "__main__":
    sys.exit(main())
