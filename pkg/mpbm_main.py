"""
Training, ablation, sweep and evaluation entry point for MPBM.

    python mpbm_main.py train --config training_configs/blobs_rotated.json
"""
import sys

from mpbm.cli import main


if __name__ == "__main__":
    sys.exit(main())
