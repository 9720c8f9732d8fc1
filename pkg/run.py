"""
Entry point for the chaintrace command line.

Run with:
    python run.py <subcommand> [options]
    python run.py --help
"""

import sys

from app.main import cli

if __name__ == "__main__":
    sys.exit(cli())
