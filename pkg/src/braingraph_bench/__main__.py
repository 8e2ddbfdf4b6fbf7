"""Entry point for running as a module."""
import sys

from braingraph_bench.app import main

if __name__ == "__main__":
    sys.exit(main())
