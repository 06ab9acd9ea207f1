import os
import sys

# Root modules import each other by name
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import cli

if __name__ == "__main__":
    sys.exit(cli.main())
