#!/usr/bin/env python3
"""nearfield-pae command line: simulate, estimate, baseline, bound, sweep"""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

from src.cli.main import main  # noqa: E402

if __name__ == "__main__":
    sys.exit(main())
