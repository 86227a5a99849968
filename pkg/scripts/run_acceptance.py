"""Run the acceptance suite and show its PASS/FAIL lines.

    python3 scripts/run_acceptance.py [extra pytest args]
"""
import os
import sys

import pytest

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))

if __name__ == "__main__":
    sys.exit(pytest.main([os.path.join(ROOT, "tests", "test_acceptance.py"), "-v", "-s",
                          *sys.argv[1:]]))
