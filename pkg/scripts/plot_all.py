"""Run every generated plot script under a results directory (needs matplotlib)."""

import argparse
import subprocess
import sys
from pathlib import Path

p = argparse.ArgumentParser(description=__doc__)
p.add_argument("results", type=Path, nargs="?", default=Path("results"))
for script in sorted(p.parse_args().results.glob("*/plot_*.py")):
    print(script)
    subprocess.run([sys.executable, script.name], cwd=script.parent, check=True)
