"""Re-run an experiment from its manifest into a scratch directory and compare CSV hashes.

    python scripts/reproduce.py results/rate/rate_manifest.json
"""

import argparse
import json
import sys
import tempfile
from pathlib import Path

from homlab.harness.cli import main


def reproduce(manifest: Path) -> int:
    exp = json.loads(manifest.read_text())["experiment"]
    with tempfile.TemporaryDirectory() as tmp:
        return main([exp, "--config", str(manifest), "--out", tmp, "--verify"])


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("manifest", type=Path)
    sys.exit(reproduce(p.parse_args().manifest))
