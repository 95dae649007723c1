"""Run the audit experiment: python3 scripts/audit.py [--config configs/audit.json] [--out results]."""

import sys

from hardmax_tf.cli import main

if __name__ == "__main__":
    argv = sys.argv[1:]
    if "--config" not in argv:
        argv += ["--config", "configs/audit.json"]
    sys.exit(main(["audit"] + argv))
