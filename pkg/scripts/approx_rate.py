"""Run the approx-rate experiment: python3 scripts/approx_rate.py [--config configs/approx_rate_1d.json] [--out results]."""

import sys

from hardmax_tf.cli import main

if __name__ == "__main__":
    argv = sys.argv[1:]
    if "--config" not in argv:
        argv += ["--config", "configs/approx_rate_1d.json"]
    sys.exit(main(["approx-rate"] + argv))
