"""Run the class-rate experiment: python3 scripts/class_rate.py [--config configs/class_rate.json] [--out results]."""

import sys

from hardmax_tf.cli import main

if __name__ == "__main__":
    argv = sys.argv[1:]
    if "--config" not in argv:
        argv += ["--config", "configs/class_rate.json"]
    sys.exit(main(["class-rate"] + argv))
