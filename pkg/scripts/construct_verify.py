"""Run the construct-verify experiment: python3 scripts/construct_verify.py [--config configs/construct_verify.json] [--out results]."""

import sys

from hardmax_tf.cli import main

if __name__ == "__main__":
    argv = sys.argv[1:]
    if "--config" not in argv:
        argv += ["--config", "configs/construct_verify.json"]
    sys.exit(main(["construct-verify"] + argv))
