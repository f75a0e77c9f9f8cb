"""Train and write the bundled desk-scale encoder weights.

    python -m time_engine.pfn.build --steps 3500 --out src/time_engine/data/pfn_desk.bin
"""
from __future__ import annotations

import argparse
import json
import logging
from importlib import resources
from pathlib import Path

import torch

from .core import load_weights, save_weights, train_pfn
from .network import PFNConfig
from .prior import PriorConfig

DEFAULT_WEIGHTS = "pfn_desk.bin"
# smaller tasks than the full prior range keep the bundled run inside the CPU budget
TRAIN_PRIOR = PriorConfig(rows=(50, 320), mnar_prob=0.5, regression_fraction=0.15, seed=0)


def default_weights_path() -> Path:
    return Path(str(resources.files("time_engine") / "data" / DEFAULT_WEIGHTS))


_cached = {}


def load_default():
    """Bundled weights, loaded once per process."""
    path = default_weights_path()
    if path not in _cached:
        if not path.exists():
            raise FileNotFoundError(f"bundled encoder weights missing at {path}; "
                                    "run `python -m time_engine.pfn.build`")
        _cached[path] = load_weights(path, expected=PFNConfig())
    return _cached[path]


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--steps", type=int, default=3500)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--batch-size", type=int, default=8)
    parser.add_argument("--out", type=Path, default=default_weights_path())
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    torch.set_num_threads(1)
    result = train_pfn(TRAIN_PRIOR, PFNConfig(), args.steps, seed=args.seed,
                       batch_size=args.batch_size, log_every=250)
    save_weights(result.weights, args.out)
    hist = args.out.with_suffix(".history.json")
    hist.write_text(json.dumps({"loss": result.loss_history, "seconds": result.seconds}))
    logging.info("wrote %s after %.0fs", args.out, result.seconds)


if __name__ == "__main__":
    main()
