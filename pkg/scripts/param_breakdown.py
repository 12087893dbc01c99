"""Per-module trainable parameter counts of a model config (default: the full-size model).

    python scripts/param_breakdown.py [--config cfg.json]
"""

import argparse
import json

from sedunet.model import ModelConfig, model_param_count, param_breakdown


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", help="JSON with a 'model' section; defaults to ModelConfig()")
    args = p.parse_args()
    cfg = ModelConfig()
    if args.config:
        with open(args.config) as f:
            cfg = ModelConfig.from_dict(json.load(f).get("model", {}))
    for name, n in param_breakdown(cfg).items():
        print(f"{name:16s} {n:>12,d}")
    print(f"{'total':16s} {model_param_count(cfg):>12,d}")


if __name__ == "__main__":
    main()
