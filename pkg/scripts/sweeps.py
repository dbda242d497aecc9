"""Decoding sweeps on the toy PD model: steps ratio, confidence threshold, span-length scale.

Writes one CSV per sweep (plus JSON) into --out; the AR row is included for reference.

    python scripts/sweeps.py --n 60 --out runs/sweeps
"""

import argparse

from plandiff.bench import BenchConfig, run_bench
from plandiff.engine import GenerationConfig
from plandiff.toy import ToySetup, load

SWEEPS = {
    "steps_ratio": BenchConfig(("pd",), steps_ratios=(0.25, 0.5, 0.75, 1.0)),
    "confidence": BenchConfig(("pd-tau",), confidences=(0.4, 0.5, 0.6, 0.7, 0.8, 0.9)),
    "length_scale": BenchConfig(("pd",), length_scales=(0.5, 1.0, 1.5, 2.0, 2.5)),
    "baseline": BenchConfig(("ar", "pd")),
}


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--n", type=int, default=60, help="held-out prompts per cell")
    p.add_argument("--out", default="runs/sweeps")
    p.add_argument("--only", help="comma-separated subset of " + ",".join(SWEEPS))
    p.add_argument("--root", help="artifact directory")
    args = p.parse_args()

    setup = ToySetup()
    held = setup.heldout_docs()[: args.n]
    pd, ar = load("pd", setup, args.root), load("ar", setup, args.root)
    models = {"pd": pd.model, "ar": ar.model}
    hashes = {"pd": pd.content_hash, "ar": ar.content_hash}
    names = args.only.split(",") if args.only else list(SWEEPS)
    for name in names:
        cfg = SWEEPS[name]
        report, _ = run_bench(models, held, cfg, GenerationConfig(),
                              {"sweep": name, "setup": setup.to_dict(), "n_prompts": len(held)}, hashes)
        csv_path, _ = report.write(args.out, stem=name)
        print(f"== {name} -> {csv_path}")
        for row in report.rows:
            print("  " + ", ".join(f"{k}={v}" for k, v in row.items() if k != "mean_wall_time"))


if __name__ == "__main__":
    main()
