"""Train (or reuse) the toy PD model and AR baseline, then report held-out quality.

    python scripts/train_toy.py --eval 60
"""

import argparse

from plandiff.bench import Cell, run_cell
from plandiff.engine import GenerationConfig
from plandiff.toy import ToySetup, load, prepare, run_dir, train_seconds


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--root", help="artifact directory (default: ./artifacts or $PLANDIFF_ARTIFACTS)")
    p.add_argument("--methods", default="pd,ar")
    p.add_argument("--eval", type=int, default=0, help="held-out prompts to score after training")
    args = p.parse_args()

    setup = ToySetup()
    methods = tuple(m.strip() for m in args.methods.split(",") if m.strip())
    paths = prepare(setup, methods, args.root)
    for m in methods:
        print(f"{m}: {paths[m]} ({train_seconds(m, setup, args.root):.0f}s of training)")
    if args.eval:
        held = setup.heldout_docs()[: args.eval]
        for m in methods:
            res = run_cell(load(m, setup, args.root).model, held, Cell(m), GenerationConfig())
            print(f"{m}: exact={res.exact_match:.3f} well_formed={res.well_formed:.3f} "
                  f"critical_path={res.mean_critical_path:.1f} tokens={res.mean_tokens:.1f}")
    print(f"artifacts: {run_dir(setup, methods[0], args.root).parent}")


if __name__ == "__main__":
    main()
