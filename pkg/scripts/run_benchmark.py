#!/usr/bin/env python3
"""Generate a synthetic stage-progression dataset and run the full comparison.

Equivalent to:

    stageseq gen-data --out <workdir>/data --stages 4 --per-stage 120 --seed 11
    stageseq compare --data <workdir>/data --repeats 3 --steps-per-epoch 100 --seed 11

but driven through the library API so the result objects are available for
further analysis. Runtime is several minutes on two cores.
"""

import argparse
import json
import os
import sys
from pathlib import Path

from stageseq.pipeline import TrainConfig, compare_experiment
from stageseq.synth import SynthConfig, generate, load_dataset


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--workdir", default="benchmark_out")
    parser.add_argument("--per-stage", type=int, default=120)
    parser.add_argument("--repeats", type=int, default=3)
    parser.add_argument("--steps-per-epoch", type=int, default=100)
    parser.add_argument("--seed", type=int, default=11)
    parser.add_argument("--modes", default="cyclic", choices=("cyclic", "nonregression", "both"))
    args = parser.parse_args()

    workdir = Path(args.workdir)
    data_dir = workdir / "data"
    if not (data_dir / "manifest.csv").exists():
        config = SynthConfig(num_stages=4, per_stage=args.per_stage, seed=args.seed)
        generate(config, data_dir)
        print(f"generated {4 * args.per_stage} images under {data_dir}", file=sys.stderr)
    dataset = load_dataset(data_dir)

    modes = ("cyclic", "nonregression") if args.modes == "both" else (args.modes,)
    workers = max(1, int(os.environ.get("STAGESEQ_THREADS", "1")))
    result = compare_experiment(
        dataset,
        TrainConfig(steps_per_epoch=args.steps_per_epoch),
        repeats=args.repeats,
        seed=args.seed,
        modes=modes,
        workers=min(workers, args.repeats),
    )
    print(result.format_table(), end="")
    out = workdir / "compare.json"
    out.write_text(json.dumps(result.to_json_dict(), indent=2, sort_keys=True) + "\n")
    print(f"raw results: {out}", file=sys.stderr)
    return 0 if result.num_successes else 3


if __name__ == "__main__":
    sys.exit(main())
