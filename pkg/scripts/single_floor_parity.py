"""ATE of hierarchical vs batch mode on single-floor worlds.

Also runs the hierarchical mode without room marginalization to separate the
cost of marginalization from the cost of windowed optimization.
"""

import argparse

from hsgraph.metrics import ate_rmse
from hsgraph.pipeline import PipelineConfig, run
from hsgraph.simulator import NoiseSpec, WorldSpec, simulate


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--cols", type=int, default=3)
    args = p.parse_args()
    configs = {
        "hier": PipelineConfig(mode="hier"),
        "hier_nomarg": PipelineConfig(mode="hier", room_marginalization=False),
        "batch": PipelineConfig(mode="batch"),
    }
    print("seed  " + "  ".join(f"{k:>11s}" for k in configs) + "  hier/batch")
    for s in range(args.seeds):
        _, frames = simulate(WorldSpec(floors=1, cols=args.cols, seed=s), NoiseSpec())
        truth = {f.stamp: f.true_pose for f in frames}
        ate = {k: ate_rmse(run(frames, c).trajectory(), truth) for k, c in configs.items()}
        print(f"{s:4d}  " + "  ".join(f"{v:11.4f}" for v in ate.values()) + f"  {ate['hier'] / ate['batch']:10.3f}")


if __name__ == "__main__":
    main()
