"""Floor-gated vs ungated loop closure on aliased 2-floor worlds."""

import argparse

import numpy as np

from hsgraph.evaluation import GroundTruth, evaluate_run
from hsgraph.pipeline import PipelineConfig, run
from hsgraph.simulator import NoiseSpec, WorldSpec, simulate


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seeds", type=int, default=10)
    args = p.parse_args()
    stats = {g: {"cross": 0, "loops": 0, "ate": []} for g in ("floor", "off")}
    for s in range(args.seeds):
        world, frames = simulate(WorldSpec(floors=2, cols=2, aliased=True, seed=s), NoiseSpec())
        gt = GroundTruth.from_frames(world, frames)
        for gate, st in stats.items():
            res = run(frames, PipelineConfig(loop_gate=gate))
            m = evaluate_run(res, gt, with_map=False)
            st["cross"] += m.false_cross_floor_closures
            st["loops"] += res.count("LOOP_CLOSURE")
            st["ate"].append(m.ate_rmse)
            print(f"seed {s} gate {gate:5s} loops {res.count('LOOP_CLOSURE'):3d} cross {m.false_cross_floor_closures:3d} ate {m.ate_rmse:.3f}")
    for gate, st in stats.items():
        print(f"gate {gate:5s}: {st['loops']} loops, {st['cross']} cross-floor, mean ATE {np.mean(st['ate']):.3f} m")


if __name__ == "__main__":
    main()
