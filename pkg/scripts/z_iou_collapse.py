"""z-histogram IoU of the gated pipeline vs a forced cross-floor collapse baseline."""

import argparse

from hsgraph.evaluation import GroundTruth, evaluate_run
from hsgraph.loopclosure import LoopConfig
from hsgraph.pipeline import PipelineConfig, run
from hsgraph.simulator import NoiseSpec, WorldSpec, simulate


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seeds", type=int, default=2)
    args = p.parse_args()
    collapsed = PipelineConfig(loop_gate="off", loopclosure=LoopConfig(force=True))
    for s in range(args.seeds):
        world, frames = simulate(WorldSpec(floors=3, cols=3, seed=s), NoiseSpec())
        gt = GroundTruth.from_frames(world, frames)
        g = evaluate_run(run(frames), gt)
        c = evaluate_run(run(frames, collapsed), gt)
        print(
            f"seed {s}: gated z_iou {g.z_iou:.3f} (points {g.extra['z_iou_points']:.3f}), "
            f"collapsed {c.z_iou:.3f} (points {c.extra['z_iou_points']:.3f})"
        )


if __name__ == "__main__":
    main()
