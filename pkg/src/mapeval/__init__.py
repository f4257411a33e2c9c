"""Ground-truth-free evaluation of dense RGB-D reconstructions.

Scores a reconstructed model by re-rendering depth from it and summing the
squared differences against the observed depth images (lower is better),
alongside classical ground-truth baselines (ATE, RPE, SMD) and a
loop-closure ranking application.
"""

from .geometry import (DepthImage, Intrinsics, Pose, backproject, project,
                       se3_exp, se3_log)
from .dataset import (Frame, FrameSet, Trajectory, associate, load_depth,
                      parse_trajectory, save_depth, serialize_trajectory,
                      write_report)
from .fusion import (FusionConfig, Surfel, SurfelMap, backproject_frame,
                     fuse_sequence, load_map, save_map)
from .render import RenderConfig, render_depth, render_depth_oracle
from .metrics import (DmpReport, NoiseModel, TrajectoryError, ate, dmp, llr,
                      rpe, smd, umeyama_align)
from .pose_graph import (OptimizeResult, PoseGraph, PoseGraphEdge,
                         edge_residual, optimize)
from .loop_eval import (LoopCandidate, PrPoint, RankedLoop, evaluate_loop,
                        pr_curve, rank_loops)
from .fixtures import (AnalyticScene, Box, PerturbSpec, Plane, Sphere,
                       circle_trajectory, default_fixture,
                       make_loop_candidates, perturb_trajectory,
                       raycast_depth)

__version__ = "0.1.0"
