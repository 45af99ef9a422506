"""Shelf retrieval under occlusion: simulator, planners, and evaluation tools."""

__version__ = "0.1.0"

from .environment import (InternalSim, NoiseModel, RewardSpec, Scenario, ShelfSearchEnv,
                          TaskParameterization, apply_noise, sample_scenario)
from .errors import (DegenerateHeatmap, EpisodeFinished, RemoteUnavailable, SamplingExhausted)
from .geometry import (CameraModel, ConvexPolygon, Pose2, VisibilityRegion, penetration,
                       point_visible, transform_polygon, visibility_region)
from .heuristic import (ActionDistribution, Heuristic, HeuristicOutput, ObservationHistory,
                        ScriptedHeuristic, sample_action, squash_action)
from .observation import (Observation, RasterSpec, SemanticPalette, render_observation,
                          to_robot_centric)
from .physics import (Action, ActionCaps, GripperState, ObjectState, PhysicsParams,
                      ShelfGeometry, ShelfState, StepEvents, detect_terminal, physics_step,
                      try_grasp)
from .planner import (HybridPlanner, PlannerConfig, PlannerContext, RolloutResult,
                      RootHypothesis, extract_peaks, generate_root_states, rhp,
                      select_weighted)
from .harness import EpisodeTrace, MetricsReport, evaluate_suite, run_episode
