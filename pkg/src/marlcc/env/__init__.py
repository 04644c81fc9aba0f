"""Multi-vehicle scenarios: scenario geometry, the vectorized world and episode drivers."""

from .scenario import SCENARIOS, Layout, RewardSpec, ScenarioConfig, initial_states, make_layout, nominal_positions
from .world import (
    ACTION_DIM,
    CREDIT_MODES,
    FEATURE_DIM,
    BeliefConfig,
    EnvConfig,
    SnapshotOracle,
    StepResult,
    WorldState,
    control_inputs,
    estimate,
    eval_seed,
    features,
    lane_streams,
    make_world,
    reset,
    restore,
    reward_terms,
    snapshot,
    step,
)
from .episode import (
    EPISODE_COLUMNS,
    EpisodeLog,
    FunctionPolicy,
    TrainingConfig,
    TrainingRecord,
    closed_loop_stability,
    evaluate,
    run_episode,
    run_training,
    step_columns,
    write_record,
    zero_policy,
)
