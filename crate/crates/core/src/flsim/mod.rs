//! End-to-end simulation of noising-before-aggregation federated learning.
//!
//! Clients start each round from the global model, run full-batch gradient
//! descent on their own loss, project the result onto the `C`-ball and add
//! Gaussian noise; the server averages the perturbed uploads with weights
//! proportional to dataset size. Every run is recorded as a [`Trajectory`].

pub mod csv;
mod problem;
mod training;

pub use problem::{
    make_logistic, make_quadratic, sphere_point, Certificate, LogisticClient, Problem, ProblemKind, OPTIMUM_TOLERANCE,
};
pub use training::{
    calibrate_clip_radius, clip_to_ball, mean_gap_per_round, merge_trajectories, nbafl_round, run_seeds,
    run_training, FLState, RoundOutcome, TrainOptions, Trajectory, TrajectoryRecord,
};
