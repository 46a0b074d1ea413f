//! Tube-based robust and stochastic optimal control with Riccati-optimized
//! ellipsoidal tubes.
//!
//! A [`TubeOcp`] couples a nominal OCP with an ellipsoidal uncertainty tube.
//! [`solve`] alternates between designing feedback gains by a Riccati
//! recursion, propagating the tube, tightening the constraints by the
//! resulting backoffs, and re-solving the nominal problem, until the backoffs
//! stop changing.
//!
//! ```no_run
//! use rzoro::{build_problem, solve, AlgoOptions, ProblemParams, WeightMode};
//!
//! let ocp = build_problem(&ProblemParams::named("pendulum")).unwrap();
//! let report = solve(&ocp, &AlgoOptions::with_weights(WeightMode::adaptive())).unwrap();
//! println!("{} outer iterations, objective {}", report.outer_iterations, report.objective);
//! ```

pub mod error;
pub mod linalg;
pub mod model;
pub mod nominal;
pub mod oracle;
pub mod problems;
pub mod qp;
pub mod tube;
pub mod zoro;

pub mod cli;
pub mod config;
pub mod output;

pub use error::{Error, Result};
pub use linalg::{Mat, Vec64};
pub use model::{
    evaluate_sensitivities, rollout, ConstraintValues, Dims, DynamicsJacobians, Model, NominalTrajectory,
    SensitivityBundle, StageHessian, StageSensitivity, TubeOcp,
};
pub use nominal::{solve_nominal, HessianMode, LineSearch, NominalSolution, NominalSolveOptions, NominalStatus};
pub use problems::{build_problem, list_problems, LinearModel, ProblemInfo, ProblemParams};
pub use tube::{
    compute_backoffs, propagate_ellipsoids, riccati_recursion, Backoffs, Multipliers, StageWeight, StageWeights,
    TubeTrajectory,
};
pub use zoro::{
    closed_loop_simulate, solve, stationarity_residual, AlgoOptions, ClosedLoopLog, ClosedLoopOptions, InnerMode,
    NoiseMode, NoiseSampler, NominalInit, SolveReport, WeightMode,
};
