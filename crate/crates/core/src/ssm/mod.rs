//! State-space models, mismatch scenarios, simulation and datasets.

mod benchmarks;
mod dataset;
mod model;
mod scenario;

pub use benchmarks::{
    cv_model, cv_velocity_observation, linear_benchmark, linear_benchmark_matrices, lorenz_a,
    lorenz_benchmark, lorenz_rotated_observation, lorenz_transition, radar_benchmark, radar_h,
    radar_jacobian, rotation2, LorenzSetup, RadarSetup, LORENZ_BETA, LORENZ_RHO, LORENZ_SIGMA,
};
pub use dataset::{
    load_csv, read_csv, save_csv, split_counts, write_csv, Split, SplitDataset, TrajectoryItem,
};
pub use model::{Dynamics, NominalModel, Observation};
pub use scenario::{coordinated_turn, generate, simulate, Scenario, TrueProcess};

#[allow(unused_imports)]
pub(crate) use scenario::{draw, noise_factor};
