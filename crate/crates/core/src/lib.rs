//! Online recovery control with learned disturbance models and invariant funnels.

pub mod conic;
pub mod error;
pub mod linalg;
pub mod microgrid;
pub mod plant;
pub mod qp;
pub mod ren;
pub mod runner;
pub mod scalar;
pub mod synthesis;

pub use error::{Error, Result};
pub use scalar::Real;

/// `f64` instantiations of the generic core.
pub type Plant = plant::PlantModel<f64>;
pub type Nominal = plant::NominalTrajectory<f64>;
pub type Polytope = plant::Polytope<f64>;
pub type Dmi = synthesis::DmiProblem<f64>;
pub type Funnel = synthesis::FunnelSolution<f64>;
pub type Offline = synthesis::OfflineSettings<f64>;
pub type Online = synthesis::OnlineSettings<f64>;
pub type Ren = ren::RenParams<f64>;
pub type RenState = ren::RenState<f64>;
pub type RenSpec = ren::RenIqcSpec<f64>;
pub type Sdp = conic::SdpProgram<f64>;
pub type SdpSolution = conic::SdpSolution<f64>;
