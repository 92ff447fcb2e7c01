//! Stability DMI, funnel geometry and the synthesis programs.

pub mod dmi;
pub mod funnel;
pub mod program;

pub use dmi::{
    build_dmi, build_dmi_scaled, dmi_equivalence_check, dmi_equivalence_report, dmi_matrix, gain_from, pre_schur_matrix,
    solve_dmi, DmiCertificate, DmiProblem, EquivalenceReport,
};
pub use funnel::{
    contraction_k, funnel_radius, funnel_sample, input_constraint_lmi, r_bar, state_constraint_lmi, support_value,
    RadiusMode, R_BAR_CAP,
};
pub use program::{
    diagnose_online, dmi_problem, solve_offline, solve_online, verify_solution, ConstraintClass, FunnelSolution, OfflineSettings,
    OnlineSettings, EPS_SDP,
};
