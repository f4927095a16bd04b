//! Monocular 3D vehicle localisation and socio-temporal attention trajectory
//! prediction.

pub mod tensor;
pub mod geometry3d;
pub mod track_assembly;
pub mod nn;
pub mod stmha_net;
pub mod training;
pub mod synth;
pub mod pose_regressor;
pub mod pipeline;
pub mod io;
