//! Kinematic two-hand piano playing from scores and fingertip demonstrations.
//!
//! The numeric core (homography fitting, hand kinematics, the IK QP, rewards,
//! the goal SDF and the small MLPs) is generic over [`Real`]; the aliases below
//! fix the scalar to `f64`, which is what the pipeline and the CLI use.

pub mod codec;
pub mod distill;
pub mod env;
pub mod error;
pub mod ik;
pub mod kinematics;
pub mod linalg;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod real;
pub mod residual;
pub mod retarget;
pub mod score;
pub mod synth;

pub use error::{Error, Result};
pub use real::Real;

/// Default control rate of the piano-state trajectories and the environment.
pub const DEFAULT_CONTROL_HZ: f64 = 20.0;

pub type Homography = retarget::Homography<f64>;
pub type KeyGeometry = retarget::KeyGeometry<f64>;
pub type FingertipFrame = retarget::FingertipFrame<f64>;
pub type HandModelSpec = kinematics::HandModelSpec<f64>;
pub type JointConfig = kinematics::JointConfig<f64>;
pub type IkParams = ik::IkParams<f64>;
pub type EnvConfig = env::EnvConfig<f64>;
pub type PianoEnv = env::PianoEnv<f64>;
pub type Mlp = nn::Mlp<f64>;
