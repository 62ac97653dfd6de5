//! UWB/IMU inertial navigation on SE2(3).
//!
//! * [`liegroup`]: SO(3)/SE2(3) algebra and exponentials
//! * [`tdoa`]: cyclic TDOA least-squares positioning
//! * [`sensors`]: IMU models and vector triads
//! * [`observer`]: the nonlinear observer and its diagnostics
//! * [`sim`]: ground truth and measurement synthesis
//! * [`replay`]: dataset ingestion, replay and summary metrics

pub mod liegroup;
pub mod observer;
pub mod replay;
pub mod sensors;
pub mod sim;
pub mod tdoa;

pub use liegroup::{NavState, Rotation, TangentElement, Vec3};
pub use observer::{ErrorMetrics, Gains, Observer, ObserverConfig, ObserverState};
pub use sensors::{ImuSample, ReferenceVectors, TriadPair};
pub use tdoa::{Anchor, AnchorSet, ReconstructedPosition, TdoaFrame};
