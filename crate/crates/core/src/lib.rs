//! Adverse-weather robustness toolkit for LiDAR-based multi-agent (V2X)
//! cooperative perception.
//!
//! The crate covers the whole numerical path of a domain-generalization
//! training setup that only ever sees clean-weather data:
//!
//! * [`pointcloud`]: point/scene types, `.bin` and ASCII cloud I/O, rigid poses.
//! * [`weather`]: fog, rain and snow corruption used to build adverse-weather
//!   test sets from clean scenes.
//! * [`awa`]: adaptive weather augmentation (range reduction followed by
//!   dropout, jitter and noise injection).
//! * [`pillars`]: pillar pseudo-images and trust-region masks.
//! * [`losses`]: pillar/fused-feature L1 alignment, agent- and group-level
//!   contrastive alignment, focal and smooth-L1 kernels, all with analytic
//!   gradients.
//! * [`toy`]: a small differentiable encode/fuse pipeline that wires all of
//!   the above into the full alignment objective, plus gradient checking.
//! * [`eval3d`]: oriented box IoU and average precision.
//! * [`cli`]: the command implementations behind the `v2x-dgw` binary.

pub mod awa;
pub mod cli;
pub mod error;
pub mod eval3d;
pub mod gradcheck;
pub mod losses;
pub mod numeric;
pub mod pillars;
pub mod pointcloud;
pub mod toy;
pub mod weather;

pub use error::{Error, Result};
