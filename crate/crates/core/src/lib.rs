//! Latent conditional flow-matching world model over occupancy grids.
//!
//! The crate is organised bottom-up:
//!
//! * [`numerics`]: dense f64 tensors, MLPs with hand-written backprop, LoRA,
//!   AdamW, warmup-cosine schedules, EMA and a PSD square root.
//! * [`occupancy`]: voxel grids, densification, IoU/mIoU, synthetic scenes,
//!   dataset splits and the binary grid/clip formats.
//! * [`vae`]: Gaussian-latent compressor with CE, KL, Lovasz-softmax and
//!   cosine-alignment losses.
//! * [`cfm`]: rectified-flow training objective, condition dropout and
//!   guided Euler sampling.
//! * [`likelihood`]: exact log-probability through the probability-flow ODE.
//! * [`metrics`]: CKA, CKNNA, FID, KID and related distances.
//! * [`pipeline`]: configuration, checkpoints, reports and the transfer study.

pub mod cfm;
pub mod error;
pub mod likelihood;
pub mod metrics;
pub mod numerics;
pub mod occupancy;
pub mod pipeline;
pub mod vae;

pub use error::{Error, Result};
