//! Neural-process segmentation head with per-image latent variables,
//! class memory banks, and distance-softmax attention aggregation, wired
//! into a minimal semi-supervised self-training pipeline.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] / [`rng`] — dense f32 tensors and a splittable, seeded RNG.
//! * [`tape`] / [`ops`] — reverse-mode autodiff over tensor ops (conv,
//!   instance norm, linear, softmax, pooling, attention aggregation, ...).
//! * [`fdcheck`] — central finite-difference gradient oracle.
//! * [`segmodel`] — encoder stand-in, channel-reduction ConvNet, decoder.
//! * [`np_head`] — memory banks, class centers, latent distributions,
//!   center snapshots.
//! * [`model`] — the assembled segmentation model and its forward pass.
//! * [`losses`] — pixel-wise cross entropy, analytic diagonal-Gaussian KL,
//!   and the combined training loss.
//! * [`trainer`] — pseudo-labeling, SGD training loop, checkpoints, and the
//!   MC-dropout uncertainty baseline.
//! * [`evalkit`] — mIoU, PAvPU, sliding-window evaluation, and the
//!   uncertainty timing benchmark.
//! * [`synthdata`] — deterministic synthetic dataset with scene-dependent
//!   class priors, stored as PPM/PGM files.
//! * [`config`] / [`cli`] — flat key=value run configuration and the
//!   `npss` command-line entry points.
//!
//! See the `examples/` directory for runnable end-to-end walkthroughs of
//! each capability.

pub mod cli;
pub mod config;
pub mod evalkit;
pub mod fdcheck;
pub mod imageio;
pub mod losses;
pub mod model;
pub mod np_head;
pub mod ops;
pub mod rng;
pub mod segmodel;
pub mod synthdata;
pub mod tape;
pub mod tensor;
pub mod trainer;

mod error;

pub use error::{NpError, Result};
pub use tensor::{LabelMap, Parameter, Real, Tensor, IGNORE_LABEL};
