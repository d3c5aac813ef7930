//! Two-layer ReLU students trained by projected gradient descent on
//! kernel-teacher soft labels or hard labels, with numerical checks of the
//! neuron-count, descent and concentration bounds that govern them.
//!
//! The crate is organised bottom-up:
//!
//! * [`dataio`] — margin-controlled synthetic data, MNIST idx ingestion, noise.
//! * [`model`] — the symmetric-initialised student, frozen-pattern evaluation,
//!   flip sets and checkpoints.
//! * [`losses`] — KL / logistic / 0-1 losses and batch risks.
//! * [`teacher`] — soft labels and the reference weights `U`, `W̄`.
//! * [`optim`] — projected gradient descent with a dense engine and an exact
//!   shared-displacement engine for very wide students.
//! * [`verify`] — bound formulas, Monte Carlo lemma checks, end-to-end runs and
//!   the minimal-width sweep.
//!
//! ```
//! use kdbound::{dataio, model, teacher};
//!
//! let (ds, u) = dataio::generate_synthetic(&dataio::SynthSpec {
//!     n: 8,
//!     d: 4,
//!     target_half_margin: 0.2,
//!     direction_seed: 1,
//!     sample_seed: 2,
//! })?;
//! let labels = teacher::teacher_logits(&teacher::TeacherSpec::ClosedFormLinear { u }, &ds)?;
//! assert!(labels.margin >= 0.2);
//!
//! let net = model::init_symmetric(16, 4, 7)?;
//! assert!(model::forward(&net, ds.inputs.row(0))?.abs() < 1e-12);
//! # Ok::<(), kdbound::Error>(())
//! ```

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataio;
pub mod error;
pub mod linalg;
pub mod losses;
pub mod model;
pub mod optim;
pub mod par;
pub mod rng;
pub mod teacher;
pub mod verify;

pub use error::{Error, Result};
pub use linalg::Matrix;
