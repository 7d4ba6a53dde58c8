//! Iterative learning on reward-filtered synthetic data.
//!
//! Each iteration draws samples from the current generator, keeps every draw
//! with probability equal to its reward until `n_t` samples are kept, and
//! updates the generator on the kept set. The number kept per iteration is the
//! *policy*; this crate materializes policy families into schedules, runs the
//! loop under Monte Carlo, and provides exact closed forms for the Gaussian
//! generator with exponential reward so simulated curves can be checked
//! against theory.
//!
//! Module map:
//!
//! * [`policy`]: policy families, budget-matched constructors, schedules.
//! * [`gaussian`]: the Gaussian generator, exponential reward and MLE update.
//! * [`gdmodel`]: loss-model interface and the gradient-descent updater.
//! * [`engine`]: selection, the iterative loop, cost accounting, Monte Carlo.
//! * [`analytic`]: marginal law of the parameter, optimal allocation, cost curves.
//! * [`cli`]: config files, CSV/SVG output and the subcommands.

pub mod analytic;
pub mod batch;
pub mod cli;
pub mod engine;
pub mod gaussian;
pub mod gdmodel;
pub mod policy;
pub mod stats;

pub use batch::Batch;

/// Random stream used for every simulation in this crate.
///
/// ChaCha8 is portable and its output is fixed by the seed alone, which the
/// byte-identical output contract relies on.
pub type SimRng = rand_chacha::ChaCha8Rng;
