//! Deterministic simulator and experiment harness for federated training of
//! binary classifiers over heterogeneous tasks.
//!
//! Four training schemes are implemented and compared: direct training (no
//! pretraining), federated averaging, meta-federated learning (server updates
//! from averaged meta-gradients), and partial meta-federated learning (the
//! same meta-update restricted to a shared half of the parameters).
//!
//! The crate is organized bottom-up:
//!
//! * [`autodiff`] — scalar computation graph with reverse-mode gradients,
//!   including gradients-of-gradients for exact meta-updates.
//! * [`model`] — dense binary classifier over a flat parameter vector, with
//!   partition masks for the shared/local split.
//! * [`data`] — synthetic heterogeneous task generation, silo partitioning,
//!   CSV loading, stratified splits.
//! * [`metrics`] — confusion counts, ROC/AUC, Youden-optimal thresholding.
//! * [`federation`] — round-synchronous client/server state machines.
//! * [`experiment`] — multi-seed scheme comparison with CSV/JSON outputs.
//!
//! Everything is deterministic given seeds: same configuration, same bytes
//! out.

pub mod autodiff;
pub mod data;
pub mod experiment;
pub mod federation;
pub mod metrics;
pub mod model;
pub mod seed;
