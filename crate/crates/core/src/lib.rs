//! Tools for checking and stress-testing the information-theoretic ceiling on
//! attribute-bias removal, `0 <= I(Z;Y) <= I(Z;A) + H(Y|A)`.
//!
//! * [`exact_info`] computes every quantity exactly on small discrete joints.
//! * [`mi_estim`] estimates mutual information from samples.
//! * [`tinynet`] is the feedforward network core used by every trained model.
//! * [`datagen`] builds datasets with a controllable `H(Y|A)`.
//! * [`debias`] trains the baseline and the bias-removal methods.
//! * [`stats`] runs one-sided Kolmogorov–Smirnov tests and finds breaking points.
//! * [`harness`] drives sweeps over bias strength and writes reports and plots.

pub mod datagen;
pub mod debias;
pub mod exact_info;
pub mod harness;
pub mod mi_estim;
pub mod stats;
pub mod tinynet;
