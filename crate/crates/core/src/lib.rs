//! Learning whether reconnecting an islanded sub-network to the main grid
//! will be stable, from PMU snapshots taken just before reconnection.
//!
//! The crate is organised by stage: [`netcase`] (network data and power
//! flow), [`scenario`] (operating points and initial conditions),
//! [`dynsim`] (island/reconnect dynamics with relays and labeling),
//! [`featureset`] (PMU features, datasets and split protocols), [`svm`]
//! (SMO-trained soft-margin SVM) and [`pipeline`] (end-to-end experiments).

pub mod dynsim;
pub mod featureset;
pub mod netcase;
pub mod pipeline;
pub mod rng;
pub mod scenario;
pub mod svm;

/// The two-area desk-scale case shipped with the crate.
pub const TWOAREA_CASE: &str = include_str!("../data/twoarea.case");

pub fn twoarea_case() -> netcase::NetworkCase {
    TWOAREA_CASE.parse().expect("bundled case is valid")
}
