//! Two-server skyline queries over secret-shared data.
//!
//! A data owner splits its table into additive shares held by two
//! non-colluding servers. A client submits a shared range-and-preference
//! query; the servers jointly shuffle the table, keep the rows inside the
//! range, and compute the skyline over them, returning shares the client
//! reconstructs and filters.

pub mod audit;
pub mod client;
pub mod dealer;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod local;
pub mod matrix;
pub mod oracle;
pub mod protocol;
pub mod ring;
pub mod service;
pub mod shuffle;
pub mod transport;

pub use dealer::{deal, CorrelationBudget, CorrelationSet, PartyCorrelations};
pub use engine::{MaskSource, Session, SessionStats};
pub use error::{Error, Result};
pub use matrix::{Matrix, Permutation};
pub use oracle::{Constraint, PlainQuery, Preference};
pub use protocol::{execute_query, QueryOutcome, QueryShare, ResultShare};
pub use ring::{Party, Ring, RingWord};
pub use shuffle::SharedDatabase;
