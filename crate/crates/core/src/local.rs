//! Runs both servers' halves of a protocol inside one process, one thread
//! each, over an in-memory link.

use std::time::Duration;

use crate::dealer::CorrelationSet;
use crate::engine::Session;
use crate::error::Result;
use crate::protocol::{execute_query, QueryOutcome, QueryShare};
use crate::ring::RingWord;
use crate::shuffle::SharedDatabase;
use crate::transport::{inmem_transport_pair, InMemTransport};

/// Runs `first` and `second` concurrently and returns both results.
pub fn run_pair<A, B, FA, FB>(first: FA, second: FB) -> (A, B)
where
    A: Send,
    B: Send,
    FA: FnOnce() -> A + Send,
    FB: FnOnce() -> B + Send,
{
    std::thread::scope(|s| {
        let h = s.spawn(second);
        let a = first();
        let b = h.join().expect("second party panicked");
        (a, b)
    })
}

/// Two sessions connected by an in-memory link with the given one-way delay.
pub fn local_sessions<W: RingWord>(
    session_id: u64,
    corr: CorrelationSet<W>,
    delay: Duration,
) -> (Session<InMemTransport, W>, Session<InMemTransport, W>) {
    let (t1, t2) = inmem_transport_pair(delay);
    let (c1, c2) = corr.into_parties();
    (Session::new(session_id, t1, c1), Session::new(session_id, t2, c2))
}

/// Runs one full query with both servers in-process.
pub fn run_query_local<W: RingWord>(
    session_id: u64,
    db: (&SharedDatabase<W>, &SharedDatabase<W>),
    query: (&QueryShare<W>, &QueryShare<W>),
    corr: CorrelationSet<W>,
    delay: Duration,
) -> Result<(QueryOutcome<W>, QueryOutcome<W>)> {
    let (mut s1, mut s2) = local_sessions(session_id, corr, delay);
    let (a, b) = run_pair(
        || execute_query(&mut s1, db.0, query.0),
        || execute_query(&mut s2, db.1, query.1),
    );
    Ok((a?, b?))
}
