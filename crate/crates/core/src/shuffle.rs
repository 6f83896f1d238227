//! Oblivious shuffle of a secret-shared table.
//!
//! With a dealer-provided correlation `(A1, B, pi1)` at `P1` and
//! `(A2, pi2, Delta)` at `P2`, where `Delta = pi2(pi1(A2) + A1) - B`:
//!
//! 1. `P2` sends `Z2 = T2 - A2`.
//! 2. `P1` sends `Z1 = pi1(Z2 + T1) - A1` and outputs `B`.
//! 3. `P2` outputs `pi2(Z1) + Delta`.
//!
//! The output shares reconstruct to `pi2(pi1(T))`; each server knows only its
//! own factor of the composed permutation.

use crate::dealer::ShuffleShare;
use crate::engine::Session;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::ring::{Party, RingWord};
use crate::transport::{MsgType, Transport};

/// One party's share matrix of an `n x m` table; row `i` is tuple `i`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SharedDatabase<W> {
    pub party: Party,
    pub shares: Matrix<W>,
}

impl<W: RingWord> SharedDatabase<W> {
    pub fn new(party: Party, shares: Matrix<W>) -> Self {
        SharedDatabase { party, shares }
    }

    pub fn n(&self) -> usize {
        self.shares.rows()
    }

    pub fn m(&self) -> usize {
        self.shares.cols()
    }

    pub fn row(&self, i: usize) -> &[W] {
        self.shares.row(i)
    }
}

/// Reconstructs a table from both parties' shares.
pub fn reconstruct_table<W: RingWord>(a: &SharedDatabase<W>, b: &SharedDatabase<W>) -> Result<Matrix<W>> {
    if a.party == b.party {
        return Err(Error::PartyMismatch("both tables belong to the same party".into()));
    }
    a.shares.add(&b.shares)
}

fn encode_matrix<W: RingWord>(m: &Matrix<W>) -> Vec<u8> {
    let mut out = Vec::with_capacity(m.data().len() * W::BYTES);
    for &x in m.data() {
        x.write_le(&mut out);
    }
    out
}

fn decode_matrix<W: RingWord>(bytes: &[u8], rows: usize, cols: usize) -> Result<Matrix<W>> {
    if bytes.len() != rows * cols * W::BYTES {
        return Err(Error::Protocol(format!(
            "shuffle message of {} bytes for a {rows}x{cols} table",
            bytes.len()
        )));
    }
    Matrix::from_vec(rows, cols, bytes.chunks_exact(W::BYTES).map(W::read_le).collect())
}

/// Shuffles `db` with the session's (single-use) shuffle correlation.
pub fn obli_shuff<T: Transport, W: RingWord>(
    session: &mut Session<T, W>,
    db: &SharedDatabase<W>,
) -> Result<SharedDatabase<W>> {
    if db.party != session.party() {
        return Err(Error::PartyMismatch("table share belongs to the other party".into()));
    }
    let shape = session.correlations().shape();
    if shape != (db.n(), db.m()) {
        return Err(Error::DimensionMismatch(format!(
            "table is {}x{}, shuffle correlation is {}x{}",
            db.n(),
            db.m(),
            shape.0,
            shape.1
        )));
    }
    let corr = session.correlations_mut().take_shuffle()?;
    let (n, m) = (db.n(), db.m());
    let out = match corr {
        ShuffleShare::Second { a2, pi2, delta } => {
            let z2 = db.shares.sub(&a2)?;
            session.send_step(MsgType::ShuffleZ2, encode_matrix(&z2))?;
            let z1 = decode_matrix(&session.recv_step(MsgType::ShuffleZ1)?, n, m)?;
            z1.permute_rows(&pi2)?.add(&delta)?
        }
        ShuffleShare::First { a1, b, pi1 } => {
            let z2 = decode_matrix(&session.recv_step(MsgType::ShuffleZ2)?, n, m)?;
            let z1 = z2.add(&db.shares)?.permute_rows(&pi1)?.sub(&a1)?;
            session.send_step(MsgType::ShuffleZ1, encode_matrix(&z1))?;
            b
        }
    };
    Ok(SharedDatabase::new(db.party, out))
}
