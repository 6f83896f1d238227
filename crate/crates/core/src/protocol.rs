//! Query-time protocol: sub-database generation, oblivious dominance, and
//! skyline fetching with masked discards.
//!
//! A query runs as shuffle, then region filtering on the shuffled table,
//! then a block-nested-loop pass over the surviving rows. The servers learn
//! the region bit of every shuffled row, the masked dominance bits, and the
//! removal bits, all in shuffled order.

use crate::dealer::{ByteReader, Consumption};
use crate::engine::{Session, SessionStats};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::ring::{Party, RingWord};
use crate::shuffle::{obli_shuff, SharedDatabase};
use crate::transport::{MsgType, Transport};

/// Rows per region-filtering batch; bounds peak memory of the comparison
/// circuit.
pub const GEN_CHUNK_ROWS: usize = 4096;

/// Two-bit preference code per dimension: `[unselected, max]`.
pub type PrefBits = [u8; 2];

/// One party's share of an extended query: a range on every dimension
/// (arithmetic shares) and a 2-bit preference code per dimension (binary
/// shares).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QueryShare<W> {
    pub party: Party,
    pub region: Vec<(W, W)>,
    pub prefs: Vec<PrefBits>,
}

impl<W: RingWord> QueryShare<W> {
    pub fn m(&self) -> usize {
        self.region.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let m = self.m();
        let mut out = Vec::with_capacity(6 + m * (2 * W::BYTES + 2));
        out.push(self.party.id());
        out.push(W::BITS as u8);
        out.extend_from_slice(&(m as u32).to_le_bytes());
        for &(lo, hi) in &self.region {
            lo.write_le(&mut out);
            hi.write_le(&mut out);
        }
        for p in &self.prefs {
            out.extend_from_slice(p);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "query share");
        let party = Party::from_id(r.u8()?)?;
        let l = r.u8()?;
        if u32::from(l) != W::BITS {
            return Err(Error::Protocol(format!("query share for l={l}, expected {}", W::BITS)));
        }
        let m = r.u32()? as usize;
        if m > bytes.len() {
            return Err(Error::CorruptFile("query share dimension count exceeds payload".into()));
        }
        let mut region = Vec::with_capacity(m);
        for _ in 0..m {
            region.push((r.word()?, r.word()?));
        }
        let mut prefs = Vec::with_capacity(m);
        for _ in 0..m {
            prefs.push([r.bit()?, r.bit()?]);
        }
        r.finish()?;
        Ok(QueryShare { party, region, prefs })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ResultEntry<W> {
    pub tuple: Vec<W>,
    pub is_domi: u8,
}

/// One party's share of the result set, in insertion order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ResultShare<W> {
    pub party: Party,
    pub m: usize,
    pub entries: Vec<ResultEntry<W>>,
}

impl<W: RingWord> ResultShare<W> {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(10 + self.entries.len() * (self.m * W::BYTES + 1));
        out.push(self.party.id());
        out.push(W::BITS as u8);
        out.extend_from_slice(&(self.m as u32).to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            for &x in &e.tuple {
                x.write_le(&mut out);
            }
            out.push(e.is_domi);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "result share");
        let party = Party::from_id(r.u8()?)?;
        let l = r.u8()?;
        if u32::from(l) != W::BITS {
            return Err(Error::Protocol(format!("result share for l={l}, expected {}", W::BITS)));
        }
        let m = r.u32()? as usize;
        let count = r.u32()? as usize;
        let mut entries = Vec::new();
        for _ in 0..count {
            let tuple = r.words(m)?;
            entries.push(ResultEntry { tuple, is_domi: r.bit()? });
        }
        r.finish()?;
        Ok(ResultShare { party, m, entries })
    }
}

fn check_query<W: RingWord>(db_m: usize, q: &QueryShare<W>) -> Result<()> {
    if q.region.len() != db_m || q.prefs.len() != db_m {
        return Err(Error::DimensionMismatch(format!(
            "query covers {} dimensions, table has {db_m}",
            q.region.len()
        )));
    }
    Ok(())
}

/// Keeps the rows of the (shuffled) table that fall inside the query
/// region. The per-row membership bits are opened; the kept rows stay in
/// shuffled order.
pub fn obli_gen<T: Transport, W: RingWord>(
    session: &mut Session<T, W>,
    db: &SharedDatabase<W>,
    region: &[(W, W)],
) -> Result<SharedDatabase<W>> {
    let m = db.m();
    if region.len() != m {
        return Err(Error::DimensionMismatch(format!("region covers {} dimensions, table has {m}", region.len())));
    }
    let mut kept = Vec::new();
    let mut start = 0;
    while start < db.n() {
        let end = (start + GEN_CHUNK_ROWS).min(db.n());
        let cells = (end - start) * m;
        let mut lhs = Vec::with_capacity(2 * cells);
        let mut rhs = Vec::with_capacity(2 * cells);
        for i in start..end {
            for (j, &x) in db.row(i).iter().enumerate() {
                let (lo, hi) = region[j];
                // lo <= x, then x <= hi
                lhs.push(lo);
                rhs.push(x);
                lhs.push(x);
                rhs.push(hi);
            }
        }
        let leq = session.sec_leq(&lhs, &rhs)?;
        let (alpha, beta): (Vec<u8>, Vec<u8>) = leq.chunks_exact(2).map(|c| (c[0], c[1])).unzip();
        let delta = session.and(&alpha, &beta)?;
        let inside = session.and_reduce(&delta, m)?;
        let opened = session.open_bits(MsgType::OpenDeltaHat, &inside)?;
        for (k, &bit) in opened.iter().enumerate() {
            if bit == 1 {
                kept.extend_from_slice(db.row(start + k));
            }
        }
        start = end;
    }
    let rows = kept.len() / m.max(1);
    Ok(SharedDatabase::new(db.party, Matrix::from_vec(rows, m, kept)?))
}

/// Shared dominance flags for a batch of row pairs: bit `p` is 1 iff
/// `a_rows[p]` dominates `b_rows[p]` under the shared preferences.
pub fn obli_dom_batch<T: Transport, W: RingWord>(
    session: &mut Session<T, W>,
    a_rows: &[&[W]],
    b_rows: &[&[W]],
    prefs: &[PrefBits],
) -> Result<Vec<u8>> {
    let m = prefs.len();
    let pairs = a_rows.len();
    if b_rows.len() != pairs || a_rows.iter().chain(b_rows).any(|r| r.len() != m) {
        return Err(Error::DimensionMismatch("dominance operands disagree on shape".into()));
    }
    if pairs == 0 {
        return Ok(Vec::new());
    }
    let cells = pairs * m;
    // per pair: m comparisons a<=b, then m comparisons b<=a
    let mut lhs = Vec::with_capacity(2 * cells);
    let mut rhs = Vec::with_capacity(2 * cells);
    for (a, b) in a_rows.iter().zip(b_rows) {
        lhs.extend_from_slice(a);
        rhs.extend_from_slice(b);
        lhs.extend_from_slice(b);
        rhs.extend_from_slice(a);
    }
    let leq = session.sec_leq(&lhs, &rhs)?;
    let mut alpha = Vec::with_capacity(cells);
    let mut alpha_r = Vec::with_capacity(cells);
    for chunk in leq.chunks_exact(2 * m) {
        alpha.extend_from_slice(&chunk[..m]);
        alpha_r.extend_from_slice(&chunk[m..]);
    }
    let unselected: Vec<u8> = (0..pairs).flat_map(|_| prefs.iter().map(|p| p[0])).collect();
    let maximise: Vec<u8> = (0..pairs).flat_map(|_| prefs.iter().map(|p| p[1])).collect();
    let not_max = session.not(&maximise);
    let not_unselected = session.not(&unselected);

    // beta = !p2 & alpha, beta' = p2 & alpha', eq = alpha & alpha'
    let x = [not_max.as_slice(), &maximise, &alpha].concat();
    let y = [alpha.as_slice(), &alpha_r, &alpha_r].concat();
    let prod = session.and(&x, &y)?;
    let (beta, rest) = prod.split_at(cells);
    let (beta_r, both) = rest.split_at(cells);
    let phi = session.xor(beta, beta_r);

    // sigma = phi | p1 = !(!phi & !p1), omega = !eq & !p1
    let x = [session.not(&phi), session.not(both)].concat();
    let y = [not_unselected.as_slice(), &not_unselected].concat();
    let prod = session.and(&x, &y)?;
    let sigma = session.not(&prod[..cells]);
    let omega = &prod[cells..];

    // AND over sigma; OR over omega as NOT(AND over NOT omega)
    let not_omega = session.not(omega);
    let mut groups = Vec::with_capacity(2 * cells);
    for p in 0..pairs {
        groups.extend_from_slice(&sigma[p * m..(p + 1) * m]);
        groups.extend_from_slice(&not_omega[p * m..(p + 1) * m]);
    }
    let reduced = session.and_reduce(&groups, m)?;
    let sigma_hat: Vec<u8> = reduced.iter().step_by(2).copied().collect();
    let not_omega_hat: Vec<u8> = reduced.iter().skip(1).step_by(2).copied().collect();
    let omega_hat = session.not(&not_omega_hat);
    session.and(&sigma_hat, &omega_hat)
}

/// Shared flag: 1 iff `a` dominates `b`.
pub fn obli_dom<T: Transport, W: RingWord>(
    session: &mut Session<T, W>,
    a: &[W],
    b: &[W],
    prefs: &[PrefBits],
) -> Result<u8> {
    Ok(obli_dom_batch(session, &[a], &[b], prefs)?[0])
}

/// Opens `phi & r` for fresh shared random bits `r`.
pub fn mask_bits<T: Transport, W: RingWord>(session: &mut Session<T, W>, phi: &[u8]) -> Result<Vec<u8>> {
    let r = session.random_bits(phi.len())?;
    mask_bits_with(session, phi, &r)
}

/// [`mask_bits`] with caller-supplied shares of `r`.
pub fn mask_bits_with<T: Transport, W: RingWord>(
    session: &mut Session<T, W>,
    phi: &[u8],
    r: &[u8],
) -> Result<Vec<u8>> {
    let masked = session.and(phi, r)?;
    session.open_bits(MsgType::OpenPhi1Masked, &masked)
}

/// What one server observed during the fetch phase, plus its shares of the
/// unmasked dominance flags (kept for testing; never sent anywhere).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FetchTrace {
    pub phi1_shares: Vec<u8>,
    pub phi1_opened: Vec<u8>,
    pub phi2_opened: Vec<u8>,
    pub discards: usize,
    pub removals: usize,
}

/// Block-nested-loop skyline over the candidate rows with masked discards.
///
/// For each new row, every current window entry is checked: if the entry
/// dominates the row (as revealed through a random mask) the row is
/// discarded; otherwise, if the row dominates the entry, the entry is
/// removed. A surviving row is appended with `is_domi` set to the OR of all
/// dominance flags seen during its scan, so rows that escaped a discard only
/// because of the mask are marked for the client to drop.
///
/// The same bits are opened, in the same order, under either
/// [`FetchSchedule`].
pub fn obli_fetch<T: Transport, W: RingWord>(
    session: &mut Session<T, W>,
    candidates: &SharedDatabase<W>,
    prefs: &[PrefBits],
    schedule: FetchSchedule,
) -> Result<(ResultShare<W>, FetchTrace)> {
    match schedule {
        FetchSchedule::Sequential => fetch_sequential(session, candidates, prefs),
        FetchSchedule::Batched => fetch_batched(session, candidates, prefs),
    }
}

/// How the fetch phase schedules its dominance checks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FetchSchedule {
    /// One window entry at a time: each dominance check is evaluated only
    /// when the scan reaches it.
    #[default]
    Sequential,
    /// Both dominance directions between the new row and every window entry
    /// are evaluated in one batch, then opened entry by entry. Costs more
    /// correlations but far fewer rounds.
    Batched,
}

fn fetch_batched<T: Transport, W: RingWord>(
    session: &mut Session<T, W>,
    candidates: &SharedDatabase<W>,
    prefs: &[PrefBits],
) -> Result<(ResultShare<W>, FetchTrace)> {
    let m = candidates.m();
    if prefs.len() != m {
        return Err(Error::DimensionMismatch(format!("{} preferences for {m} dimensions", prefs.len())));
    }
    let party = session.party();
    let mut trace = FetchTrace::default();
    let mut window: Vec<ResultEntry<W>> = Vec::new();
    if candidates.n() == 0 {
        return Ok((ResultShare { party, m, entries: window }, trace));
    }
    window.push(ResultEntry { tuple: candidates.row(0).to_vec(), is_domi: 0 });

    for i in 1..candidates.n() {
        let row = candidates.row(i);
        let w = window.len();
        // pairs 0..w: entry dominates row; pairs w..2w: row dominates entry
        let mut a: Vec<&[W]> = window.iter().map(|e| e.tuple.as_slice()).collect();
        let mut b: Vec<&[W]> = vec![row; w];
        a.extend(std::iter::repeat_n(row, w));
        b.extend(window.iter().map(|e| e.tuple.as_slice()));
        let dom = obli_dom_batch(session, &a, &b, prefs)?;
        let (phi1, phi2) = dom.split_at(w);
        let r = session.random_bits(w)?;
        let masked = session.and(phi1, &r)?;

        let mut keep = true;
        let mut removed = vec![false; w];
        for k in 0..w {
            trace.phi1_shares.push(phi1[k]);
            let opened = session.open_bits(MsgType::OpenPhi1Masked, &masked[k..=k])?[0];
            trace.phi1_opened.push(opened);
            if opened == 1 {
                keep = false;
                trace.discards += 1;
                break;
            }
            let opened = session.open_bits(MsgType::OpenPhi2, &phi2[k..=k])?[0];
            trace.phi2_opened.push(opened);
            if opened == 1 {
                removed[k] = true;
                trace.removals += 1;
            }
        }
        let is_domi = if keep {
            // OR over every flag seen during the scan, which is all of them
            let not_phi1 = session.not(phi1);
            let none = session.and_reduce(&not_phi1, w)?;
            Some(session.not(&none)[0])
        } else {
            None
        };
        let mut removed = removed.into_iter();
        window.retain(|_| !removed.next().unwrap_or(false));
        if let Some(is_domi) = is_domi {
            window.push(ResultEntry { tuple: row.to_vec(), is_domi });
        }
    }
    Ok((ResultShare { party, m, entries: window }, trace))
}

fn fetch_sequential<T: Transport, W: RingWord>(
    session: &mut Session<T, W>,
    candidates: &SharedDatabase<W>,
    prefs: &[PrefBits],
) -> Result<(ResultShare<W>, FetchTrace)> {
    let m = candidates.m();
    if prefs.len() != m {
        return Err(Error::DimensionMismatch(format!("{} preferences for {m} dimensions", prefs.len())));
    }
    let party = session.party();
    let mut trace = FetchTrace::default();
    let mut window: Vec<ResultEntry<W>> = Vec::new();
    if candidates.n() == 0 {
        return Ok((ResultShare { party, m, entries: window }, trace));
    }
    window.push(ResultEntry { tuple: candidates.row(0).to_vec(), is_domi: 0 });

    for i in 1..candidates.n() {
        let row = candidates.row(i);
        let mut keep = true;
        let mut phi_hat = 0u8;
        let mut k = 0;
        while k < window.len() {
            let phi1 = obli_dom(session, &window[k].tuple, row, prefs)?;
            trace.phi1_shares.push(phi1);
            let r = session.random_bits(1)?[0];
            // phi_hat | phi1 and phi1 & r share one round
            let x = [session.not(&[phi_hat])[0], phi1];
            let y = [session.not(&[phi1])[0], r];
            let prod = session.and(&x, &y)?;
            phi_hat = session.not(&prod[..1])[0];
            let phi1_masked = session.open_bits(MsgType::OpenPhi1Masked, &prod[1..])?[0];
            trace.phi1_opened.push(phi1_masked);
            if phi1_masked == 1 {
                keep = false;
                trace.discards += 1;
                break;
            }
            let phi2 = obli_dom(session, row, &window[k].tuple, prefs)?;
            let phi2 = session.open_bits(MsgType::OpenPhi2, &[phi2])?[0];
            trace.phi2_opened.push(phi2);
            if phi2 == 1 {
                window.remove(k);
                trace.removals += 1;
            } else {
                k += 1;
            }
        }
        if keep {
            window.push(ResultEntry { tuple: row.to_vec(), is_domi: phi_hat });
        }
    }
    Ok((ResultShare { party, m, entries: window }, trace))
}

#[derive(Clone, Debug)]
pub struct QueryOutcome<W> {
    pub result: ResultShare<W>,
    /// Size of the candidate sub-database.
    pub candidates: usize,
    pub trace: FetchTrace,
    pub stats: SessionStats,
    pub consumed: Consumption,
}

/// Full server-side pipeline for one query: correlation check, shuffle,
/// region filter, skyline fetch.
pub fn execute_query<T: Transport, W: RingWord>(
    session: &mut Session<T, W>,
    db: &SharedDatabase<W>,
    query: &QueryShare<W>,
) -> Result<QueryOutcome<W>> {
    execute_query_with(session, db, query, FetchSchedule::default())
}

pub fn execute_query_with<T: Transport, W: RingWord>(
    session: &mut Session<T, W>,
    db: &SharedDatabase<W>,
    query: &QueryShare<W>,
    schedule: FetchSchedule,
) -> Result<QueryOutcome<W>> {
    check_query(db.m(), query)?;
    if query.party != session.party() {
        return Err(Error::PartyMismatch("query share belongs to the other party".into()));
    }
    session.corr_sync()?;
    let shuffled = obli_shuff(session, db)?;
    let candidates = obli_gen(session, &shuffled, &query.region)?;
    let (result, trace) = obli_fetch(session, &candidates, &query.prefs, schedule)?;
    Ok(QueryOutcome {
        result,
        candidates: candidates.n(),
        trace,
        stats: session.stats(),
        consumed: session.consumed(),
    })
}
