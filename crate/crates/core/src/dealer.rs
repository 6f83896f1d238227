//! Offline correlated randomness, produced by the data owner acting as a
//! trusted dealer, and the per-party correlation file format.
//!
//! File layout (all integers little-endian):
//!
//! ```text
//! "OBSK" | version: u8 = 1 | party: u8 | l: u8 | n: u32 | m: u32
//! | beaver: u64 | and: u64 | bits: u64 | shuffle: u64
//! | beaver section: (u, v, w) as l/8-byte words
//! | and section:    (u, v, w) as one byte per bit
//! | bits section:   one byte per bit
//! | shuffle section: party 1 -> A1, B (n*m words), pi1 (n u32)
//! |                  party 2 -> A2 (n*m words), pi2 (n u32), Delta (n*m words)
//! ```

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;

use crate::engine::cost;
use crate::error::{Error, Result};
use crate::matrix::{Matrix, Permutation};
use crate::ring::{BitShare, Party, RingWord};

pub const CORRELATION_MAGIC: &[u8; 4] = b"OBSK";
pub const CORRELATION_VERSION: u8 = 1;
const HEADER_LEN: usize = 4 + 1 + 1 + 1 + 4 + 4 + 4 * 8;

/// One party's share of a Beaver triple `(u, v, w = u*v)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BeaverShare<W> {
    pub u: W,
    pub v: W,
    pub w: W,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BeaverTriple<W> {
    pub shares: [BeaverShare<W>; 2],
}

impl<W: RingWord> BeaverTriple<W> {
    /// Returns the reconstructed `(u, v, w)`.
    pub fn reconstruct(&self) -> (W, W, W) {
        let [a, b] = self.shares;
        (a.u.add(b.u), a.v.add(b.v), a.w.add(b.w))
    }
}

/// One party's share of a binary AND triple `(u, v, w = u & v)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AndShare {
    pub u: u8,
    pub v: u8,
    pub w: u8,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AndTriple {
    pub shares: [AndShare; 2],
}

impl AndTriple {
    pub fn reconstruct(&self) -> (u8, u8, u8) {
        let [a, b] = self.shares;
        (a.u ^ b.u, a.v ^ b.v, a.w ^ b.w)
    }
}

pub fn beaver_from<W: RingWord, R: Rng + ?Sized>(u: W, v: W, rng: &mut R) -> BeaverTriple<W> {
    let (u1, v1, w1) = (W::random(rng), W::random(rng), W::random(rng));
    let w = u.mul(v);
    BeaverTriple {
        shares: [
            BeaverShare { u: u1, v: v1, w: w1 },
            BeaverShare { u: u.sub(u1), v: v.sub(v1), w: w.sub(w1) },
        ],
    }
}

pub fn gen_beaver<W: RingWord, R: Rng + ?Sized>(count: usize, rng: &mut R) -> Vec<BeaverTriple<W>> {
    (0..count)
        .map(|_| {
            let (u, v) = (W::random(rng), W::random(rng));
            beaver_from(u, v, rng)
        })
        .collect()
}

pub fn and_triple_from<R: Rng + ?Sized>(u: u8, v: u8, rng: &mut R) -> AndTriple {
    let (u1, v1, w1): (u8, u8, u8) = (rng.gen_range(0..=1), rng.gen_range(0..=1), rng.gen_range(0..=1));
    let w = u & v & 1;
    AndTriple {
        shares: [
            AndShare { u: u1, v: v1, w: w1 },
            AndShare { u: (u & 1) ^ u1, v: (v & 1) ^ v1, w: w ^ w1 },
        ],
    }
}

pub fn gen_and_triples<R: Rng + ?Sized>(count: usize, rng: &mut R) -> Vec<AndTriple> {
    (0..count)
        .map(|_| {
            let (u, v) = (rng.gen_range(0..=1), rng.gen_range(0..=1));
            and_triple_from(u, v, rng)
        })
        .collect()
}

/// Shared uniform random bits, each share drawn independently.
pub fn gen_shared_bits<R: Rng + ?Sized>(count: usize, rng: &mut R) -> Vec<(BitShare, BitShare)> {
    (0..count)
        .map(|_| {
            (
                BitShare { party: Party::P1, bit: rng.gen_range(0..=1) },
                BitShare { party: Party::P2, bit: rng.gen_range(0..=1) },
            )
        })
        .collect()
}

/// Full (dealer-side) view of one shuffle correlation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShuffleCorrelation<W> {
    pub a1: Matrix<W>,
    pub a2: Matrix<W>,
    pub b: Matrix<W>,
    pub pi1: Permutation,
    pub pi2: Permutation,
    pub delta: Matrix<W>,
}

/// What one server holds of a shuffle correlation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ShuffleShare<W> {
    First { a1: Matrix<W>, b: Matrix<W>, pi1: Permutation },
    Second { a2: Matrix<W>, pi2: Permutation, delta: Matrix<W> },
}

impl<W: RingWord> ShuffleShare<W> {
    pub fn party(&self) -> Party {
        match self {
            ShuffleShare::First { .. } => Party::P1,
            ShuffleShare::Second { .. } => Party::P2,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        let m = match self {
            ShuffleShare::First { a1, .. } => a1,
            ShuffleShare::Second { a2, .. } => a2,
        };
        (m.rows(), m.cols())
    }
}

impl<W: RingWord> ShuffleCorrelation<W> {
    /// Builds a correlation for fixed permutations, with fresh random masks.
    pub fn with_permutations<R: Rng + ?Sized>(
        m: usize,
        pi1: Permutation,
        pi2: Permutation,
        rng: &mut R,
    ) -> Result<Self> {
        let n = pi1.len();
        if pi2.len() != n {
            return Err(Error::DimensionMismatch("permutation lengths differ".into()));
        }
        let a1 = Matrix::random(n, m, rng);
        let a2 = Matrix::random(n, m, rng);
        let b = Matrix::random(n, m, rng);
        // Delta = pi2(pi1(A2) + A1) - B
        let delta = a2.permute_rows(&pi1)?.add(&a1)?.permute_rows(&pi2)?.sub(&b)?;
        Ok(ShuffleCorrelation { a1, a2, b, pi1, pi2, delta })
    }

    pub fn n(&self) -> usize {
        self.pi1.len()
    }

    pub fn m(&self) -> usize {
        self.a1.cols()
    }

    /// Recomputes the defining identity.
    pub fn verify(&self) -> bool {
        let recomputed = self
            .a2
            .permute_rows(&self.pi1)
            .and_then(|x| x.add(&self.a1))
            .and_then(|x| x.permute_rows(&self.pi2))
            .and_then(|x| x.sub(&self.b));
        matches!(recomputed, Ok(d) if d == self.delta)
    }

    pub fn split(self) -> (ShuffleShare<W>, ShuffleShare<W>) {
        (
            ShuffleShare::First { a1: self.a1, b: self.b, pi1: self.pi1 },
            ShuffleShare::Second { a2: self.a2, pi2: self.pi2, delta: self.delta },
        )
    }
}

pub fn gen_shuffle_correlation<W: RingWord, R: Rng + ?Sized>(
    n: usize,
    m: usize,
    rng: &mut R,
) -> Result<ShuffleCorrelation<W>> {
    if n == 0 || m == 0 {
        return Err(Error::DimensionMismatch(format!("shuffle correlation for {n}x{m}")));
    }
    let pi1 = Permutation::random(n, rng);
    let pi2 = Permutation::random(n, rng);
    ShuffleCorrelation::with_permutations(m, pi1, pi2, rng)
}

/// Bit vector packed into 64-bit words; used for the bulk binary
/// correlations, which dominate memory.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PackedBits {
    words: Vec<u64>,
    len: usize,
}

impl PackedBits {
    pub fn from_words(mut words: Vec<u64>, len: usize) -> Self {
        words.truncate(len.div_ceil(64));
        words.resize(len.div_ceil(64), 0);
        if !len.is_multiple_of(64) {
            if let Some(last) = words.last_mut() {
                *last &= (1u64 << (len % 64)) - 1;
            }
        }
        PackedBits { words, len }
    }

    pub fn from_bits(bits: &[u8]) -> Self {
        let mut words = vec![0u64; bits.len().div_ceil(64)];
        for (i, &b) in bits.iter().enumerate() {
            words[i / 64] |= u64::from(b & 1) << (i % 64);
        }
        PackedBits { words, len: bits.len() }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn get(&self, i: usize) -> u8 {
        ((self.words[i / 64] >> (i % 64)) & 1) as u8
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn slice_bits(&self, start: usize, count: usize) -> Vec<u8> {
        (start..start + count).map(|i| self.get(i)).collect()
    }
}

/// Per-query correlation requirements for a database of `n` rows and `m`
/// dimensions, given a cap on the candidate sub-database size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CorrelationBudget {
    pub n: usize,
    pub m: usize,
    pub beaver: usize,
    pub and_triples: usize,
    pub bits: usize,
    pub shuffles: usize,
}

impl CorrelationBudget {
    /// Over-provisioning factor applied to the data-dependent counts.
    pub const SLACK: usize = 2;

    /// Pessimistic budget for one query. `max_candidates` bounds `|C|`;
    /// the fetch phase is charged `2|C|^2` dominance checks.
    pub fn for_query(l: u32, n: usize, m: usize, max_candidates: usize) -> Self {
        let c = max_candidates.min(n);
        let gen = n * cost::obli_gen_row_ands(l, m);
        let fetch = 2 * c * c * cost::obli_dom_ands(l, m) + 2 * c * c * cost::FETCH_PAIR_ANDS;
        CorrelationBudget {
            n,
            m,
            beaver: 0,
            and_triples: Self::SLACK * (gen + fetch),
            bits: Self::SLACK * c * c,
            shuffles: 1,
        }
    }

    pub fn with_beaver(mut self, count: usize) -> Self {
        self.beaver = count;
        self
    }
}

/// How many correlations of each kind one party has used.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Consumption {
    pub beaver: usize,
    pub and_triples: usize,
    pub bits: usize,
    pub shuffles: usize,
}

/// One server's correlations plus its consumption cursors.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartyCorrelations<W> {
    party: Party,
    n: usize,
    m: usize,
    beaver: Vec<BeaverShare<W>>,
    and_u: PackedBits,
    and_v: PackedBits,
    and_w: PackedBits,
    bits: PackedBits,
    shuffle: Option<ShuffleShare<W>>,
    shuffle_count: usize,
    used: Consumption,
}

impl<W: RingWord> PartyCorrelations<W> {
    pub fn party(&self) -> Party {
        self.party
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n, self.m)
    }

    /// Total provisioned counts, independent of consumption.
    pub fn provisioned(&self) -> Consumption {
        Consumption {
            beaver: self.beaver.len(),
            and_triples: self.and_u.len(),
            bits: self.bits.len(),
            shuffles: self.shuffle_count,
        }
    }

    pub fn consumed(&self) -> Consumption {
        self.used
    }

    fn check(kind: &'static str, requested: usize, used: usize, total: usize) -> Result<()> {
        if used + requested > total {
            return Err(Error::BudgetExhausted { kind, requested, available: total - used });
        }
        Ok(())
    }

    pub fn take_beaver(&mut self, count: usize) -> Result<Vec<BeaverShare<W>>> {
        Self::check("beaver triples", count, self.used.beaver, self.beaver.len())?;
        let start = self.used.beaver;
        self.used.beaver += count;
        Ok(self.beaver[start..start + count].to_vec())
    }

    /// Returns `(u, v, w)` bit-share vectors for `count` AND triples.
    pub fn take_and(&mut self, count: usize) -> Result<(Vec<u8>, Vec<u8>, Vec<u8>)> {
        Self::check("AND triples", count, self.used.and_triples, self.and_u.len())?;
        let start = self.used.and_triples;
        self.used.and_triples += count;
        Ok((
            self.and_u.slice_bits(start, count),
            self.and_v.slice_bits(start, count),
            self.and_w.slice_bits(start, count),
        ))
    }

    pub fn take_bits(&mut self, count: usize) -> Result<Vec<u8>> {
        Self::check("shared random bits", count, self.used.bits, self.bits.len())?;
        let start = self.used.bits;
        self.used.bits += count;
        Ok(self.bits.slice_bits(start, count))
    }

    pub fn take_shuffle(&mut self) -> Result<ShuffleShare<W>> {
        match self.shuffle.take() {
            Some(s) => {
                self.used.shuffles += 1;
                Ok(s)
            }
            None if self.used.shuffles > 0 => Err(Error::CorrelationReused),
            None => Err(Error::BudgetExhausted { kind: "shuffle correlations", requested: 1, available: 0 }),
        }
    }

    /// Assembles a party view from explicit pieces (tests and tools).
    pub fn from_parts(
        party: Party,
        n: usize,
        m: usize,
        beaver: Vec<BeaverShare<W>>,
        and: &[AndShare],
        bits: &[u8],
        shuffle: Option<ShuffleShare<W>>,
    ) -> Result<Self> {
        if let Some(s) = &shuffle {
            if s.party() != party {
                return Err(Error::PartyMismatch("shuffle share belongs to the other party".into()));
            }
            if s.shape() != (n, m) {
                return Err(Error::DimensionMismatch(format!(
                    "shuffle share is {:?}, header says {n}x{m}",
                    s.shape()
                )));
            }
        }
        let col = |f: fn(&AndShare) -> u8| PackedBits::from_bits(&and.iter().map(f).collect::<Vec<_>>());
        Ok(PartyCorrelations {
            party,
            n,
            m,
            beaver,
            and_u: col(|t| t.u),
            and_v: col(|t| t.v),
            and_w: col(|t| t.w),
            bits: PackedBits::from_bits(bits),
            shuffle_count: usize::from(shuffle.is_some()),
            shuffle,
            used: Consumption::default(),
        })
    }
}

/// Both parties' correlations for one query.
#[derive(Clone, Debug)]
pub struct CorrelationSet<W> {
    pub first: PartyCorrelations<W>,
    pub second: PartyCorrelations<W>,
}

impl<W: RingWord> CorrelationSet<W> {
    pub fn into_parties(self) -> (PartyCorrelations<W>, PartyCorrelations<W>) {
        (self.first, self.second)
    }

    /// Checks every correlation's defining identity.
    pub fn self_test(&self) -> Result<()> {
        let (a, b) = (&self.first, &self.second);
        if a.beaver.len() != b.beaver.len() || a.and_u.len() != b.and_u.len() || a.bits.len() != b.bits.len() {
            return Err(Error::CorruptFile("party correlation counts differ".into()));
        }
        for (i, (x, y)) in a.beaver.iter().zip(&b.beaver).enumerate() {
            let t = BeaverTriple { shares: [*x, *y] };
            let (u, v, w) = t.reconstruct();
            if u.mul(v) != w {
                return Err(Error::CorruptFile(format!("beaver triple {i} fails w = u*v")));
            }
        }
        let words = a.and_u.words().len();
        for i in 0..words {
            let u = a.and_u.words()[i] ^ b.and_u.words()[i];
            let v = a.and_v.words()[i] ^ b.and_v.words()[i];
            let w = a.and_w.words()[i] ^ b.and_w.words()[i];
            if u & v != w {
                return Err(Error::CorruptFile(format!("AND triple word {i} fails w = u & v")));
            }
        }
        match (&a.shuffle, &b.shuffle) {
            (None, None) => {}
            (
                Some(ShuffleShare::First { a1, b: bm, pi1 }),
                Some(ShuffleShare::Second { a2, pi2, delta }),
            ) => {
                let full = ShuffleCorrelation {
                    a1: a1.clone(),
                    a2: a2.clone(),
                    b: bm.clone(),
                    pi1: pi1.clone(),
                    pi2: pi2.clone(),
                    delta: delta.clone(),
                };
                if !full.verify() {
                    return Err(Error::CorruptFile("shuffle correlation fails its Delta identity".into()));
                }
            }
            _ => return Err(Error::CorruptFile("shuffle shares are mismatched".into())),
        }
        Ok(())
    }
}

/// Generates all correlations in `budget`, self-tests them, and splits them
/// into the two party views.
pub fn deal<W: RingWord, R: Rng + ?Sized>(budget: &CorrelationBudget, rng: &mut R) -> Result<CorrelationSet<W>> {
    let beaver = gen_beaver::<W, R>(budget.beaver, rng);
    let (b1, b2): (Vec<_>, Vec<_>) = beaver.iter().map(|t| (t.shares[0], t.shares[1])).unzip();

    let count = budget.and_triples;
    let words = count.div_ceil(64);
    let mut cols: [Vec<u64>; 6] = Default::default();
    for c in cols.iter_mut() {
        c.reserve(words);
    }
    for _ in 0..words {
        let (u1, v1, w1, u2, v2): (u64, u64, u64, u64, u64) = (rng.gen(), rng.gen(), rng.gen(), rng.gen(), rng.gen());
        let w2 = ((u1 ^ u2) & (v1 ^ v2)) ^ w1;
        for (c, x) in cols.iter_mut().zip([u1, v1, w1, u2, v2, w2]) {
            c.push(x);
        }
    }
    let [u1, v1, w1, u2, v2, w2] = cols.map(|c| PackedBits::from_words(c, count));

    let bit_words = budget.bits.div_ceil(64);
    let bits1 = PackedBits::from_words((0..bit_words).map(|_| rng.gen()).collect(), budget.bits);
    let bits2 = PackedBits::from_words((0..bit_words).map(|_| rng.gen()).collect(), budget.bits);

    let (s1, s2) = if budget.shuffles > 0 {
        let (x, y) = gen_shuffle_correlation::<W, R>(budget.n, budget.m, rng)?.split();
        (Some(x), Some(y))
    } else {
        (None, None)
    };
    let shuffles = usize::from(s1.is_some());

    let set = CorrelationSet {
        first: PartyCorrelations {
            party: Party::P1,
            n: budget.n,
            m: budget.m,
            beaver: b1,
            and_u: u1,
            and_v: v1,
            and_w: w1,
            bits: bits1,
            shuffle: s1,
            shuffle_count: shuffles,
            used: Consumption::default(),
        },
        second: PartyCorrelations {
            party: Party::P2,
            n: budget.n,
            m: budget.m,
            beaver: b2,
            and_u: u2,
            and_v: v2,
            and_w: w2,
            bits: bits2,
            shuffle: s2,
            shuffle_count: shuffles,
            used: Consumption::default(),
        },
    };
    set.self_test()?;
    Ok(set)
}

/// Header fields of a correlation file.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CorrelationHeader {
    pub version: u8,
    pub party: Party,
    pub l: u8,
    pub n: u32,
    pub m: u32,
    pub beaver: u64,
    pub and_triples: u64,
    pub bits: u64,
    pub shuffles: u64,
}

fn write_matrix<W: RingWord>(out: &mut impl Write, m: &Matrix<W>) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(m.data().len() * W::BYTES);
    for &x in m.data() {
        x.write_le(&mut buf);
    }
    out.write_all(&buf)
}

fn write_perm(out: &mut impl Write, p: &Permutation) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(p.len() * 4);
    for &i in p.as_slice() {
        buf.extend_from_slice(&i.to_le_bytes());
    }
    out.write_all(&buf)
}

fn write_packed_bytes(out: &mut impl Write, bits: &PackedBits) -> std::io::Result<()> {
    const CHUNK: usize = 1 << 16;
    let mut i = 0;
    while i < bits.len() {
        let end = (i + CHUNK).min(bits.len());
        out.write_all(&bits.slice_bits(i, end - i))?;
        i = end;
    }
    Ok(())
}

pub fn write_correlations<W: RingWord>(corr: &PartyCorrelations<W>, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_correlations_to(corr, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn write_correlations_to<W: RingWord>(corr: &PartyCorrelations<W>, out: &mut impl Write) -> Result<()> {
    let p = corr.provisioned();
    out.write_all(CORRELATION_MAGIC)?;
    out.write_all(&[CORRELATION_VERSION, corr.party.id(), W::BITS as u8])?;
    out.write_all(&(corr.n as u32).to_le_bytes())?;
    out.write_all(&(corr.m as u32).to_le_bytes())?;
    for c in [p.beaver, p.and_triples, p.bits, usize::from(corr.shuffle.is_some())] {
        out.write_all(&(c as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(corr.beaver.len() * 3 * W::BYTES);
    for t in &corr.beaver {
        t.u.write_le(&mut buf);
        t.v.write_le(&mut buf);
        t.w.write_le(&mut buf);
    }
    out.write_all(&buf)?;
    // interleaved (u, v, w) per triple
    const CHUNK: usize = 1 << 16;
    let mut i = 0;
    while i < corr.and_u.len() {
        let end = (i + CHUNK).min(corr.and_u.len());
        let mut buf = Vec::with_capacity((end - i) * 3);
        for j in i..end {
            buf.extend_from_slice(&[corr.and_u.get(j), corr.and_v.get(j), corr.and_w.get(j)]);
        }
        out.write_all(&buf)?;
        i = end;
    }
    write_packed_bytes(out, &corr.bits)?;
    match &corr.shuffle {
        None => {}
        Some(ShuffleShare::First { a1, b, pi1 }) => {
            write_matrix(out, a1)?;
            write_matrix(out, b)?;
            write_perm(out, pi1)?;
        }
        Some(ShuffleShare::Second { a2, pi2, delta }) => {
            write_matrix(out, a2)?;
            write_perm(out, pi2)?;
            write_matrix(out, delta)?;
        }
    }
    Ok(())
}

/// Cursor over an in-memory file image that reports truncation as a corrupt
/// file.
pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8], what: &'static str) -> Self {
        ByteReader { buf, pos: 0, what }
    }

    pub(crate) fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < len {
            return Err(Error::CorruptFile(format!(
                "{} truncated at byte {} (needed {len} more)",
                self.what, self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn word<W: RingWord>(&mut self) -> Result<W> {
        Ok(W::read_le(self.take(W::BYTES)?))
    }

    pub(crate) fn words<W: RingWord>(&mut self, count: usize) -> Result<Vec<W>> {
        let bytes = self.take(count.checked_mul(W::BYTES).ok_or_else(|| self.overflow())?)?;
        Ok(bytes.chunks_exact(W::BYTES).map(W::read_le).collect())
    }

    pub(crate) fn bit(&mut self) -> Result<u8> {
        match self.u8()? {
            b @ (0 | 1) => Ok(b),
            b => Err(Error::CorruptFile(format!("{}: bit byte {b} at {}", self.what, self.pos - 1))),
        }
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::CorruptFile(format!(
                "{}: {} trailing bytes",
                self.what,
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }

    fn overflow(&self) -> Error {
        Error::CorruptFile(format!("{}: size overflow", self.what))
    }
}

fn parse_header(r: &mut ByteReader<'_>) -> Result<CorrelationHeader> {
    if r.take(4)? != CORRELATION_MAGIC {
        return Err(Error::CorruptFile("bad correlation file magic".into()));
    }
    let version = r.u8()?;
    if version != CORRELATION_VERSION {
        return Err(Error::CorruptFile(format!("unsupported correlation file version {version}")));
    }
    let party = Party::from_id(r.u8()?).map_err(|e| Error::CorruptFile(e.to_string()))?;
    Ok(CorrelationHeader {
        version,
        party,
        l: r.u8()?,
        n: r.u32()?,
        m: r.u32()?,
        beaver: r.u64()?,
        and_triples: r.u64()?,
        bits: r.u64()?,
        shuffles: r.u64()?,
    })
}

pub fn read_correlation_header(path: &Path) -> Result<CorrelationHeader> {
    let mut buf = [0u8; HEADER_LEN];
    let mut f = File::open(path)?;
    let mut got = 0;
    while got < HEADER_LEN {
        match f.read(&mut buf[got..])? {
            0 => break,
            k => got += k,
        }
    }
    parse_header(&mut ByteReader::new(&buf[..got], "correlation header"))
}

/// Reads a correlation file. With `expected` set, a file written for the
/// other party is rejected.
pub fn read_correlations<W: RingWord>(path: &Path, expected: Option<Party>) -> Result<PartyCorrelations<W>> {
    let bytes = std::fs::read(path)?;
    parse_correlations(&bytes, expected)
}

pub fn parse_correlations<W: RingWord>(bytes: &[u8], expected: Option<Party>) -> Result<PartyCorrelations<W>> {
    let mut r = ByteReader::new(bytes, "correlation file");
    let h = parse_header(&mut r)?;
    if u32::from(h.l) != W::BITS {
        return Err(Error::CorruptFile(format!("file ring width {} but reader uses {}", h.l, W::BITS)));
    }
    if let Some(p) = expected {
        if p != h.party {
            return Err(Error::PartyMismatch(format!(
                "correlation file is for party {}, reader is party {}",
                h.party.id(),
                p.id()
            )));
        }
    }
    if h.shuffles > 1 {
        return Err(Error::CorruptFile(format!("{} shuffle correlations in one file", h.shuffles)));
    }
    let (n, m) = (h.n as usize, h.m as usize);
    let count = |c: u64| usize::try_from(c).map_err(|_| Error::CorruptFile("count overflow".into()));
    let nb = count(h.beaver)?;
    // bound-check counts against the file size before allocating
    let remaining = bytes.len() - HEADER_LEN;
    if nb.saturating_mul(3 * W::BYTES) > remaining || count(h.and_triples)?.saturating_mul(3) > remaining {
        return Err(Error::CorruptFile("correlation file truncated".into()));
    }
    let mut beaver = Vec::with_capacity(nb);
    for _ in 0..nb {
        beaver.push(BeaverShare { u: r.word()?, v: r.word()?, w: r.word()? });
    }
    let na = count(h.and_triples)?;
    let raw = r.take(na * 3)?;
    let (mut u, mut v, mut w) = (vec![0u64; na.div_ceil(64)], vec![0u64; na.div_ceil(64)], vec![0u64; na.div_ceil(64)]);
    for (i, t) in raw.chunks_exact(3).enumerate() {
        if t.iter().any(|&b| b > 1) {
            return Err(Error::CorruptFile(format!("AND triple {i} has a non-bit byte")));
        }
        u[i / 64] |= u64::from(t[0]) << (i % 64);
        v[i / 64] |= u64::from(t[1]) << (i % 64);
        w[i / 64] |= u64::from(t[2]) << (i % 64);
    }
    let nbits = count(h.bits)?;
    let mut bits = Vec::with_capacity(nbits);
    for _ in 0..nbits {
        bits.push(r.bit()?);
    }
    let read_perm = |r: &mut ByteReader<'_>| -> Result<Permutation> {
        let mut v = Vec::with_capacity(n);
        for _ in 0..n {
            v.push(r.u32()?);
        }
        Permutation::from_vec(v)
    };
    let shuffle = if h.shuffles == 1 {
        let nm = n.checked_mul(m).ok_or_else(|| Error::CorruptFile("shape overflow".into()))?;
        Some(match h.party {
            Party::P1 => {
                let a1 = Matrix::from_vec(n, m, r.words(nm)?)?;
                let b = Matrix::from_vec(n, m, r.words(nm)?)?;
                let pi1 = read_perm(&mut r)?;
                ShuffleShare::First { a1, b, pi1 }
            }
            Party::P2 => {
                let a2 = Matrix::from_vec(n, m, r.words(nm)?)?;
                let pi2 = read_perm(&mut r)?;
                let delta = Matrix::from_vec(n, m, r.words(nm)?)?;
                ShuffleShare::Second { a2, pi2, delta }
            }
        })
    } else {
        None
    };
    r.finish()?;
    Ok(PartyCorrelations {
        party: h.party,
        n,
        m,
        beaver,
        and_u: PackedBits::from_words(u, na),
        and_v: PackedBits::from_words(v, na),
        and_w: PackedBits::from_words(w, na),
        bits: PackedBits::from_bits(&bits),
        shuffle_count: usize::from(shuffle.is_some()),
        shuffle,
        used: Consumption::default(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn rng(seed: u64) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(seed)
    }

    #[test]
    fn beaver_identity_holds() {
        let mut r = rng(1);
        for t in gen_beaver::<u64, _>(10_000, &mut r) {
            let (u, v, w) = t.reconstruct();
            assert_eq!(((u as u128 * v as u128) % (1u128 << 64)) as u64, w);
        }
        assert!(gen_beaver::<u64, _>(0, &mut r).is_empty());
        let (u, _, w) = beaver_from(0u64, 12345, &mut r).reconstruct();
        assert_eq!((u, w), (0, 0));
    }

    #[test]
    fn and_triples_follow_truth_table() {
        let mut r = rng(2);
        for t in gen_and_triples(100_000, &mut r) {
            let (u, v, w) = t.reconstruct();
            assert_eq!(w, u & v);
        }
        assert_eq!(and_triple_from(1, 1, &mut r).reconstruct().2, 1);
        assert_eq!(and_triple_from(0, 1, &mut r).reconstruct().2, 0);
        assert_eq!(and_triple_from(0, 0, &mut r).reconstruct().2, 0);
    }

    #[test]
    fn shared_bits_are_balanced() {
        let mut r = rng(3);
        let bits = gen_shared_bits(100_000, &mut r);
        let ones: usize = bits.iter().map(|(a, b)| usize::from(a.bit ^ b.bit)).sum();
        let mean = ones as f64 / 1e5;
        assert!((0.49..=0.51).contains(&mean), "mean {mean}");
        assert!(gen_shared_bits(0, &mut r).is_empty());
    }

    #[test]
    fn shuffle_correlation_single_row() {
        let mut r = rng(4);
        let c = ShuffleCorrelation::<u64>::with_permutations(3, Permutation::identity(1), Permutation::identity(1), &mut r)
            .unwrap();
        let expected = c.a1.add(&c.a2).unwrap().sub(&c.b).unwrap();
        assert_eq!(c.delta, expected);
    }

    #[test]
    fn shuffle_correlation_recomputes() {
        let mut r = rng(5);
        let c = gen_shuffle_correlation::<u64, _>(8, 3, &mut r).unwrap();
        // recompute row by row without the matrix helpers
        for i in 0..8 {
            let mid = c.pi2.as_slice()[i] as usize;
            let src = c.pi1.as_slice()[mid] as usize;
            for j in 0..3 {
                let expect = c.a2.row(src)[j].wrapping_add(c.a1.row(mid)[j]).wrapping_sub(c.b.row(i)[j]);
                assert_eq!(c.delta.row(i)[j], expect);
            }
        }
        assert!(gen_shuffle_correlation::<u64, _>(0, 3, &mut r).is_err());
    }

    #[test]
    fn packed_bits_mask_tail() {
        let p = PackedBits::from_words(vec![u64::MAX], 3);
        assert_eq!(p.words(), &[0b111]);
        assert_eq!(p.slice_bits(0, 3), vec![1, 1, 1]);
        assert_eq!(PackedBits::from_bits(&[1, 0, 1]).words(), &[0b101]);
    }

    #[test]
    fn deal_produces_valid_sets() {
        let budget = CorrelationBudget { n: 5, m: 2, beaver: 10, and_triples: 1000, bits: 70, shuffles: 1 };
        let set = deal::<u64, _>(&budget, &mut rng(6)).unwrap();
        set.self_test().unwrap();
        let (mut a, mut b) = set.into_parties();
        let (u1, v1, w1) = a.take_and(1000).unwrap();
        let (u2, v2, w2) = b.take_and(1000).unwrap();
        for i in 0..1000 {
            assert_eq!((u1[i] ^ u2[i]) & (v1[i] ^ v2[i]), w1[i] ^ w2[i]);
        }
        assert!(matches!(a.take_and(1), Err(Error::BudgetExhausted { .. })));
        a.take_shuffle().unwrap();
        assert!(matches!(a.take_shuffle(), Err(Error::CorrelationReused)));
    }

    #[test]
    fn self_test_detects_corruption() {
        let budget = CorrelationBudget { n: 2, m: 1, beaver: 3, and_triples: 10, bits: 0, shuffles: 1 };
        let mut set = deal::<u64, _>(&budget, &mut rng(7)).unwrap();
        set.first.beaver[1].w = set.first.beaver[1].w.wrapping_add(1);
        assert!(set.self_test().is_err());
    }

    #[test]
    fn file_round_trip_is_identical() {
        let dir = tempfile::tempdir().unwrap();
        let budget = CorrelationBudget { n: 10, m: 5, beaver: 7, and_triples: 333, bits: 65, shuffles: 1 };
        let set = deal::<u64, _>(&budget, &mut rng(8)).unwrap();
        for (i, view) in [&set.first, &set.second].into_iter().enumerate() {
            let path = dir.path().join(format!("p{i}.corr"));
            write_correlations(view, &path).unwrap();
            let back = read_correlations::<u64>(&path, Some(view.party())).unwrap();
            assert_eq!(&back, view);
            let h = read_correlation_header(&path).unwrap();
            assert_eq!((h.l, h.n, h.m), (64, 10, 5));
            assert_eq!((h.beaver, h.and_triples, h.bits, h.shuffles), (7, 333, 65, 1));
        }
    }

    #[test]
    fn truncated_and_mislabelled_files_are_rejected() {
        let budget = CorrelationBudget { n: 3, m: 2, beaver: 1, and_triples: 5, bits: 2, shuffles: 1 };
        let set = deal::<u64, _>(&budget, &mut rng(9)).unwrap();
        let mut bytes = Vec::new();
        write_correlations_to(&set.first, &mut bytes).unwrap();

        for cut in [0, 3, HEADER_LEN - 1, HEADER_LEN + 5, bytes.len() - 1] {
            let err = parse_correlations::<u64>(&bytes[..cut], None).unwrap_err();
            assert!(matches!(err, Error::CorruptFile(_)), "cut {cut}: {err}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(parse_correlations::<u64>(&bad, None), Err(Error::CorruptFile(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(parse_correlations::<u64>(&bad, None), Err(Error::CorruptFile(_))));
        assert!(matches!(
            parse_correlations::<u64>(&bytes, Some(Party::P2)),
            Err(Error::PartyMismatch(_))
        ));
        assert!(matches!(parse_correlations::<u32>(&bytes, None), Err(Error::CorruptFile(_))));
    }

    #[test]
    fn budget_covers_the_formula() {
        let b = CorrelationBudget::for_query(64, 100, 3, 10);
        let gen = 100 * cost::obli_gen_row_ands(64, 3);
        assert!(b.and_triples >= 2 * gen);
        assert_eq!(b.bits, 2 * 100);
        assert_eq!(b.shuffles, 1);
    }
}
