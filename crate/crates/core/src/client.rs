//! Data-owner and user roles: table encryption, query extension and
//! encryption, and result decryption.
//!
//! Table share files:
//!
//! ```text
//! "OBDB" | version u8 = 1 | party u8 | l u8 | n u32 | m u32 | n*m words
//! ```
//!
//! Words are little-endian, row-major. Public metadata is a `key = value`
//! text file (`id`, `n`, `m`, `l`, `lower`, `upper`; bounds are
//! comma-separated).
//!
//! Text queries have one selected dimension per line, numbered from 1:
//!
//! ```text
//! # dim lower upper pref
//! 2 4 9 max
//! ```

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;

use crate::dealer::ByteReader;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::oracle::{Constraint, PlainQuery, Preference};
use crate::protocol::{PrefBits, QueryShare, ResultShare};
use crate::ring::{share_arith, share_bit, Party, RingWord};
use crate::shuffle::SharedDatabase;

const DB_MAGIC: &[u8; 4] = b"OBDB";
const DB_VERSION: u8 = 1;

/// What both servers and the user know about an outsourced table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PublicMetadata {
    pub db_id: String,
    pub n: usize,
    pub m: usize,
    pub l: u32,
    pub lower: Vec<u64>,
    pub upper: Vec<u64>,
}

impl PublicMetadata {
    /// Metadata with the same bounds on every dimension.
    pub fn uniform(db_id: &str, n: usize, m: usize, l: u32, lower: u64, upper: u64) -> Self {
        PublicMetadata { db_id: db_id.to_string(), n, m, l, lower: vec![lower; m], upper: vec![upper; m] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::Config("metadata has zero dimensions".into()));
        }
        if self.lower.len() != self.m || self.upper.len() != self.m {
            return Err(Error::Config(format!(
                "metadata lists {} lower and {} upper bounds for {} dimensions",
                self.lower.len(),
                self.upper.len(),
                self.m
            )));
        }
        if !(4..=64).contains(&self.l) {
            return Err(Error::Config(format!("unsupported ring width {}", self.l)));
        }
        let limit = 1u128 << (self.l - 2);
        for (j, (&lo, &hi)) in self.lower.iter().zip(&self.upper).enumerate() {
            if lo > hi || u128::from(hi) >= limit {
                return Err(Error::Config(format!(
                    "bounds [{lo}, {hi}] on dimension {j} outside [0, 2^{})",
                    self.l - 2
                )));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let join = |v: &[u64]| v.iter().map(u64::to_string).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let _ = writeln!(s, "id = {}", self.db_id);
        let _ = writeln!(s, "n = {}", self.n);
        let _ = writeln!(s, "m = {}", self.m);
        let _ = writeln!(s, "l = {}", self.l);
        let _ = writeln!(s, "lower = {}", join(&self.lower));
        let _ = writeln!(s, "upper = {}", join(&self.upper));
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let (mut id, mut n, mut m, mut l, mut lower, mut upper) = (None, None, None, None, None, None);
        let num = |k: &str, v: &str| v.parse::<u64>().map_err(|_| Error::Config(format!("bad {k} value {v:?}")));
        for line in text.lines().map(str::trim).filter(|s| !s.is_empty() && !s.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("metadata line without '=': {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            let list = || v.split(',').map(|x| num(k, x.trim())).collect::<Result<Vec<_>>>();
            match k {
                "id" => id = Some(v.to_string()),
                "n" => n = Some(num(k, v)? as usize),
                "m" => m = Some(num(k, v)? as usize),
                "l" => l = Some(num(k, v)? as u32),
                "lower" => lower = Some(list()?),
                "upper" => upper = Some(list()?),
                _ => return Err(Error::Config(format!("unknown metadata key {k:?}"))),
            }
        }
        let missing = |k: &str| Error::Config(format!("metadata missing {k}"));
        let meta = PublicMetadata {
            db_id: id.ok_or_else(|| missing("id"))?,
            n: n.ok_or_else(|| missing("n"))?,
            m: m.ok_or_else(|| missing("m"))?,
            l: l.ok_or_else(|| missing("l"))?,
            lower: lower.ok_or_else(|| missing("lower"))?,
            upper: upper.ok_or_else(|| missing("upper"))?,
        };
        meta.validate()?;
        Ok(meta)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}

/// Splits a plaintext table into two share tables. Every value must lie
/// within its dimension's public bounds.
pub fn encrypt_database<W: RingWord, R: Rng + ?Sized>(
    rows: &[Vec<u64>],
    meta: &PublicMetadata,
    rng: &mut R,
) -> Result<(SharedDatabase<W>, SharedDatabase<W>)> {
    meta.validate()?;
    if meta.l != W::BITS {
        return Err(Error::Config(format!("metadata is for l={}, ring has l={}", meta.l, W::BITS)));
    }
    if rows.len() != meta.n {
        return Err(Error::DimensionMismatch(format!("table has {} rows, metadata says {}", rows.len(), meta.n)));
    }
    let mut s1 = Vec::with_capacity(meta.n * meta.m);
    let mut s2 = Vec::with_capacity(meta.n * meta.m);
    for (i, row) in rows.iter().enumerate() {
        if row.len() != meta.m {
            return Err(Error::DimensionMismatch(format!("row {i} has {} values, expected {}", row.len(), meta.m)));
        }
        for (j, &v) in row.iter().enumerate() {
            if v < meta.lower[j] || v > meta.upper[j] {
                return Err(Error::OutOfDomain { row: i, col: j, value: v, lower: meta.lower[j], upper: meta.upper[j] });
            }
            let (a, b) = share_arith(W::from_u64(v), rng);
            s1.push(a.value);
            s2.push(b.value);
        }
    }
    Ok((
        SharedDatabase::new(Party::P1, Matrix::from_vec(meta.n, meta.m, s1)?),
        SharedDatabase::new(Party::P2, Matrix::from_vec(meta.n, meta.m, s2)?),
    ))
}

pub fn encode_db_share<W: RingWord>(db: &SharedDatabase<W>) -> Vec<u8> {
    let mut out = Vec::with_capacity(15 + db.n() * db.m() * W::BYTES);
    out.extend_from_slice(DB_MAGIC);
    out.push(DB_VERSION);
    out.push(db.party.id());
    out.push(W::BITS as u8);
    out.extend_from_slice(&(db.n() as u32).to_le_bytes());
    out.extend_from_slice(&(db.m() as u32).to_le_bytes());
    for &x in db.shares.data() {
        x.write_le(&mut out);
    }
    out
}

pub fn decode_db_share<W: RingWord>(bytes: &[u8], expected: Option<Party>) -> Result<SharedDatabase<W>> {
    let mut r = ByteReader::new(bytes, "table share");
    if r.take(4)? != DB_MAGIC {
        return Err(Error::CorruptFile("not a table share file".into()));
    }
    let version = r.u8()?;
    if version != DB_VERSION {
        return Err(Error::CorruptFile(format!("unsupported table share version {version}")));
    }
    let party = Party::from_id(r.u8()?).map_err(|_| Error::CorruptFile("bad party byte".into()))?;
    if let Some(p) = expected {
        if p != party {
            return Err(Error::PartyMismatch(format!("table share belongs to {party:?}, expected {p:?}")));
        }
    }
    let l = r.u8()?;
    if u32::from(l) != W::BITS {
        return Err(Error::CorruptFile(format!("table share for l={l}, expected {}", W::BITS)));
    }
    let n = r.u32()? as usize;
    let m = r.u32()? as usize;
    let cells = n.checked_mul(m).filter(|c| c.saturating_mul(W::BYTES) <= bytes.len());
    let cells = cells.ok_or_else(|| Error::CorruptFile("table share truncated".into()))?;
    let data = r.words(cells)?;
    r.finish()?;
    Ok(SharedDatabase::new(party, Matrix::from_vec(n, m, data)?))
}

pub fn write_db_share<W: RingWord>(db: &SharedDatabase<W>, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_db_share(db))?;
    f.sync_all()?;
    Ok(())
}

pub fn read_db_share<W: RingWord>(path: &Path, expected: Option<Party>) -> Result<SharedDatabase<W>> {
    decode_db_share(&fs::read(path)?, expected)
}

/// A plaintext table with named dimensions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub names: Vec<String>,
    pub rows: Vec<Vec<u64>>,
}

impl Dataset {
    pub fn m(&self) -> usize {
        self.names.len()
    }

    pub fn from_csv_reader(reader: impl std::io::Read) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let csv_err = |e: csv::Error| Error::CorruptFile(format!("csv: {e}"));
        let names: Vec<String> = rdr.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
        if names.is_empty() {
            return Err(Error::CorruptFile("csv has no columns".into()));
        }
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(csv_err)?;
            let row = rec
                .iter()
                .enumerate()
                .map(|(j, v)| {
                    v.parse::<u64>()
                        .map_err(|_| Error::CorruptFile(format!("row {i}, column {j}: {v:?} is not an unsigned integer")))
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        Ok(Dataset { names, rows })
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        Self::from_csv_reader(fs::File::open(path)?)
    }

    pub fn to_csv_writer(&self, writer: impl std::io::Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
        w.write_record(&self.names).map_err(csv_err)?;
        for row in &self.rows {
            w.write_record(row.iter().map(u64::to_string)).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        self.to_csv_writer(fs::File::create(path)?)
    }
}

/// Per-dimension preference code of an extended query.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PrefCode {
    Min,
    Max,
    Unselected,
}

impl PrefCode {
    /// `[unselected, max]`: min = 00, max = 01, unselected = 10.
    pub fn bits(self) -> PrefBits {
        match self {
            PrefCode::Min => [0, 0],
            PrefCode::Max => [0, 1],
            PrefCode::Unselected => [1, 0],
        }
    }

    pub fn from_bits(bits: PrefBits) -> Result<Self> {
        match bits {
            [0, 0] => Ok(PrefCode::Min),
            [0, 1] => Ok(PrefCode::Max),
            [1, 0] => Ok(PrefCode::Unselected),
            other => Err(Error::Protocol(format!("invalid preference code {other:?}"))),
        }
    }
}

/// A query padded to every dimension.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExtendedQuery {
    pub region: Vec<(u64, u64)>,
    pub prefs: Vec<PrefCode>,
}

/// Pads a query to all dimensions: unselected dimensions take the public
/// bounds and the unselected preference code.
pub fn build_query(q: &PlainQuery, meta: &PublicMetadata) -> Result<ExtendedQuery> {
    q.validate(meta.m, &meta.lower, &meta.upper)?;
    let mut region: Vec<(u64, u64)> = meta.lower.iter().copied().zip(meta.upper.iter().copied()).collect();
    let mut prefs = vec![PrefCode::Unselected; meta.m];
    for c in q.constraints() {
        region[c.dim] = (c.lower, c.upper);
        prefs[c.dim] = match c.pref {
            Preference::Min => PrefCode::Min,
            Preference::Max => PrefCode::Max,
        };
    }
    Ok(ExtendedQuery { region, prefs })
}

/// Shares the ranges arithmetically and the preference codes bitwise.
pub fn encrypt_query<W: RingWord, R: Rng + ?Sized>(
    q: &ExtendedQuery,
    rng: &mut R,
) -> (QueryShare<W>, QueryShare<W>) {
    let mut a = QueryShare { party: Party::P1, region: Vec::new(), prefs: Vec::new() };
    let mut b = QueryShare { party: Party::P2, region: Vec::new(), prefs: Vec::new() };
    for &(lo, hi) in &q.region {
        let (lo1, lo2) = share_arith(W::from_u64(lo), rng);
        let (hi1, hi2) = share_arith(W::from_u64(hi), rng);
        a.region.push((lo1.value, hi1.value));
        b.region.push((lo2.value, hi2.value));
    }
    for p in &q.prefs {
        let [u, x] = p.bits();
        let (u1, u2) = share_bit(u, rng);
        let (x1, x2) = share_bit(x, rng);
        a.prefs.push([u1.bit, x1.bit]);
        b.prefs.push([u2.bit, x2.bit]);
    }
    (a, b)
}

/// Recombines two query shares.
pub fn reconstruct_query<W: RingWord>(a: &QueryShare<W>, b: &QueryShare<W>) -> Result<ExtendedQuery> {
    if a.party == b.party {
        return Err(Error::PartyMismatch("both query shares belong to the same party".into()));
    }
    if a.m() != b.m() || a.prefs.len() != b.prefs.len() {
        return Err(Error::DimensionMismatch("query shares disagree on dimension count".into()));
    }
    let region = a.region.iter().zip(&b.region).map(|(x, y)| (x.0.add(y.0).to_u64(), x.1.add(y.1).to_u64())).collect();
    let prefs = a
        .prefs
        .iter()
        .zip(&b.prefs)
        .map(|(x, y)| PrefCode::from_bits([x[0] ^ y[0], x[1] ^ y[1]]))
        .collect::<Result<_>>()?;
    Ok(ExtendedQuery { region, prefs })
}

/// Reconstructs every result entry and drops those flagged as dominated.
pub fn decrypt_and_filter<W: RingWord>(a: &ResultShare<W>, b: &ResultShare<W>) -> Result<Vec<Vec<u64>>> {
    if a.party == b.party {
        return Err(Error::PartyMismatch("both result shares belong to the same party".into()));
    }
    if a.len() != b.len() || a.m != b.m {
        return Err(Error::Protocol(format!(
            "result shares disagree: {} entries x {} dims against {} x {}",
            a.len(),
            a.m,
            b.len(),
            b.m
        )));
    }
    let mut out = Vec::new();
    for (x, y) in a.entries.iter().zip(&b.entries) {
        if x.tuple.len() != a.m || y.tuple.len() != a.m {
            return Err(Error::Protocol("result entry has the wrong width".into()));
        }
        if x.is_domi ^ y.is_domi == 1 {
            continue;
        }
        out.push(x.tuple.iter().zip(&y.tuple).map(|(&p, &q)| p.add(q).to_u64()).collect());
    }
    Ok(out)
}

/// Parses a text query (dimensions numbered from 1).
pub fn parse_query(text: &str) -> Result<PlainQuery> {
    let mut cs = Vec::new();
    for line in text.lines().map(str::trim).filter(|s| !s.is_empty() && !s.starts_with('#')) {
        let f: Vec<&str> = line.split_whitespace().collect();
        let bad = || Error::InvalidQuery(format!("expected `dim lower upper min|max`, got {line:?}"));
        if f.len() != 4 {
            return Err(bad());
        }
        let dim: usize = f[0].parse().map_err(|_| bad())?;
        if dim == 0 {
            return Err(Error::InvalidQuery("dimensions are numbered from 1".into()));
        }
        let pref = match f[3] {
            "min" => Preference::Min,
            "max" => Preference::Max,
            _ => return Err(bad()),
        };
        cs.push(Constraint {
            dim: dim - 1,
            lower: f[1].parse().map_err(|_| bad())?,
            upper: f[2].parse().map_err(|_| bad())?,
            pref,
        });
    }
    PlainQuery::new(cs)
}

pub fn format_query(q: &PlainQuery) -> String {
    let mut s = String::from("# dim lower upper pref\n");
    for c in q.constraints() {
        let pref = match c.pref {
            Preference::Min => "min",
            Preference::Max => "max",
        };
        let _ = writeln!(s, "{} {} {} {pref}", c.dim + 1, c.lower, c.upper);
    }
    s
}
