//! Synthetic workloads and the end-to-end measurement harness.

use std::fmt::Write as _;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution as _, Normal};

use crate::client::{build_query, decrypt_and_filter, encrypt_database, encrypt_query, Dataset, PublicMetadata};
use crate::dealer::{deal, Consumption, CorrelationBudget};
use crate::engine::{Session, SessionStats};
use crate::error::{Error, Result};
use crate::local::run_pair;
use crate::oracle::{bnl_skyline, canonical, in_region, Constraint, PlainQuery, Preference};
use crate::protocol::{execute_query_with, FetchSchedule, QueryShare};
use crate::ring::Ring;
use crate::shuffle::SharedDatabase;
use crate::transport::{inmem_transport_pair, tcp_loopback_pair, Transport};

/// Default public upper bound of generated data.
pub const DEFAULT_MAX_VALUE: u64 = 999_999;

/// Relative tolerance of selectivity calibration.
pub const SELECTIVITY_TOLERANCE: f64 = 0.2;

const CALIBRATION_ATTEMPTS: usize = 64;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Distribution {
    #[default]
    Uniform,
    Correlated,
    AntiCorrelated,
}

impl FromStr for Distribution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Distribution::Uniform),
            "correlated" => Ok(Distribution::Correlated),
            "anti-correlated" | "anticorrelated" => Ok(Distribution::AntiCorrelated),
            _ => Err(Error::Config(format!("unknown distribution {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TransportMode {
    #[default]
    InMemory,
    Tcp,
}

impl FromStr for TransportMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inmem" | "memory" => Ok(TransportMode::InMemory),
            "tcp" => Ok(TransportMode::Tcp),
            _ => Err(Error::Config(format!("unknown transport {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentSpec {
    pub n: usize,
    pub m: usize,
    pub k: usize,
    /// Target fraction of rows inside the query region.
    pub selectivity: f64,
    pub trials: usize,
    pub seed: u64,
    pub transport: TransportMode,
    /// One-way delay injected on the server link.
    pub delay: Duration,
    pub distribution: Distribution,
    pub max_value: u64,
    pub schedule: FetchSchedule,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            n: 1000,
            m: 5,
            k: 3,
            selectivity: 0.001,
            trials: 1,
            seed: 0,
            transport: TransportMode::InMemory,
            delay: Duration::ZERO,
            distribution: Distribution::Uniform,
            max_value: DEFAULT_MAX_VALUE,
            schedule: FetchSchedule::default(),
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.m == 0 {
            return Err(Error::Config("n and m must be at least 1".into()));
        }
        if self.k == 0 || self.k > self.m {
            return Err(Error::Config(format!("k={} must lie in [1, m={}]", self.k, self.m)));
        }
        if !(self.selectivity > 0.0 && self.selectivity <= 1.0) {
            return Err(Error::Config(format!("selectivity {} outside (0, 1]", self.selectivity)));
        }
        if self.trials == 0 {
            return Err(Error::Config("at least one trial is required".into()));
        }
        Ok(())
    }

    pub fn metadata(&self) -> PublicMetadata {
        PublicMetadata::uniform("synthetic", self.n, self.m, Ring::BITS, 0, self.max_value)
    }

    /// Candidate-set bound used to size the correlation budget.
    pub fn max_candidates(&self) -> usize {
        let c = (self.selectivity * self.n as f64 * (1.0 + SELECTIVITY_TOLERANCE)).floor() as usize;
        c.clamp(1, self.n)
    }

    fn describe(&self) -> String {
        format!(
            "n={} m={} k={} selectivity={} trials={} seed={} transport={:?} delay_ms={} distribution={:?} max_value={} schedule={:?}",
            self.n,
            self.m,
            self.k,
            self.selectivity,
            self.trials,
            self.seed,
            self.transport,
            self.delay.as_secs_f64() * 1e3,
            self.distribution,
            self.max_value,
            self.schedule
        )
    }
}

/// Integer table with values in `[0, max_value]`, reproducible by seed.
pub fn gen_dataset(n: usize, m: usize, max_value: u64, dist: Distribution, seed: u64) -> Dataset {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let names = (1..=m).map(|j| format!("d{j}")).collect();
    let scale = |x: f64| (x.clamp(0.0, 1.0) * max_value as f64).round() as u64;
    let noise = Normal::<f64>::new(0.0, 0.05).unwrap();
    let plane = Normal::<f64>::new(0.5, 0.05).unwrap();
    let rows = (0..n)
        .map(|_| match dist {
            Distribution::Uniform => (0..m).map(|_| rng.gen_range(0..=max_value)).collect(),
            Distribution::Correlated => {
                let base: f64 = rng.gen();
                (0..m).map(|_| scale(base + noise.sample(&mut rng))).collect()
            }
            Distribution::AntiCorrelated => {
                let target: f64 = plane.sample(&mut rng).clamp(0.0, 1.0) * m as f64;
                let raw: Vec<f64> = (0..m).map(|_| rng.gen::<f64>() + 1e-9).collect();
                let sum: f64 = raw.iter().sum();
                raw.iter().map(|x| scale(x * target / sum)).collect()
            }
        })
        .collect();
    Dataset { names, rows }
}

fn count_in_region(rows: &[Vec<u64>], q: &PlainQuery) -> usize {
    rows.iter().filter(|t| in_region(t, q)).count()
}

/// Picks `k` random dimensions with random preferences and a box around a
/// random row whose in-region fraction is within the calibration tolerance
/// of `selectivity`.
pub fn gen_query(
    rows: &[Vec<u64>],
    meta: &PublicMetadata,
    k: usize,
    selectivity: f64,
    seed: u64,
) -> Result<PlainQuery> {
    if k == 0 || k > meta.m {
        return Err(Error::Config(format!("k={k} must lie in [1, m={}]", meta.m)));
    }
    if !(selectivity > 0.0 && selectivity <= 1.0) {
        return Err(Error::Config(format!("selectivity {selectivity} outside (0, 1]")));
    }
    if rows.is_empty() {
        return Err(Error::Calibration("empty table".into()));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut dims = sample(&mut rng, meta.m, k).into_vec();
    dims.sort_unstable();
    let prefs: Vec<Preference> =
        dims.iter().map(|_| if rng.gen() { Preference::Max } else { Preference::Min }).collect();
    let make = |ranges: &[(u64, u64)]| {
        PlainQuery::new(
            dims.iter()
                .zip(&prefs)
                .zip(ranges)
                .map(|((&dim, &pref), &(lower, upper))| Constraint { dim, lower, upper, pref })
                .collect(),
        )
    };
    if selectivity >= 1.0 {
        let full: Vec<_> = dims.iter().map(|&d| (meta.lower[d], meta.upper[d])).collect();
        return make(&full);
    }

    let n = rows.len() as f64;
    let target = selectivity * n;
    let lo = (target * (1.0 - SELECTIVITY_TOLERANCE)).ceil().max(1.0) as usize;
    let hi = (target * (1.0 + SELECTIVITY_TOLERANCE)).floor() as usize;
    if lo > hi {
        return Err(Error::Calibration(format!(
            "no row count within {:.0}% of {target:.2} exists for n={}",
            SELECTIVITY_TOLERANCE * 100.0,
            rows.len()
        )));
    }
    for _ in 0..CALIBRATION_ATTEMPTS {
        let center = &rows[rng.gen_range(0..rows.len())];
        let boxed = |w: f64| -> Result<PlainQuery> {
            let ranges: Vec<_> = dims
                .iter()
                .map(|&d| {
                    let span = (meta.upper[d] - meta.lower[d]) as f64;
                    let half = (w * span).round() as u64;
                    (center[d].saturating_sub(half).max(meta.lower[d]), center[d].saturating_add(half).min(meta.upper[d]))
                })
                .collect();
            make(&ranges)
        };
        let (mut a, mut b) = (0.0f64, 1.0f64);
        for _ in 0..64 {
            let w = 0.5 * (a + b);
            let q = boxed(w)?;
            let c = count_in_region(rows, &q);
            if (lo..=hi).contains(&c) {
                return Ok(q);
            }
            if c < lo {
                a = w;
            } else {
                b = w;
            }
        }
    }
    Err(Error::Calibration(format!(
        "could not reach {lo}..={hi} rows in {CALIBRATION_ATTEMPTS} attempts (heavy duplicates?)"
    )))
}

/// Measurements of one end-to-end query.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialResult {
    pub latency_ms: f64,
    pub bytes_cs1_to_cs2: u64,
    pub bytes_cs2_to_cs1: u64,
    pub candidates: usize,
    /// Entries in the returned result set, before flag filtering.
    pub result_entries: usize,
    /// Skyline size after filtering.
    pub skyline: usize,
    pub rounds: u32,
    pub consumed: Consumption,
}

struct Prepared {
    rows: Vec<Vec<u64>>,
    query: PlainQuery,
    db: (SharedDatabase<Ring>, SharedDatabase<Ring>),
    shares: (QueryShare<Ring>, QueryShare<Ring>),
}

fn run_sessions<T: Transport + Send>(
    spec: &ExperimentSpec,
    links: (T, T),
    p: &Prepared,
    rng: &mut ChaCha12Rng,
    qid: u64,
) -> Result<TrialResult> {
    let budget = CorrelationBudget::for_query(Ring::BITS, spec.n, spec.m, spec.max_candidates());
    let (c1, c2) = deal::<Ring, _>(&budget, rng)?.into_parties();
    let mut s1 = Session::new(qid, links.0, c1).with_seed(rng.gen());
    let mut s2 = Session::new(qid, links.1, c2).with_seed(rng.gen());
    let start = Instant::now();
    let (a, b) = run_pair(
        || execute_query_with(&mut s1, &p.db.0, &p.shares.0, spec.schedule),
        || execute_query_with(&mut s2, &p.db.1, &p.shares.1, spec.schedule),
    );
    let latency = start.elapsed();
    let (a, b) = match (a, b) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => {
            return Err(match e {
                Error::BudgetExhausted { .. } => {
                    Error::Protocol(format!("{e}; consumed so far: {:?}", s1.consumed()))
                }
                e => e,
            })
        }
    };
    let answer = decrypt_and_filter(&a.result, &b.result)?;
    let expected = canonical(bnl_skyline(&p.rows, &p.query));
    let got = canonical(answer);
    if got != expected {
        return Err(Error::OracleMismatch(format!(
            "query {qid}: {} tuples returned, oracle has {}",
            got.len(),
            expected.len()
        )));
    }
    let s1: SessionStats = a.stats;
    let s2: SessionStats = b.stats;
    Ok(TrialResult {
        latency_ms: latency.as_secs_f64() * 1e3,
        bytes_cs1_to_cs2: s1.bytes_sent,
        bytes_cs2_to_cs1: s2.bytes_sent,
        candidates: a.candidates,
        result_entries: a.result.len(),
        skyline: got.len(),
        rounds: s1.rounds,
        consumed: a.consumed,
    })
}

/// Runs one query on the given table and cross-checks it against the
/// plaintext oracle.
pub fn run_trial(spec: &ExperimentSpec, data: &Dataset, query: &PlainQuery, seed: u64) -> Result<TrialResult> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let meta = PublicMetadata { n: data.rows.len(), ..spec.metadata() };
    let db = encrypt_database::<Ring, _>(&data.rows, &meta, &mut rng)?;
    let shares = encrypt_query::<Ring, _>(&build_query(query, &meta)?, &mut rng);
    let prepared = Prepared { rows: data.rows.clone(), query: query.clone(), db, shares };
    let qid = rng.gen();
    match spec.transport {
        TransportMode::InMemory => run_sessions(spec, inmem_transport_pair(spec.delay), &prepared, &mut rng, qid),
        TransportMode::Tcp => run_sessions(spec, tcp_loopback_pair(spec.delay, None)?, &prepared, &mut rng, qid),
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentReport {
    pub spec: ExperimentSpec,
    pub trials: Vec<TrialResult>,
}

impl ExperimentReport {
    pub fn mean_latency_ms(&self) -> f64 {
        self.trials.iter().map(|t| t.latency_ms).sum::<f64>() / self.trials.len() as f64
    }

    /// Mean total bytes exchanged between the servers.
    pub fn mean_bytes(&self) -> f64 {
        self.trials.iter().map(|t| (t.bytes_cs1_to_cs2 + t.bytes_cs2_to_cs1) as f64).sum::<f64>()
            / self.trials.len() as f64
    }

    pub fn mean_candidates(&self) -> f64 {
        self.trials.iter().map(|t| t.candidates as f64).sum::<f64>() / self.trials.len() as f64
    }

    pub fn mean_rounds(&self) -> f64 {
        self.trials.iter().map(|t| f64::from(t.rounds)).sum::<f64>() / self.trials.len() as f64
    }

    pub const CSV_HEADER: &'static str =
        "trial,latency_ms,bytes_cs1_to_cs2,bytes_cs2_to_cs1,candidates,result_entries,skyline,rounds";

    /// One row per trial plus a `mean` row, preceded by the settings as a
    /// comment.
    pub fn to_csv(&self) -> String {
        let mut s = format!("# {}\n{}\n", self.spec.describe(), Self::CSV_HEADER);
        for (i, t) in self.trials.iter().enumerate() {
            let _ = writeln!(
                s,
                "{i},{:.3},{},{},{},{},{},{}",
                t.latency_ms,
                t.bytes_cs1_to_cs2,
                t.bytes_cs2_to_cs1,
                t.candidates,
                t.result_entries,
                t.skyline,
                t.rounds
            );
        }
        let k = self.trials.len() as f64;
        let mean = |f: &dyn Fn(&TrialResult) -> f64| self.trials.iter().map(f).sum::<f64>() / k;
        let _ = writeln!(
            s,
            "mean,{:.3},{:.1},{:.1},{:.2},{:.2},{:.2},{:.1}",
            self.mean_latency_ms(),
            mean(&|t| t.bytes_cs1_to_cs2 as f64),
            mean(&|t| t.bytes_cs2_to_cs1 as f64),
            self.mean_candidates(),
            mean(&|t| t.result_entries as f64),
            mean(&|t| t.skyline as f64),
            self.mean_rounds()
        );
        s
    }
}

/// Generates a table, then runs `trials` calibrated queries sequentially.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentReport> {
    spec.validate()?;
    let data = gen_dataset(spec.n, spec.m, spec.max_value, spec.distribution, spec.seed);
    run_experiment_on(spec, &data)
}

/// Like [`run_experiment`] on a caller-supplied table.
pub fn run_experiment_on(spec: &ExperimentSpec, data: &Dataset) -> Result<ExperimentReport> {
    spec.validate()?;
    let meta = PublicMetadata { n: data.rows.len(), ..spec.metadata() };
    let mut trials = Vec::with_capacity(spec.trials);
    for t in 0..spec.trials {
        let qseed = spec.seed.wrapping_add(1 + t as u64);
        let q = gen_query(&data.rows, &meta, spec.k, spec.selectivity, qseed)?;
        trials.push(run_trial(spec, data, &q, qseed ^ 0x5eed)?);
    }
    Ok(ExperimentReport { spec: spec.clone(), trials })
}
