//! `skyshare` command-line front end: data owner, dealer, servers, client and
//! experiment harness.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use skyshare::client::{
    build_query, decrypt_and_filter, encrypt_database, encrypt_query, format_query, parse_query, write_db_share,
    Dataset, PublicMetadata,
};
use skyshare::dealer::{deal, write_correlations, CorrelationBudget};
use skyshare::experiment::{gen_dataset, gen_query, run_experiment_on, Distribution, ExperimentSpec, TransportMode};
use skyshare::oracle::{bnl_skyline, canonical, in_region, PlainQuery};
use skyshare::protocol::FetchSchedule;
use skyshare::ring::{Party, Ring, RingWord};
use skyshare::service::{corr_extension, pending_correlation_files, remote_query, run_server, ServerConfig};
use skyshare::{Error, Result};

#[derive(Parser)]
#[command(name = "skyshare", version, about = "Two-server secret-shared skyline queries")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic integer table as CSV.
    GenData(GenData),
    /// Share a CSV table between the two servers.
    EncryptDb(EncryptDb),
    /// Generate correlated randomness files for future queries.
    Deal(DealArgs),
    /// Generate a selectivity-calibrated query over a table.
    GenQuery(GenQueryArgs),
    /// Run one server daemon.
    Serve(Serve),
    /// Send an encrypted query to both servers and print the skyline.
    Query(QueryArgs),
    /// Run latency/communication experiments and emit CSV.
    Bench(Bench),
    /// Cross-check an answer (or an in-process encrypted run) against the
    /// plaintext skyline.
    Verify(Verify),
}

#[derive(Args)]
struct Seed {
    /// RNG seed; omit for fresh OS randomness.
    #[arg(long, env = "SKYSHARE_SEED")]
    seed: Option<u64>,
}

impl Seed {
    fn rng(&self) -> ChaCha12Rng {
        match self.seed {
            Some(s) => ChaCha12Rng::seed_from_u64(s),
            None => ChaCha12Rng::from_entropy(),
        }
    }

    fn value(&self) -> u64 {
        self.seed.unwrap_or_else(|| rand::thread_rng().gen())
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum DistArg {
    Uniform,
    Correlated,
    AntiCorrelated,
}

impl From<DistArg> for Distribution {
    fn from(d: DistArg) -> Self {
        match d {
            DistArg::Uniform => Distribution::Uniform,
            DistArg::Correlated => Distribution::Correlated,
            DistArg::AntiCorrelated => Distribution::AntiCorrelated,
        }
    }
}

#[derive(Args)]
struct GenData {
    #[arg(long, default_value_t = 10_000)]
    n: usize,
    #[arg(long, default_value_t = 20)]
    m: usize,
    #[arg(long, default_value_t = skyshare::experiment::DEFAULT_MAX_VALUE)]
    max_value: u64,
    #[arg(long, value_enum, default_value = "uniform")]
    distribution: DistArg,
    /// Output CSV path (stdout if omitted).
    #[arg(long, short)]
    out: Option<PathBuf>,
    #[command(flatten)]
    seed: Seed,
}

#[derive(Args)]
struct EncryptDb {
    /// Plaintext CSV with a header row.
    #[arg(long, short)]
    input: PathBuf,
    /// Directory receiving `cs1/table.share`, `cs2/table.share` and `metadata.txt`.
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value = "db")]
    id: String,
    /// Public lower bound of every dimension.
    #[arg(long, default_value_t = 0)]
    lower: u64,
    /// Public upper bound of every dimension (default: the largest value
    /// comparisons support).
    #[arg(long)]
    upper: Option<u64>,
    #[command(flatten)]
    seed: Seed,
}

#[derive(Args)]
struct DealArgs {
    #[arg(long)]
    metadata: PathBuf,
    /// Directory with `cs1/` and `cs2/` subdirectories (created if missing).
    #[arg(long)]
    out_dir: PathBuf,
    /// Number of queries to provision.
    #[arg(long, default_value_t = 1)]
    count: usize,
    /// Largest candidate set a query may produce.
    #[arg(long, conflicts_with = "selectivity")]
    max_candidates: Option<usize>,
    /// Size the budget for this selectivity target (plus the calibration
    /// tolerance).
    #[arg(long)]
    selectivity: Option<f64>,
    #[command(flatten)]
    seed: Seed,
}

#[derive(Args)]
struct GenQueryArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    metadata: PathBuf,
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long, default_value_t = 0.001)]
    selectivity: f64,
    #[arg(long, short)]
    out: Option<PathBuf>,
    #[command(flatten)]
    seed: Seed,
}

#[derive(Clone, Copy, ValueEnum)]
enum Role {
    Cs1,
    Cs2,
}

#[derive(Args)]
struct Serve {
    #[arg(long, value_enum, env = "SKYSHARE_ROLE")]
    role: Role,
    #[arg(long, env = "SKYSHARE_CLIENT_ADDR")]
    client_addr: String,
    /// CS1: address to listen on for CS2. CS2: CS1's peer address.
    #[arg(long, env = "SKYSHARE_PEER_ADDR")]
    peer_addr: String,
    /// This server's table share.
    #[arg(long, env = "SKYSHARE_DB")]
    db: PathBuf,
    /// Directory of this server's correlation files.
    #[arg(long, env = "SKYSHARE_CORR_DIR")]
    corr_dir: PathBuf,
    /// Injected one-way delay on the peer link, in milliseconds.
    #[arg(long, env = "SKYSHARE_DELAY_MS", default_value_t = 0.0)]
    delay_ms: f64,
    #[arg(long, env = "SKYSHARE_TIMEOUT_MS", default_value_t = 30_000)]
    timeout_ms: u64,
    /// Accepted for uniformity; servers draw masks from OS randomness.
    #[command(flatten)]
    seed: Seed,
}

#[derive(Args)]
struct QueryArgs {
    #[arg(long)]
    metadata: PathBuf,
    /// Text query file (`dim lower upper min|max` per line, dims from 1).
    #[arg(long, short)]
    query: PathBuf,
    /// Client addresses of CS1 and CS2, comma-separated.
    #[arg(long, value_delimiter = ',', required = true, env = "SKYSHARE_SERVERS")]
    servers: Vec<String>,
    #[arg(long)]
    qid: Option<u64>,
    #[arg(long, default_value_t = 30_000)]
    timeout_ms: u64,
    /// Output CSV of skyline rows (stdout if omitted).
    #[arg(long, short)]
    out: Option<PathBuf>,
    #[command(flatten)]
    seed: Seed,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScheduleArg {
    Sequential,
    Batched,
}

#[derive(Clone, Copy, ValueEnum)]
enum TransportArg {
    Inmem,
    Tcp,
}

#[derive(Args)]
struct Bench {
    /// Table sizes to sweep.
    #[arg(long, value_delimiter = ',', default_value = "10000")]
    n: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "5")]
    m: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "3")]
    k: Vec<usize>,
    /// Selectivity targets as fractions, e.g. 0.001,0.01.
    #[arg(long, value_delimiter = ',', default_value = "0.001")]
    selectivity: Vec<f64>,
    #[arg(long, default_value_t = 10)]
    trials: usize,
    #[arg(long, default_value_t = 1.0)]
    delay_ms: f64,
    #[arg(long, value_enum, default_value = "inmem")]
    transport: TransportArg,
    #[arg(long, value_enum, default_value = "uniform")]
    distribution: DistArg,
    #[arg(long, value_enum, default_value = "sequential")]
    schedule: ScheduleArg,
    #[arg(long, default_value_t = skyshare::experiment::DEFAULT_MAX_VALUE)]
    max_value: u64,
    /// Append to this CSV file instead of printing.
    #[arg(long, short)]
    out: Option<PathBuf>,
    #[command(flatten)]
    seed: Seed,
}

#[derive(Args)]
struct Verify {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, short)]
    query: PathBuf,
    /// Answer produced by `query`; if omitted, the encrypted pipeline is run
    /// in-process and its answer is checked.
    #[arg(long)]
    result: Option<PathBuf>,
    #[arg(long)]
    metadata: Option<PathBuf>,
    #[command(flatten)]
    seed: Seed,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::EncryptDb(a) => encrypt_db(a),
        Command::Deal(a) => deal_cmd(a),
        Command::GenQuery(a) => gen_query_cmd(a),
        Command::Serve(a) => serve(a),
        Command::Query(a) => query(a),
        Command::Bench(a) => bench(a),
        Command::Verify(a) => verify(a),
    }?;
    Ok(ExitCode::SUCCESS)
}

fn write_out(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn rows_to_csv(rows: &[Vec<u64>], m: usize) -> Result<String> {
    let ds = Dataset { names: (1..=m).map(|j| format!("d{j}")).collect(), rows: rows.to_vec() };
    let mut buf = Vec::new();
    ds.to_csv_writer(&mut buf)?;
    Ok(String::from_utf8(buf).expect("csv is utf-8"))
}

fn gen_data(a: GenData) -> Result<()> {
    let ds = gen_dataset(a.n, a.m, a.max_value, a.distribution.into(), a.seed.value());
    match &a.out {
        Some(p) => ds.write_csv(p),
        None => ds.to_csv_writer(std::io::stdout().lock()),
    }
}

fn party_dir(base: &Path, party: Party) -> PathBuf {
    base.join(match party {
        Party::P1 => "cs1",
        Party::P2 => "cs2",
    })
}

fn encrypt_db(a: EncryptDb) -> Result<()> {
    let ds = Dataset::read_csv(&a.input)?;
    let upper = a.upper.unwrap_or(Ring::domain_bound() - 1);
    let meta = PublicMetadata::uniform(&a.id, ds.rows.len(), ds.m(), Ring::BITS, a.lower, upper);
    let (s1, s2) = encrypt_database::<Ring, _>(&ds.rows, &meta, &mut a.seed.rng())?;
    for (party, share) in [(Party::P1, &s1), (Party::P2, &s2)] {
        let dir = party_dir(&a.out_dir, party);
        fs::create_dir_all(&dir)?;
        write_db_share(share, &dir.join("table.share"))?;
    }
    meta.write(&a.out_dir.join("metadata.txt"))?;
    info!("shared {}x{} table into {}", meta.n, meta.m, a.out_dir.display());
    Ok(())
}

fn deal_cmd(a: DealArgs) -> Result<()> {
    let meta = PublicMetadata::read(&a.metadata)?;
    let c = match (a.max_candidates, a.selectivity) {
        (Some(c), _) => c,
        (None, Some(s)) => ExperimentSpec { n: meta.n, selectivity: s, ..Default::default() }.max_candidates(),
        (None, None) => return Err(Error::Config("give --max-candidates or --selectivity".into())),
    };
    let budget = CorrelationBudget::for_query(meta.l, meta.n, meta.m, c);
    let mut rng = a.seed.rng();
    let dirs = [party_dir(&a.out_dir, Party::P1), party_dir(&a.out_dir, Party::P2)];
    for d in &dirs {
        fs::create_dir_all(d)?;
    }
    // continue numbering after any files already present, used or not
    let start = fs::read_dir(&dirs[0])?
        .filter_map(|e| e.ok()?.file_name().into_string().ok())
        .filter_map(|f| f.strip_prefix("corr-")?.split('.').next()?.parse::<usize>().ok())
        .map(|i| i + 1)
        .max()
        .unwrap_or(0);
    for i in start..start + a.count {
        let (c1, c2) = deal::<Ring, _>(&budget, &mut rng)?.into_parties();
        for (dir, corr) in dirs.iter().zip([&c1, &c2]) {
            write_correlations(corr, &dir.join(format!("corr-{i:06}.{}", corr_extension(corr.party()))))?;
        }
    }
    info!(
        "dealt {} quer{} for |C| <= {c}: {} AND triples, {} bits each",
        a.count,
        if a.count == 1 { "y" } else { "ies" },
        budget.and_triples,
        budget.bits
    );
    Ok(())
}

fn gen_query_cmd(a: GenQueryArgs) -> Result<()> {
    let ds = Dataset::read_csv(&a.data)?;
    let meta = PublicMetadata::read(&a.metadata)?;
    let q = gen_query(&ds.rows, &meta, a.k, a.selectivity, a.seed.value())?;
    let c = ds.rows.iter().filter(|t| in_region(t, &q)).count();
    info!("query selects {c} of {} rows", ds.rows.len());
    write_out(a.out.as_deref(), &format_query(&q))
}

fn serve(a: Serve) -> Result<()> {
    let role = match a.role {
        Role::Cs1 => Party::P1,
        Role::Cs2 => Party::P2,
    };
    let pending = pending_correlation_files(&a.corr_dir, role)?.len();
    info!("{pending} unused correlation files");
    run_server(ServerConfig {
        role,
        client_addr: a.client_addr,
        peer_addr: a.peer_addr,
        db_path: a.db,
        corr_dir: a.corr_dir,
        delay: Duration::from_secs_f64(a.delay_ms / 1e3),
        timeout: Duration::from_millis(a.timeout_ms),
    })
}

fn query(a: QueryArgs) -> Result<()> {
    if a.servers.len() != 2 {
        return Err(Error::Config(format!("--servers needs two addresses, got {}", a.servers.len())));
    }
    let meta = PublicMetadata::read(&a.metadata)?;
    let q = parse_query(&fs::read_to_string(&a.query)?)?;
    let mut rng = a.seed.rng();
    let (s1, s2) = encrypt_query::<Ring, _>(&build_query(&q, &meta)?, &mut rng);
    let qid = a.qid.unwrap_or_else(|| rng.gen());
    let (r1, r2) = remote_query([&a.servers[0], &a.servers[1]], qid, (&s1, &s2), Duration::from_millis(a.timeout_ms))?;
    let rows = decrypt_and_filter(&r1, &r2)?;
    info!("query {qid}: {} result entries, {} skyline tuples", r1.len(), rows.len());
    write_out(a.out.as_deref(), &rows_to_csv(&rows, meta.m)?)
}

fn bench(a: Bench) -> Result<()> {
    let schedule = match a.schedule {
        ScheduleArg::Sequential => FetchSchedule::Sequential,
        ScheduleArg::Batched => FetchSchedule::Batched,
    };
    let transport = match a.transport {
        TransportArg::Inmem => TransportMode::InMemory,
        TransportArg::Tcp => TransportMode::Tcp,
    };
    let seed = a.seed.value();
    let mut csv = String::new();
    for &n in &a.n {
        for &m in &a.m {
            let data = gen_dataset(n, m, a.max_value, a.distribution.into(), seed);
            for &k in &a.k {
                for &selectivity in &a.selectivity {
                    let spec = ExperimentSpec {
                        n,
                        m,
                        k,
                        selectivity,
                        trials: a.trials,
                        seed,
                        transport,
                        delay: Duration::from_secs_f64(a.delay_ms / 1e3),
                        distribution: a.distribution.into(),
                        max_value: a.max_value,
                        schedule,
                    };
                    let report = run_experiment_on(&spec, &data)?;
                    info!(
                        "n={n} m={m} k={k} sel={selectivity}: {:.1} ms, {:.0} B",
                        report.mean_latency_ms(),
                        report.mean_bytes()
                    );
                    csv.push_str(&report.to_csv());
                }
            }
        }
    }
    match &a.out {
        Some(p) => {
            use std::io::Write;
            fs::OpenOptions::new().create(true).append(true).open(p)?.write_all(csv.as_bytes())?;
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn verify(a: Verify) -> Result<()> {
    let ds = Dataset::read_csv(&a.data)?;
    let q: PlainQuery = parse_query(&fs::read_to_string(&a.query)?)?;
    let want = canonical(bnl_skyline(&ds.rows, &q));
    let got = match &a.result {
        Some(p) => Dataset::read_csv(p)?.rows,
        None => {
            let meta = match &a.metadata {
                Some(p) => PublicMetadata::read(p)?,
                None => PublicMetadata::uniform("verify", ds.rows.len(), ds.m(), Ring::BITS, 0, Ring::domain_bound() - 1),
            };
            let mut rng = a.seed.rng();
            let db = encrypt_database::<Ring, _>(&ds.rows, &meta, &mut rng)?;
            let qs = encrypt_query::<Ring, _>(&build_query(&q, &meta)?, &mut rng);
            let c = ds.rows.iter().filter(|t| in_region(t, &q)).count();
            let corr = deal(&CorrelationBudget::for_query(meta.l, meta.n, meta.m, c), &mut rng)?;
            let (x, y) =
                skyshare::local::run_query_local(rng.gen(), (&db.0, &db.1), (&qs.0, &qs.1), corr, Duration::ZERO)?;
            decrypt_and_filter(&x.result, &y.result)?
        }
    };
    let got = canonical(got);
    if got != want {
        return Err(Error::OracleMismatch(format!(
            "answer has {} tuples, plaintext skyline has {}",
            got.len(),
            want.len()
        )));
    }
    println!("ok: {} skyline tuples match the plaintext oracle", want.len());
    Ok(())
}
