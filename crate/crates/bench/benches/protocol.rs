use std::hint::black_box;
use std::time::Duration;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use skyshare::client::{build_query, encrypt_database, encrypt_query, PublicMetadata};
use skyshare::dealer::{deal, CorrelationBudget};
use skyshare::engine::cost;
use skyshare::local::{local_sessions, run_pair, run_query_local};
use skyshare::oracle::{in_region, Constraint, PlainQuery, Preference};
use skyshare::protocol::{obli_dom_batch, obli_gen};
use skyshare::ring::share_arith;
use skyshare::shuffle::obli_shuff;

fn rng() -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(1)
}

fn budget(ands: usize, n: usize, m: usize, shuffles: usize) -> CorrelationBudget {
    CorrelationBudget { n, m, beaver: 0, and_triples: ands, bits: 0, shuffles }
}

fn split(xs: &[u64], r: &mut impl Rng) -> (Vec<u64>, Vec<u64>) {
    xs.iter().map(|&x| share_arith(x, r)).map(|(a, b)| (a.value, b.value)).unzip()
}

fn bench_sec_leq(c: &mut Criterion) {
    let mut r = rng();
    let n = 1000;
    let a: Vec<u64> = (0..n).map(|_| r.gen_range(0..1 << 40)).collect();
    let b: Vec<u64> = (0..n).map(|_| r.gen_range(0..1 << 40)).collect();
    let (a1, a2) = split(&a, &mut r);
    let (b1, b2) = split(&b, &mut r);
    c.bench_function("sec_leq/1000", |bench| {
        bench.iter_batched(
            || local_sessions::<u64>(1, deal(&budget(n * cost::sec_ext_ands(64), 1, 1, 0), &mut rng()).unwrap(), Duration::ZERO),
            |(mut s1, mut s2)| black_box(run_pair(|| s1.sec_leq(&a1, &b1), || s2.sec_leq(&a2, &b2))),
            BatchSize::PerIteration,
        )
    });
}

type Shares = (skyshare::SharedDatabase<u64>, skyshare::SharedDatabase<u64>);

fn shared_db(n: usize, m: usize) -> (PublicMetadata, Shares, Vec<Vec<u64>>) {
    let mut r = rng();
    let rows: Vec<Vec<u64>> = (0..n).map(|_| (0..m).map(|_| r.gen_range(0..1000)).collect()).collect();
    let meta = PublicMetadata::uniform("bench", n, m, 64, 0, 999);
    let db = encrypt_database::<u64, _>(&rows, &meta, &mut r).unwrap();
    (meta, db, rows)
}

fn bench_obli_dom(c: &mut Criterion) {
    let (pairs, m) = (100, 5);
    let (meta, (d1, d2), _) = shared_db(2 * pairs, m);
    let q = PlainQuery::new(vec![
        Constraint { dim: 0, lower: 0, upper: 999, pref: Preference::Min },
        Constraint { dim: 2, lower: 0, upper: 999, pref: Preference::Max },
    ])
    .unwrap();
    let (q1, q2) = encrypt_query::<u64, _>(&build_query(&q, &meta).unwrap(), &mut rng());
    fn rows(d: &skyshare::SharedDatabase<u64>, off: usize, count: usize) -> Vec<&[u64]> {
        (off..off + count).map(|i| d.row(i)).collect()
    }
    let (x1, y1, x2, y2) = (rows(&d1, 0, pairs), rows(&d1, pairs, pairs), rows(&d2, 0, pairs), rows(&d2, pairs, pairs));
    c.bench_function("obli_dom/100x5", |bench| {
        bench.iter_batched(
            || local_sessions::<u64>(1, deal(&budget(pairs * cost::obli_dom_ands(64, m), 1, m, 0), &mut rng()).unwrap(), Duration::ZERO),
            |(mut s1, mut s2)| {
                black_box(run_pair(
                    || obli_dom_batch(&mut s1, &x1, &y1, &q1.prefs),
                    || obli_dom_batch(&mut s2, &x2, &y2, &q2.prefs),
                ))
            },
            BatchSize::PerIteration,
        )
    });
}

fn bench_shuffle_and_gen(c: &mut Criterion) {
    let (n, m) = (4096, 5);
    let (meta, (d1, d2), _) = shared_db(n, m);
    let q = PlainQuery::new(vec![Constraint { dim: 1, lower: 100, upper: 200, pref: Preference::Min }]).unwrap();
    let (q1, q2) = encrypt_query::<u64, _>(&build_query(&q, &meta).unwrap(), &mut rng());
    let mut g = c.benchmark_group("filter");
    g.sample_size(10);
    g.bench_function("obli_shuff/4096x5", |bench| {
        bench.iter_batched(
            || local_sessions::<u64>(1, deal(&budget(0, n, m, 1), &mut rng()).unwrap(), Duration::ZERO),
            |(mut s1, mut s2)| black_box(run_pair(|| obli_shuff(&mut s1, &d1), || obli_shuff(&mut s2, &d2))),
            BatchSize::PerIteration,
        )
    });
    g.bench_function("obli_gen/4096x5", |bench| {
        bench.iter_batched(
            || {
                let ands = n * cost::obli_gen_row_ands(64, m);
                local_sessions::<u64>(1, deal(&budget(ands, n, m, 0), &mut rng()).unwrap(), Duration::ZERO)
            },
            |(mut s1, mut s2)| black_box(run_pair(|| obli_gen(&mut s1, &d1, &q1.region), || obli_gen(&mut s2, &d2, &q2.region))),
            BatchSize::PerIteration,
        )
    });
    g.finish();
}

fn bench_query(c: &mut Criterion) {
    let (n, m) = (2000, 5);
    let (meta, db, rows) = shared_db(n, m);
    let q = PlainQuery::new(vec![
        Constraint { dim: 0, lower: 0, upper: 150, pref: Preference::Min },
        Constraint { dim: 1, lower: 300, upper: 700, pref: Preference::Max },
        Constraint { dim: 4, lower: 0, upper: 400, pref: Preference::Min },
    ])
    .unwrap();
    let cand = rows.iter().filter(|t| in_region(t, &q)).count();
    let qs = encrypt_query::<u64, _>(&build_query(&q, &meta).unwrap(), &mut rng());
    let mut g = c.benchmark_group("query");
    g.sample_size(10);
    g.bench_function(format!("n{n}_m{m}_k3_c{cand}"), |bench| {
        bench.iter_batched(
            || deal(&CorrelationBudget::for_query(64, n, m, cand), &mut rng()).unwrap(),
            |corr| black_box(run_query_local(1, (&db.0, &db.1), (&qs.0, &qs.1), corr, Duration::ZERO).unwrap()),
            BatchSize::PerIteration,
        )
    });
    g.finish();
}

criterion_group!(benches, bench_sec_leq, bench_obli_dom, bench_shuffle_and_gen, bench_query);
criterion_main!(benches);
