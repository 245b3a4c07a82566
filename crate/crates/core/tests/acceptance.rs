//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fails.
//!
//! Runs without the libtest harness so the lines are always printed.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use dcpsim::attn::validate_merge;
use dcpsim::experiment::report::write_requests_csv;
use dcpsim::experiment::{ExperimentConfig, TraceSource};
use dcpsim::routing::{bucket_shape, build_binding_config, derive_routing_tables, graph_memory_footprint, ShapeSpace};
use dcpsim::scheduler::{water_fill, SchedulerPolicy};
use dcpsim::sim::{from_max_mean, run_simulation, slo_sweep, thread_cap_from_env, RunMetrics};
use dcpsim::workload::{gen_trace, TraceConfig};
use dcpsim::{InstanceId, Placement, RequestId, Shard};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn load(name: &str) -> ExperimentConfig {
    ExperimentConfig::load(&configs_dir().join(name)).expect("shipped config parses")
}

fn generated(cfg: &ExperimentConfig) -> TraceConfig {
    match &cfg.trace {
        Some(TraceSource::Generate(t)) => TraceConfig {
            seed: cfg.seed.unwrap_or(t.seed),
            ..t.clone()
        },
        _ => panic!("shipped config uses a generated trace"),
    }
}

fn simulate(cfg: &ExperimentConfig, trace: &TraceConfig, policy: &SchedulerPolicy) -> RunMetrics {
    let requests = gen_trace(trace).expect("trace");
    run_simulation(&requests, policy, &cfg.cluster, &cfg.latency, &cfg.sim).expect("simulation")
}

fn c1_merge() -> Verdict {
    let t = Instant::now();
    let r = validate_merge(1000, 1);
    let secs = t.elapsed().as_secs_f64();
    verdict(
        r.max_rel_err < 1e-5 && secs < 10.0,
        format!("max_rel_err={:e} over {} cases in {secs:.2}s", r.max_rel_err, r.cases),
    )
}

/// Minimum achievable peak by enumerating every integer split.
fn brute_force_peak(loads: &[u64], len: u64) -> u64 {
    fn go(loads: &[u64], left: u64, peak: u64) -> u64 {
        match loads {
            [] => unreachable!(),
            [last] => peak.max(last + left),
            [first, rest @ ..] => (0..=left)
                .map(|x| go(rest, left - x, peak.max(first + x)))
                .min()
                .expect("non-empty range"),
        }
    }
    go(loads, len, 0)
}

fn c2_water_fill() -> Verdict {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut mismatches = 0;
    for _ in 0..10_000 {
        let k = rng.random_range(1..=4);
        let loads: Vec<u64> = (0..k).map(|_| rng.random_range(0..=64)).collect();
        let len = rng.random_range(1..=64);
        let split = water_fill(&loads, len);
        let peak = loads.iter().zip(&split).map(|(a, b)| a + b).max().unwrap();
        if split.iter().sum::<u64>() != len || peak != brute_force_peak(&loads, len) {
            mismatches += 1;
        }
    }
    let secs = t.elapsed().as_secs_f64();
    verdict(
        mismatches == 0 && secs < 30.0,
        format!("{mismatches} mismatches in 10000 cases, {secs:.2}s"),
    )
}

fn placement(m: usize, shards: &[(usize, u64)]) -> Placement {
    let shards = shards
        .iter()
        .map(|&(i, tokens)| Shard {
            instance: InstanceId(i),
            tokens,
        })
        .collect();
    Placement::new(InstanceId(m), shards).expect("valid placement")
}

/// Checks both table invariants and returns the number of violations.
fn routing_violations(placements: &[(RequestId, Placement)], world: usize) -> usize {
    let configs = build_binding_config(placements.iter().map(|(id, p)| (*id, p)), world).expect("consistent");
    let tables = derive_routing_tables(&configs);
    let mut bad = 0;
    for (id, p) in placements {
        let m = p.moe_binding();
        let binding: Vec<InstanceId> = p.kv_binding().collect();
        for &s in &binding {
            let q = tables[s.0].q_route.row_of(*id);
            let r = tables[m.0].res_route.row_of(*id);
            if q.is_none_or(|row| !row[m.0]) || r.is_none_or(|row| !row[s.0]) {
                bad += 1;
            }
        }
        match tables[m.0].res_route.row_of(*id) {
            Some(row) if row.iter().filter(|&&b| b).count() == binding.len() => {}
            _ => bad += 1,
        }
    }
    for t in &tables {
        bad += t
            .q_route
            .rows()
            .filter(|(_, row)| row.iter().filter(|&&b| b).count() != 1)
            .count();
    }
    let total: usize = placements.iter().map(|(_, p)| p.kv_binding().count()).sum();
    let q_ones: usize = tables.iter().map(|t| t.q_route.ones()).sum();
    let r_ones: usize = tables.iter().map(|t| t.res_route.ones()).sum();
    bad + usize::from(q_ones != total) + usize::from(r_ones != total)
}

fn c3_routing() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut violations = 0;
    for _ in 0..1000 {
        let world = rng.random_range(1..=8);
        let n = rng.random_range(1..=20);
        let placements: Vec<(RequestId, Placement)> = (0..n)
            .map(|i| {
                let mut ids: Vec<usize> = (0..world).collect();
                rand::seq::SliceRandom::shuffle(ids.as_mut_slice(), &mut rng);
                let k = rng.random_range(1..=world);
                let shards: Vec<(usize, u64)> = ids[..k].iter().map(|&s| (s, rng.random_range(0..=100))).collect();
                let m = ids[rng.random_range(0..k)];
                (RequestId(i), placement(m, &shards))
            })
            .collect();
        violations += routing_violations(&placements, world);
    }
    // A..E over four instances: instance 2 is the MoE binding of C and E and
    // holds shards of A, C and E.
    let scenario = [
        (RequestId(0), placement(0, &[(0, 8), (2, 8)])),
        (RequestId(1), placement(1, &[(1, 8)])),
        (RequestId(2), placement(2, &[(2, 8), (3, 8)])),
        (RequestId(3), placement(3, &[(3, 8)])),
        (RequestId(4), placement(2, &[(2, 8)])),
    ];
    let configs = build_binding_config(scenario.iter().map(|(id, p)| (*id, p)), 4).unwrap();
    let tables = derive_routing_tables(&configs);
    let at2 = &tables[2];
    let example_ok = (configs[2].m(), configs[2].n()) == (2, 3)
        && (at2.q_route.row_count(), at2.q_route.width()) == (3, 4)
        && (at2.res_route.row_count(), at2.res_route.width()) == (2, 4)
        && routing_violations(&scenario, 4) == 0;
    verdict(
        violations == 0 && example_ok,
        format!(
            "{violations} violations over 1000 random sets; instance-2 scenario M=2 N=3 {}",
            if example_ok { "ok" } else { "wrong" }
        ),
    )
}

fn c4_metrics() -> Verdict {
    let (_, a) = from_max_mean(1020.6, 354.7);
    let (_, b) = from_max_mean(539.5, 184.3);
    verdict(
        (a - 65.2).abs() <= 0.1 && (b - 65.8).abs() <= 0.1,
        format!("reduction potentials {a:.2}% and {b:.2}%"),
    )
}

struct Mixed {
    lb: RunMetrics,
    lc: RunMetrics,
    dcp: RunMetrics,
}

fn mixed_runs() -> (Mixed, Duration) {
    let t = Instant::now();
    let cfg = load("simulate.toml");
    let trace = generated(&cfg);
    let runs = Mixed {
        lb: simulate(&cfg, &trace, &SchedulerPolicy::LeastBatch),
        lc: simulate(&cfg, &trace, &SchedulerPolicy::LeastCache),
        dcp: simulate(&cfg, &trace, &cfg.policy),
    };
    (runs, t.elapsed())
}

fn c5_stragglers(m: &Mixed, elapsed: Duration) -> Verdict {
    let lb_attn = m.lb.attention.reduction_potential_pct;
    let dcp_attn = m.dcp.attention.reduction_potential_pct;
    let lc_comm = m.lc.moe_comm.reduction_potential_pct;
    let dcp_comm = m.dcp.moe_comm.reduction_potential_pct;
    let secs = elapsed.as_secs_f64();
    verdict(
        lb_attn >= 50.0 && dcp_attn <= 20.0 && lc_comm >= 50.0 && dcp_comm <= 20.0 && secs < 120.0,
        format!(
            "attention RP least-batch {lb_attn:.1}% (>=50) dcp {dcp_attn:.1}% (<=20); \
             dispatch+combine RP least-cache {lc_comm:.1}% (>=50) dcp {dcp_comm:.1}% (<=20); {secs:.1}s"
        ),
    )
}

fn c6_dual_balance(m: &Mixed) -> Verdict {
    let (dk, lk) = (m.dcp.kv_load.imbalance_pct, m.lb.kv_load.imbalance_pct);
    let (db, cb) = (m.dcp.batch.imbalance_pct, m.lc.batch.imbalance_pct);
    verdict(
        dk <= 0.5 * lk && db <= 0.5 * cb,
        format!(
            "kv imbalance dcp {dk:.1}% vs least-batch {lk:.1}%; batch imbalance dcp {db:.1}% vs least-cache {cb:.1}%"
        ),
    )
}

fn c7_hol() -> Verdict {
    let cfg = load("simulate.toml");
    assert!(cfg.sim.hol_strict);
    let base = generated(&cfg);
    let trace = TraceConfig {
        arrival: base.arrival.with_rate(30.0),
        duration_s: 60.0,
        ..base
    };
    let lb = simulate(&cfg, &trace, &SchedulerPolicy::LeastBatch).hol_events;
    let dcp = simulate(&cfg, &trace, &cfg.policy).hol_events;
    verdict(
        lb > 0 && lb >= 10 * dcp,
        format!("HoL events least-batch {lb} vs dcp {dcp} at 30 req/s"),
    )
}

fn c8_sparsity(m: &Mixed) -> Verdict {
    let qualified = m.dcp.max_multi_instance_fraction(100);
    let any = m.dcp.max_multi_instance_fraction(1);
    verdict(
        qualified < 0.05,
        format!(
            "peak share of decoding requests with cp_degree > 1: {:.2}% over iterations with >= 100 decoding ({:.1}% over all iterations)",
            100.0 * qualified,
            100.0 * any
        ),
    )
}

fn grid(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let n = ((hi - lo) / step).round() as usize;
    (0..=n).map(|i| lo + step * i as f64).collect()
}

fn max_rate(cfg: &ExperimentConfig, trace: &TraceConfig, policy: &SchedulerPolicy, rates: &[f64]) -> f64 {
    slo_sweep(
        trace,
        policy,
        &cfg.cluster,
        &cfg.latency,
        &cfg.sim,
        rates,
        thread_cap_from_env(),
    )
    .expect("sweep")
    .max_rate
    .unwrap_or(0.0)
}

fn c9_slo_sweep() -> Verdict {
    let t = Instant::now();
    let cfg = load("sweep.toml");
    let base = TraceConfig {
        duration_s: 180.0,
        ..generated(&cfg)
    };
    let baselines = [
        SchedulerPolicy::LeastBatch,
        SchedulerPolicy::LeastCache,
        SchedulerPolicy::UniformCp { degree: 2 },
        SchedulerPolicy::UniformCp { degree: 4 },
        SchedulerPolicy::UniformCp { degree: 8 },
    ];
    let mixed_grid = grid(1.0, 60.0, 1.0);
    let mut pass = true;
    let mut parts = Vec::new();
    for long_ratio in [0.01, 0.05] {
        let trace = TraceConfig {
            long_ratio,
            ..base.clone()
        };
        let dcp = max_rate(&cfg, &trace, &cfg.policy, &mixed_grid);
        let (best_name, best) = baselines
            .iter()
            .map(|p| (p.name(), max_rate(&cfg, &trace, p, &mixed_grid)))
            .fold((String::new(), 0.0), |acc, x| if x.1 > acc.1 { x } else { acc });
        let ok = dcp >= 1.5 * best;
        pass &= ok;
        parts.push(format!(
            "{}%-long dcp {dcp} vs {best_name} {best} ({:.2}x)",
            long_ratio * 100.0,
            dcp / best.max(f64::MIN_POSITIVE)
        ));
    }
    let pure = TraceConfig {
        long_ratio: 1.0,
        ..base
    };
    let long_grid = grid(0.05, 3.0, 0.05);
    let dcp = max_rate(&cfg, &pure, &cfg.policy, &long_grid);
    let ucp8 = max_rate(&cfg, &pure, &SchedulerPolicy::UniformCp { degree: 8 }, &long_grid);
    pass &= dcp >= 0.9 * ucp8;
    parts.push(format!("pure-long dcp {dcp:.2} vs uniform-cp8 {ucp8:.2}"));
    let secs = t.elapsed().as_secs_f64();
    pass &= secs < 600.0;
    parts.push(format!("{secs:.1}s"));
    verdict(pass, parts.join("; "))
}

fn requests_csv(m: &RunMetrics) -> Vec<u8> {
    let mut buf = Vec::new();
    write_requests_csv(&m.requests, &mut buf).unwrap();
    buf
}

fn c10_determinism(m: &Mixed) -> Verdict {
    let (again, _) = mixed_runs();
    let same = [(&m.lb, &again.lb), (&m.lc, &again.lc), (&m.dcp, &again.dcp)]
        .iter()
        .all(|(a, b)| requests_csv(a) == requests_csv(b));
    verdict(
        same,
        "requests.csv bytes of repeated least-batch, least-cache and dcp runs",
    )
}

fn c11_bucketing() -> Verdict {
    let space = ShapeSpace::default_grid(16);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut non_monotone = 0;
    for _ in 0..10_000 {
        let (m, n) = (rng.random_range(0..=space.m_max), rng.random_range(0..=space.n_max));
        let (m2, n2) = (rng.random_range(m..=space.m_max), rng.random_range(n..=space.n_max));
        let (a, b) = (
            bucket_shape(m, n, &space).unwrap(),
            bucket_shape(m2, n2, &space).unwrap(),
        );
        if b.0 < a.0 && b.1 < a.1 || b.0 < m2 || b.1 < n2 {
            non_monotone += 1;
        }
    }
    let base = graph_memory_footprint(&space);
    let doubled_m = graph_memory_footprint(&ShapeSpace {
        m_max: space.m_max * 2,
        ..space.clone()
    });
    let doubled_n = graph_memory_footprint(&ShapeSpace {
        n_max: space.n_max * 2,
        ..space.clone()
    });
    let empty = graph_memory_footprint(&ShapeSpace {
        buckets: Vec::new(),
        ..space.clone()
    });
    let linear = doubled_m.q_pool == 2 * base.q_pool
        && doubled_m.input_pool == 2 * base.input_pool
        && doubled_m.res_pool == base.res_pool
        && doubled_n.res_pool == 2 * base.res_pool
        && doubled_n.lse_pool == 2 * base.lse_pool
        && empty.graphs == 0
        && empty.total_bytes() == base.total_bytes();
    verdict(
        non_monotone == 0 && linear && base.graphs == 48,
        format!(
            "{non_monotone} monotonicity violations in 10000 pairs; linearity {}; default graphs {}",
            if linear { "ok" } else { "broken" },
            base.graphs
        ),
    )
}

fn main() -> ExitCode {
    let mut results: Vec<(u32, Verdict)> = vec![
        (1, c1_merge()),
        (2, c2_water_fill()),
        (3, c3_routing()),
        (4, c4_metrics()),
    ];
    let (mixed, elapsed) = mixed_runs();
    results.push((5, c5_stragglers(&mixed, elapsed)));
    results.push((6, c6_dual_balance(&mixed)));
    results.push((7, c7_hol()));
    results.push((8, c8_sparsity(&mixed)));
    results.push((9, c9_slo_sweep()));
    results.push((10, c10_determinism(&mixed)));
    results.push((11, c11_bucketing()));
    let mut failed = 0;
    for (n, v) in &results {
        println!(
            "criterion {n:>2}: {} {}",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail
        );
        failed += usize::from(!v.pass);
    }
    println!("{} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
