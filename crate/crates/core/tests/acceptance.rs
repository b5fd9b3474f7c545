//! Acceptance checks. Each test prints one `criterion N PASS|FAIL` line to stderr and then asserts.
//!
//! Tests take a shared lock so the timed criteria run alone, and the end-to-end
//! criteria share one set of five-seed runs.

mod common;

use std::io::Write;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use ncu_core::confidence::{forget_count, partition_batch, BatchPartition};
use ncu_core::numcore::Matrix;
use ncu_core::ot::{
    build_mask, exact_ot_oracle, marginal_residual, masked_sinkhorn, transport_cost, SinkhornConfig, TransportProblem,
};
use ncu_core::pipeline::{
    evaluate, learn_negatives, load_checkpoint, pretrain, save_checkpoint, unlearn, MetricsReport, Mode, RunConfig,
};
use ncu_core::synthgen::{generate, generate_test, load_dataset, save_dataset, GenConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 5;
const HELD_OUT_PER_CLASS: usize = 100;

static LOCK: Mutex<()> = Mutex::new(());

fn exclusive() -> MutexGuard<'static, ()> {
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(n: u32, pass: bool, detail: String) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {n} {verdict}: {detail}");
}

/// Unlearning knobs used for every NCU arm.
fn ncu_config(seed: u64) -> RunConfig {
    RunConfig { seed, epsilon: 0.05, gamma: 0.8, ..RunConfig::default() }
}

struct SeedRun {
    pre: MetricsReport,
    ncu: MetricsReport,
    fp_only: MetricsReport,
    fn_only: MetricsReport,
    quarter: MetricsReport,
    ci: MetricsReport,
    ga: MetricsReport,
}

struct Runs {
    seeds: Vec<SeedRun>,
    /// Pretrain, learn-negatives, NCU and continued InfoNCE, summed over seeds.
    core_time: Duration,
}

fn runs() -> &'static Runs {
    static RUNS: OnceLock<Runs> = OnceLock::new();
    RUNS.get_or_init(|| {
        let mut seeds = Vec::new();
        let mut core_time = Duration::ZERO;
        for seed in 0..SEEDS {
            let g = GenConfig { seed, ..GenConfig::default() };
            let train = generate(&g).unwrap();
            let test = generate_test(&g, HELD_OUT_PER_CLASS).unwrap();
            let cfg = ncu_config(seed);
            let eval = |c: &ncu_core::pipeline::Checkpoint| evaluate(c, &test).unwrap();

            let clock = Instant::now();
            let pre = pretrain(&cfg, &train, &mut ()).unwrap();
            let hn = learn_negatives(&cfg, &train, &pre, &mut ()).unwrap();
            let ncu = unlearn(&cfg, &train, &hn, &mut ()).unwrap();
            let ci = unlearn(&RunConfig { mode: Mode::ContinuedInfonce, ..cfg.clone() }, &train, &pre, &mut ()).unwrap();
            core_time += clock.elapsed();

            let arm = |c: RunConfig| eval(&unlearn(&c, &train, &hn, &mut ()).unwrap());
            let fp_only = arm(RunConfig { fp_only: true, ..cfg.clone() });
            let fn_only = arm(RunConfig { fn_only: true, ..cfg.clone() });
            let quarter = {
                let c = RunConfig { data_fraction: 0.25, ..cfg.clone() };
                let hn_q = learn_negatives(&c, &train, &pre, &mut ()).unwrap();
                eval(&unlearn(&c, &train, &hn_q, &mut ()).unwrap())
            };
            let ga = unlearn(&RunConfig { mode: Mode::GradientAscent, ..cfg.clone() }, &train, &pre, &mut ()).unwrap();
            seeds.push(SeedRun {
                pre: eval(&pre),
                ncu: eval(&ncu),
                fp_only,
                fn_only,
                quarter,
                ci: eval(&ci),
                ga: eval(&ga),
            });
        }
        Runs { seeds, core_time }
    })
}

fn mean_r1(pick: impl Fn(&SeedRun) -> &MetricsReport) -> f64 {
    let s = &runs().seeds;
    s.iter().map(|r| pick(r).image_to_text.r1).sum::<f64>() / s.len() as f64
}

fn random_instance(rng: &mut ChaCha8Rng, n: usize, eps: f64) -> TransportProblem {
    let fg: Vec<usize> = (0..n).filter(|_| rng.random_bool(0.4)).collect();
    let fg = if fg.is_empty() { vec![rng.random_range(0..n)] } else { fg };
    let mask = build_mask(&BatchPartition::from_forget_set(n, &fg), n).unwrap();
    let cost = Matrix::from_fn(n, n + 1, |_, _| rng.random_range(0.0..2.0));
    TransportProblem::uniform(cost, mask, eps).unwrap()
}

#[test]
fn criterion_1_masked_sinkhorn_matches_the_lp() {
    let _guard = exclusive();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let cfg = SinkhornConfig { max_iters: 200_000, tol: 1e-9 };
    let clock = Instant::now();
    let (mut worst_gap, mut worst_res, mut masked_nonzero) = (0.0f64, 0.0f64, 0);
    for _ in 0..50 {
        let n = rng.random_range(2..=4);
        let prob = random_instance(&mut rng, n, 1e-3);
        let sol = masked_sinkhorn(&prob, &cfg).unwrap();
        let (_, opt) = exact_ot_oracle(&prob.cost, &prob.mask, &prob.mu, &prob.nu).unwrap();
        let got = transport_cost(&sol.plan, &prob.cost);
        worst_gap = worst_gap.max((got - opt).abs() / opt.abs().max(1e-12));
        worst_res = worst_res.max(marginal_residual(&sol.plan, &prob.mu, &prob.nu));
        masked_nonzero += sol.plan.as_slice().iter().zip(prob.mask.as_slice()).filter(|&(&p, &m)| m == 0.0 && p != 0.0).count();
    }
    let secs = clock.elapsed().as_secs_f64();
    let pass = worst_gap <= 0.01 && worst_res <= 1e-9 && masked_nonzero == 0 && secs < 10.0;
    report(
        1,
        pass,
        format!("worst cost gap {worst_gap:.2e}, residual {worst_res:.2e}, nonzero masked cells {masked_nonzero}, {secs:.2} s"),
    );
    assert!(pass);
}

#[test]
fn criterion_2_forced_plan_is_exact() {
    let _guard = exclusive();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let expected = Matrix::from_rows(&[vec![0.0, 1.0 / 6.0, 1.0 / 3.0], vec![1.0 / 3.0, 1.0 / 6.0, 0.0]]).unwrap();
    let run = RunConfig::default();
    let mask = build_mask(&BatchPartition::from_forget_set(2, &[0]), 2).unwrap();
    let clock = Instant::now();
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let cost = Matrix::from_fn(2, 3, |_, _| rng.random_range(0.0..2.0));
        let prob = TransportProblem::uniform(cost, mask.clone(), run.epsilon).unwrap();
        let sol = masked_sinkhorn(&prob, &run.sinkhorn()).unwrap();
        worst = worst.max(sol.plan.max_abs_diff(&expected));
    }
    let secs = clock.elapsed().as_secs_f64();
    let pass = worst <= 1e-9 && secs < 1.0;
    report(2, pass, format!("worst deviation {worst:.2e}, {secs:.3} s"));
    assert!(pass);
}

#[test]
fn criterion_3_gradient_suite() {
    let _guard = exclusive();
    let clock = Instant::now();
    let errors: Vec<(&str, f64)> = common::grad::cases().iter().map(|c| (c.name, common::grad::check_case(c))).collect();
    let secs = clock.elapsed().as_secs_f64();
    let (name, worst) = errors.iter().copied().fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let pass = worst < common::grad::MAX_REL_ERROR && secs < 60.0;
    report(3, pass, format!("{} losses, worst relative error {worst:.2e} ({name}), {secs:.2} s", errors.len()));
    assert!(pass, "{errors:?}");
}

#[test]
fn criterion_4_partition_contract() {
    let _guard = exclusive();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let clock = Instant::now();
    let mut failures = Vec::new();
    for trial in 0..1000 {
        let n = rng.random_range(2..=512);
        let p = [1usize, 5, 10, 25][rng.random_range(0..4)];
        // A coarse grid half the time forces ties.
        let coarse = rng.random_bool(0.5);
        let omega: Vec<f64> =
            (0..n).map(|_| if coarse { rng.random_range(0..4) as f64 / 4.0 } else { rng.random::<f64>() }).collect();
        let part = partition_batch(&omega, p as f64).unwrap();

        let k = (p * n / 100).max(1);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| omega[a].total_cmp(&omega[b]).then(a.cmp(&b)));
        let mut want = order[..k].to_vec();
        want.sort_unstable();

        let fg_max = part.fg_indices.iter().map(|&i| omega[i]).fold(f64::NEG_INFINITY, f64::max);
        let rt_min = part.rt_indices.iter().map(|&i| omega[i]).fold(f64::INFINITY, f64::min);
        let ok = part.fg_indices.len() == k
            && forget_count(n, p as f64) == k
            && part.fg_indices.len() + part.rt_indices.len() == n
            && fg_max <= rt_min
            && part.fg_indices == want;
        if !ok {
            failures.push((trial, n, p));
        }
    }
    let secs = clock.elapsed().as_secs_f64();
    let pass = failures.is_empty() && secs < 5.0;
    report(4, pass, format!("{} of 1000 partitions violate the contract, {secs:.3} s", failures.len()));
    assert!(pass, "{failures:?}");
}

#[test]
fn criterion_5_ncu_beats_pretrain_and_continued_infonce() {
    let _guard = exclusive();
    let r = runs();
    let (ncu, pre, ci) = (mean_r1(|s| &s.ncu), mean_r1(|s| &s.pre), mean_r1(|s| &s.ci));
    let secs = r.core_time.as_secs_f64();
    let pass = ncu - pre >= 3.0 && ncu - ci >= 3.0 && secs < 600.0;
    report(
        5,
        pass,
        format!("R@1 NCU {ncu:.2}, pretrain {pre:.2} ({:+.2}), continued InfoNCE {ci:.2} ({:+.2}); {secs:.0} s", ncu - pre, ncu - ci),
    );
    assert!(pass);
}

#[test]
fn criterion_6_baseline_ordering() {
    let _guard = exclusive();
    let (ncu, ga, ci) = (mean_r1(|s| &s.ncu), mean_r1(|s| &s.ga), mean_r1(|s| &s.ci));
    let pass = ncu >= ga - 0.5 && ga >= ci - 0.5;
    report(6, pass, format!("R@1 NCU {ncu:.2}, gradient ascent {ga:.2}, continued InfoNCE {ci:.2}"));
    assert!(pass);
}

#[test]
fn criterion_7_separation_grows() {
    let _guard = exclusive();
    let deltas: Vec<f64> =
        runs().seeds.iter().map(|s| s.ncu.similarity.separation - s.pre.similarity.separation).collect();
    let up = deltas.iter().filter(|&&d| d > 0.0).count();
    let pass = up >= 4;
    report(7, pass, format!("separation up in {up} of {SEEDS} seeds, deltas {deltas:.4?}"));
    assert!(pass);
}

#[test]
fn criterion_8_partial_data() {
    let _guard = exclusive();
    let (full, quarter, pre) = (mean_r1(|s| &s.ncu), mean_r1(|s| &s.quarter), mean_r1(|s| &s.pre));
    let pass = quarter - pre >= 1.0 && full >= quarter;
    report(8, pass, format!("R@1 25% data {quarter:.2} ({:+.2} over pretrain {pre:.2}), full data {full:.2}", quarter - pre));
    assert!(pass);
}

#[test]
fn criterion_9_ablation_direction() {
    let _guard = exclusive();
    let (full, fp, fn_, pre) = (mean_r1(|s| &s.ncu), mean_r1(|s| &s.fp_only), mean_r1(|s| &s.fn_only), mean_r1(|s| &s.pre));
    let pass = fp > pre && fn_ > pre && fp < full && fn_ < full && fp >= fn_;
    report(9, pass, format!("R@1 pretrain {pre:.2}, fp_only {fp:.2}, fn_only {fn_:.2}, full {full:.2}"));
    assert!(pass);
}

#[test]
fn criterion_10_determinism_and_formats() {
    let _guard = exclusive();
    let dir = tempfile::tempdir().unwrap();
    let mut problems = Vec::new();

    // Rerun seed 0 end to end and compare with the shared run bit for bit.
    let g = GenConfig::default();
    let train = generate(&g).unwrap();
    let test = generate_test(&g, HELD_OUT_PER_CLASS).unwrap();
    let cfg = ncu_config(0);
    let pre = pretrain(&cfg, &train, &mut ()).unwrap();
    let hn = learn_negatives(&cfg, &train, &pre, &mut ()).unwrap();
    let ncu = unlearn(&cfg, &train, &hn, &mut ()).unwrap();
    let bits = |m: &MetricsReport| serde_json::to_string(m).unwrap();
    let shared = &runs().seeds[0];
    if bits(&evaluate(&ncu, &test).unwrap()) != bits(&shared.ncu) || bits(&evaluate(&pre, &test).unwrap()) != bits(&shared.pre) {
        problems.push("metrics differ between identical runs");
    }

    let data_path = dir.path().join("train.ncud");
    save_dataset(&train, &data_path).unwrap();
    let loaded = load_dataset(&data_path).unwrap();
    let again = dir.path().join("again.ncud");
    save_dataset(&loaded, &again).unwrap();
    if loaded != train || std::fs::read(&data_path).unwrap() != std::fs::read(&again).unwrap() {
        problems.push("dataset round trip is not bitwise");
    }

    let ckpt_path = dir.path().join("ncu.ckpt");
    save_checkpoint(&ncu, &ckpt_path).unwrap();
    let loaded = load_checkpoint(&ckpt_path).unwrap();
    let again = dir.path().join("again.ckpt");
    save_checkpoint(&loaded, &again).unwrap();
    if loaded != ncu || std::fs::read(&ckpt_path).unwrap() != std::fs::read(&again).unwrap() {
        problems.push("checkpoint round trip is not bitwise");
    }

    for path in [&data_path, &ckpt_path] {
        let mut bytes = std::fs::read(path).unwrap();
        bytes[0] ^= 0xff;
        std::fs::write(path, bytes).unwrap();
    }
    if load_dataset(&data_path).is_ok() || load_checkpoint(&ckpt_path).is_ok() {
        problems.push("corrupted magic accepted");
    }

    let pass = problems.is_empty();
    report(10, pass, if pass { "bitwise rerun, round trips and magic checks hold".into() } else { problems.join("; ") });
    assert!(pass);
}
