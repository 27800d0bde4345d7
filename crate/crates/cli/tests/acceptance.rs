//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits non-zero
//! if any fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use ndarray::{Array2, Array3, Axis};
use otadapt::adapt::{template_code, AdaptConfig, Adapter, Variant};
use otadapt::data::SyntheticShiftSpec;
use otadapt::encoder::{LayerNormState, Targets, ToyEncoder, ToyEncoderSpec};
use otadapt::eval::{prepare_synthetic, run_grid, ExperimentGrid, ResultRow, Scenario};
use otadapt::ot::{marginal_residuals, sinkhorn, SimilarityMatrix, SinkhornConfig, Stabilization};
use otadapt::prototypes::build_bank;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Learning rate for the synthetic end-to-end experiments. The library
/// default (1e-4) barely moves the toy LayerNorm parameters in 20 batches.
const EXPERIMENT_LR: f64 = 1e-2;
const SEEDS: [u64; 3] = [0, 1, 2];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn uniform_matrix(k: usize, b: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((k, b), |_| rng.random_range(lo..=hi))
}

// Sinkhorn feasibility

fn sinkhorn_feasibility() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    let short = SinkhornConfig::new(0.7, 3);
    let long = SinkhornConfig::new(0.7, 500);
    let (mut worst_row, mut worst_mass, mut worst_long): (f64, f64, f64) = (0.0, 0.0, 0.0);
    let mut negative = 0;
    for _ in 0..1000 {
        let k = rng.random_range(2..=32);
        let b = rng.random_range(1..=32);
        let sim = SimilarityMatrix::new(uniform_matrix(k, b, -1.0, 1.0, &mut rng)).unwrap();
        let plan = sinkhorn(&sim, &short).unwrap();
        negative += plan.q().iter().filter(|&&x| x < 0.0).count();
        for row in plan.q().axis_iter(Axis(0)) {
            worst_row = worst_row.max((row.sum() - 1.0 / k as f64).abs());
        }
        worst_mass = worst_mass.max((plan.q().sum() - 1.0).abs());
        let (r, c) = marginal_residuals(&sinkhorn(&sim, &long).unwrap());
        worst_long = worst_long.max(r).max(c);
    }
    let elapsed = started.elapsed();
    outcome(
        negative == 0 && worst_row <= 1e-12 && worst_mass <= 1e-9 && worst_long < 1e-8 && elapsed < Duration::from_secs(10),
        format!(
            "1000 instances: negative entries {negative}, max row dev {worst_row:.1e}, max |mass-1| {worst_mass:.1e}, T=500 max residual {worst_long:.1e}, {:.2}s",
            elapsed.as_secs_f64()
        ),
    )
}

// Oracle equivalence

/// Alternating KL projections applied to the matrix itself: normalise the
/// Gibbs kernel, then rescale rows to 1/K and columns to 1/B until both hold.
fn projection_oracle(s: &Array2<f64>, eps: f64) -> Array2<f64> {
    let (k, b) = s.dim();
    let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut q = s.mapv(|x| ((x - max) / eps).exp());
    let total = q.sum();
    q /= total;
    for _ in 0..100_000 {
        for mut row in q.axis_iter_mut(Axis(0)) {
            let sum = row.sum();
            row *= 1.0 / (k as f64 * sum);
        }
        let mut col_err: f64 = 0.0;
        for mut col in q.axis_iter_mut(Axis(1)) {
            let sum = col.sum();
            col_err = col_err.max((sum - 1.0 / b as f64).abs());
            col *= 1.0 / (b as f64 * sum);
        }
        if col_err < 1e-15 {
            break;
        }
    }
    q
}

fn oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2000);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let k = rng.random_range(2..=5);
        let b = rng.random_range(1..=8);
        let eps = rng.random_range(0.2..=1.5);
        let s = uniform_matrix(k, b, -1.0, 1.0, &mut rng);
        let plan = sinkhorn(&SimilarityMatrix::new(s.clone()).unwrap(), &SinkhornConfig::new(eps, 5000)).unwrap();
        let oracle = projection_oracle(&s, eps);
        for (a, o) in plan.q().iter().zip(oracle.iter()) {
            worst = worst.max((a - o).abs());
        }
    }
    outcome(worst <= 1e-6, format!("200 instances (K<=5, B<=8, eps in [0.2, 1.5]): max |Q - oracle| {worst:.1e}"))
}

// epsilon-limit assignment

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

fn epsilon_limit() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3000);
    let eps = 0.01;
    let cfg = SinkhornConfig::new(eps, 20_000).with_stabilization(Stabilization::LogDomain);
    let (mut done, mut matched, mut rejected) = (0, 0, 0);
    let mut min_gap = f64::INFINITY;
    while done < 50 {
        let n = [3, 4, 5][done % 3];
        let s = uniform_matrix(n, n, -1.0, 1.0, &mut rng);
        // assignment[j] = class of column j; tr(Q^T S) of the scaled permutation
        let mut scored: Vec<(f64, Vec<usize>)> = permutations(n)
            .into_iter()
            .map(|p| ((0..n).map(|j| s[[p[j], j]]).sum::<f64>(), p))
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0));
        let gap = scored[0].0 - scored[1].0;
        // an optimum that the entropic plan at this epsilon cannot separate
        // from the runner-up is not unique in any numerical sense
        if gap < eps {
            rejected += 1;
            continue;
        }
        min_gap = min_gap.min(gap);
        let plan = sinkhorn(&SimilarityMatrix::new(s).unwrap(), &cfg).unwrap();
        if plan.hard_assignment() == scored[0].1 {
            matched += 1;
        }
        done += 1;
    }
    let elapsed = started.elapsed();
    outcome(
        matched == 50 && elapsed < Duration::from_secs(5),
        format!(
            "{matched}/50 match enumeration (K=B in 3..5, log-domain eps=0.01; {rejected} draws with optimality gap < eps skipped, min gap kept {min_gap:.3}), {:.2}s",
            elapsed.as_secs_f64()
        ),
    )
}

// Gradient correctness

fn central_difference(f: impl Fn(&[f64]) -> f64, at: &[f64], h: f64) -> Vec<f64> {
    let mut work = at.to_vec();
    (0..at.len())
        .map(|i| {
            work[i] = at[i] + h;
            let up = f(&work);
            work[i] = at[i] - h;
            let down = f(&work);
            work[i] = at[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Elementwise relative error. Components below the oracle's resolution
/// (about eps_mach * |L| / h, ~1e-10 here) have no meaningful relative error,
/// so the denominator is floored at 1e-5, five orders above that noise.
fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-5))
        .fold(0.0, f64::max)
}

fn gradient_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4000);
    let (mut worst_ce, mut worst_ent): (f64, f64) = (0.0, 0.0);
    let mut unresolved = 0;
    for instance in 0..100u64 {
        let spec = ToyEncoderSpec {
            d_in: rng.random_range(2..=8),
            d_hidden: 2 * rng.random_range(1..=5),
            d_out: rng.random_range(2..=6),
            layers: rng.random_range(1..=3),
            seed: instance,
        };
        let encoder = ToyEncoder::new(spec).unwrap();
        let k = rng.random_range(2..=5);
        let m = rng.random_range(1..=3);
        let b = rng.random_range(1..=6);
        let bank = build_bank(Array3::from_shape_fn((spec.d_out, k, m), |_| rng.random_range(-1.0..1.0))).unwrap();
        let x = uniform_matrix(spec.d_in, b, -1.0, 1.0, &mut rng);
        let identity = encoder.identity_state();
        let ln: LayerNormState = identity.with_values(
            &identity
                .to_vec()
                .iter()
                .map(|v| v + rng.random_range(-0.3..0.3))
                .collect::<Vec<_>>(),
        );
        // below ~0.05 random prototypes give logit spreads of ~100 and the
        // softmax is one-hot to machine precision, leaving nothing to check
        let tau = 10f64.powf(rng.random_range(0.05f64.log10()..0.0));
        let mut q = uniform_matrix(k, b, 0.01, 1.0, &mut rng);
        for mut col in q.axis_iter_mut(Axis(1)) {
            let s = col.sum();
            col /= s;
        }
        let targets = Targets::new(q).unwrap();

        let (_, grads) = encoder.loss_and_grad(&ln, x.view(), &targets, &bank, tau).unwrap();
        let numeric = central_difference(
            |v| encoder.cross_entropy(&ln.with_values(v), x.view(), &targets, &bank, tau).unwrap(),
            &ln.to_vec(),
            1e-5,
        );
        unresolved += usize::from(numeric.iter().all(|n| n.abs() < 1e-5));
        worst_ce = worst_ce.max(max_rel_err(&grads.to_vec(), &numeric));

        let (_, grads) = encoder.entropy_and_grad(&ln, x.view(), &bank, tau).unwrap();
        let numeric = central_difference(
            |v| encoder.entropy(&ln.with_values(v), x.view(), &bank, tau).unwrap(),
            &ln.to_vec(),
            1e-5,
        );
        worst_ent = worst_ent.max(max_rel_err(&grads.to_vec(), &numeric));
    }
    outcome(
        worst_ce < 1e-4 && worst_ent < 1e-4 && unresolved == 0,
        format!(
            "100 instances, tau in [0.05, 1], h = 1e-5: max rel err pseudo-CE {worst_ce:.1e}, entropy {worst_ent:.1e} ({unresolved} instances with every pseudo-CE component below 1e-5)"
        ),
    )
}

// Synthetic experiments

fn experiment_base() -> AdaptConfig {
    AdaptConfig {
        lr: EXPERIMENT_LR,
        ..AdaptConfig::default()
    }
}

fn row(rows: &[ResultRow], variant: Variant, templates: usize) -> &ResultRow {
    rows.iter()
        .find(|r| r.variant == variant && r.templates == templates)
        .expect("grid row")
}

fn anti_collapse() -> Outcome {
    // exact class mass of every per-template code, on every batch
    let mut worst_mass: f64 = 0.0;
    let mut checked = 0;
    for seed in SEEDS {
        let spec = SyntheticShiftSpec::default().with_seed(seed);
        let setup = prepare_synthetic(&spec, spec.templates, 128).unwrap();
        let mut adapter = Adapter::new(&setup.encoder, &setup.bank, experiment_base().with_seed(seed)).unwrap();
        for batch in &setup.batches {
            let result = adapter.step(batch.inputs.view()).unwrap();
            let ideal = batch.len() as f64 / spec.classes as f64;
            for mass in &result.code_class_mass {
                for m in mass {
                    worst_mass = worst_mass.max((m - ideal).abs());
                    checked += 1;
                }
            }
        }
    }

    let grid = ExperimentGrid::new(Scenario::Synthetic(SyntheticShiftSpec::dominant_cluster()))
        .with_variants(vec![Variant::ClipOt, Variant::Tent, Variant::ZeroShot])
        .with_seeds(SEEDS.to_vec())
        .with_base(experiment_base());
    let rows = run_grid(&grid, 0).unwrap();
    let m = SyntheticShiftSpec::dominant_cluster().templates;
    let clip = row(&rows, Variant::ClipOt, m).final_collapse_mean;
    let tent = row(&rows, Variant::Tent, m).final_collapse_mean;
    let zero = row(&rows, Variant::ZeroShot, m).final_collapse_mean;
    outcome(
        worst_mass <= 1e-12 && clip < tent,
        format!(
            "{checked} class masses, max |mass - B/K| {worst_mass:.1e}; dominant-cluster last-batch max class share: clip_ot {clip:.3} < tent {tent:.3} (zero_shot {zero:.3})"
        ),
    )
}

fn end_to_end_and_templates() -> (Outcome, Outcome) {
    let started = Instant::now();
    let grid = ExperimentGrid::new(Scenario::Synthetic(SyntheticShiftSpec::default()))
        .with_variants(vec![Variant::ZeroShot, Variant::TrainingFree, Variant::AvgTemplate, Variant::ClipOt])
        .with_template_counts(vec![1, 8])
        .with_seeds(SEEDS.to_vec())
        .with_base(experiment_base());
    let rows = run_grid(&grid, 0).unwrap();
    let elapsed = started.elapsed();
    let acc = |v| row(&rows, v, 8).accuracy_mean;
    let (zero, free, avg, clip) = (
        acc(Variant::ZeroShot),
        acc(Variant::TrainingFree),
        acc(Variant::AvgTemplate),
        acc(Variant::ClipOt),
    );
    let e2e = outcome(
        zero < free && free <= avg && avg <= clip && clip - zero >= 2.0 && elapsed < Duration::from_secs(120),
        format!(
            "zero_shot {zero:.2} < training_free {free:.2} <= avg_template {avg:.2} <= clip_ot {clip:.2}, margin {:.2} (>= 2), {:.1}s",
            clip - zero,
            elapsed.as_secs_f64()
        ),
    );
    let one = row(&rows, Variant::ClipOt, 1).accuracy_mean;
    let trend = outcome(
        clip >= one,
        format!(
            "clip_ot M=8 {clip:.2} >= M=1 {one:.2} (training_free {:.2} vs {:.2})",
            free,
            row(&rows, Variant::TrainingFree, 1).accuracy_mean
        ),
    );
    (e2e, trend)
}

fn stability_contract() -> Outcome {
    let spec = SyntheticShiftSpec::default();
    let setup = prepare_synthetic(&spec, spec.templates, 128).unwrap();
    let mut notes = Vec::new();
    let mut pass = true;

    for variant in [Variant::ClipOt, Variant::TrainingFree, Variant::AvgTemplate] {
        let plain = AdaptConfig {
            epsilon: 0.05,
            stabilization: Stabilization::Plain,
            ..experiment_base().with_variant(variant)
        };
        let mut adapter = Adapter::new(&setup.encoder, &setup.bank, plain).unwrap();
        let mut errors = 0;
        for batch in &setup.batches {
            match adapter.step(batch.inputs.view()) {
                Ok(r) => pass &= r.predictions.p().iter().all(|p| p.is_finite()),
                Err(e) => {
                    pass &= e.code() == "non_finite_kernel";
                    errors += 1;
                }
            }
        }
        pass &= errors == setup.batches.len();
        notes.push(format!("{variant} plain: {errors}/{} structured errors", setup.batches.len()));

        let log = AdaptConfig {
            epsilon: 0.05,
            stabilization: Stabilization::LogDomain,
            ..experiment_base().with_variant(variant)
        };
        let mut adapter = Adapter::new(&setup.encoder, &setup.bank, log).unwrap();
        let mut finite = true;
        for batch in &setup.batches {
            match adapter.step(batch.inputs.view()) {
                Ok(r) => finite &= r.predictions.p().iter().all(|p| p.is_finite()) && r.loss_trace.iter().all(|l| l.is_finite()),
                Err(_) => finite = false,
            }
        }
        pass &= finite;
        notes.push(format!("log_domain finite={finite}"));
    }

    // the solver alone, on the logits of the first batch
    let z = setup.encoder.forward(&setup.encoder.identity_state(), setup.batches[0].inputs.view()).unwrap();
    let log_cfg = SinkhornConfig::new(0.05, 3).with_stabilization(Stabilization::LogDomain);
    let code = template_code(&setup.bank, 0, &z, &log_cfg, 0.01).unwrap();
    let ideal = z.len() as f64 / setup.bank.classes() as f64;
    let mass_err = code.class_mass().iter().fold(0.0f64, |w, m| w.max((m - ideal).abs()));
    let mass_ok = mass_err <= 1e-12;
    pass &= code.q().iter().all(|x| x.is_finite()) && mass_ok;
    let plain_cfg = SinkhornConfig::new(0.05, 3).with_stabilization(Stabilization::Plain);
    let direct = template_code(&setup.bank, 0, &z, &plain_cfg, 0.01);
    pass &= direct.as_ref().is_err_and(|e| e.code() == "non_finite_kernel");
    outcome(pass, format!("eps=0.05: {}; direct log-domain solver on logits max |mass - B/K| {mass_err:.1e}, plain errors={}", notes.join(", "), direct.is_err()))
}

fn cli_determinism() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_otadapt");
    let dir = tempfile::tempdir().unwrap();
    let run = |out: &Path| {
        Command::new(bin)
            .args([
                "sweep",
                "--synthetic",
                "default",
                "--variants",
                "zero_shot,training_free,avg_template,clip_ot,tent",
                "--epsilons",
                "0.05,0.7",
                "--seeds",
                "1,2",
                "--lr",
                "1e-2",
                "--jobs",
                "4",
                "--out",
            ])
            .arg(out)
            .output()
            .unwrap()
    };
    // same output path both times, so the summary lines are comparable
    let out = dir.path().join("sweep");
    let ra = run(&out);
    let ca = std::fs::read(out.join("results.csv")).unwrap_or_default();
    std::fs::remove_dir_all(&out).ok();
    let rb = run(&out);
    if !ra.status.success() || !rb.status.success() {
        return outcome(false, format!("sweep failed: {}", String::from_utf8_lossy(&ra.stderr)));
    }
    let cb = std::fs::read(out.join("results.csv")).unwrap();
    let stdout_same = ra.stdout == rb.stdout;
    outcome(
        ca == cb && stdout_same && !ca.is_empty(),
        format!(
            "two sweeps (10 rows, 2 seeds, 4 threads): results.csv {} bytes, identical={}, summary identical={stdout_same}",
            ca.len(),
            ca == cb
        ),
    )
}

fn main() {
    let started = Instant::now();
    let mut results: Vec<(&str, Outcome)> = vec![
        ("sinkhorn_feasibility", sinkhorn_feasibility()),
        ("oracle_equivalence", oracle_equivalence()),
        ("epsilon_limit_assignment", epsilon_limit()),
        ("gradient_correctness", gradient_correctness()),
        ("anti_collapse", anti_collapse()),
    ];
    let (e2e, trend) = end_to_end_and_templates();
    results.push(("end_to_end_improvement", e2e));
    results.push(("template_trend", trend));
    results.push(("stability_contract", stability_contract()));
    results.push(("cli_determinism", cli_determinism()));

    let mut failed = 0;
    for (name, o) in &results {
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    println!(
        "acceptance: {} passed, {failed} failed ({:.1}s)",
        results.len() - failed,
        started.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
