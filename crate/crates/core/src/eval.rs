//! Seeded experiment grids over variants, epsilons, template counts and shift
//! severities, with markdown and CSV reports.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use ndarray::{s, Array2};
use rayon::prelude::*;
use thiserror::Error;

use crate::adapt::{accuracy, collapse_metric, step_embeddings, AdaptConfig, AdaptError, Adapter, Variant};
use crate::data::{generate_synthetic, read_embedding_file, DataError, LabeledBatch, LoadedEmbeddings, SyntheticShiftSpec};
use crate::encoder::{EmbeddingBatch, ToyEncoder, ToyEncoderSpec};
use crate::prototypes::PrototypeBank;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
    #[error("thread pool: {0}")]
    ThreadPool(#[from] rayon::ThreadPoolBuildError),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Scenario {
    Synthetic(SyntheticShiftSpec),
    /// Exported embeddings with prototypes and labels. Only `zero_shot` and
    /// `training_free` run on these.
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentGrid {
    pub variants: Vec<Variant>,
    pub epsilons: Vec<f64>,
    pub template_counts: Vec<usize>,
    pub severities: Vec<f64>,
    pub seeds: Vec<u64>,
    pub scenario: Scenario,
    /// Everything not swept (iterations, lr, tau, batch size, stabilization).
    pub base: AdaptConfig,
}

impl ExperimentGrid {
    /// All variants at the base config over three seeds, on one scenario.
    pub fn new(scenario: Scenario) -> Self {
        let base = AdaptConfig::default();
        let (templates, severity) = match &scenario {
            Scenario::Synthetic(spec) => (spec.templates, spec.severity),
            Scenario::File(_) => (0, 0.0),
        };
        Self {
            variants: Variant::ALL.to_vec(),
            epsilons: vec![base.epsilon],
            template_counts: if templates > 0 { vec![templates] } else { Vec::new() },
            severities: vec![severity],
            seeds: vec![0, 1, 2],
            scenario,
            base,
        }
    }

    pub fn with_variants(mut self, variants: Vec<Variant>) -> Self {
        self.variants = variants;
        self
    }

    pub fn with_epsilons(mut self, epsilons: Vec<f64>) -> Self {
        self.epsilons = epsilons;
        self
    }

    pub fn with_template_counts(mut self, counts: Vec<usize>) -> Self {
        self.template_counts = counts;
        self
    }

    pub fn with_severities(mut self, severities: Vec<f64>) -> Self {
        self.severities = severities;
        self
    }

    pub fn with_seeds(mut self, seeds: Vec<u64>) -> Self {
        self.seeds = seeds;
        self
    }

    pub fn with_base(mut self, base: AdaptConfig) -> Self {
        self.base = base;
        self
    }

    /// Number of result rows: the product of every swept list except seeds.
    pub fn cells(&self) -> usize {
        self.variants.len() * self.epsilons.len() * self.template_counts.len() * self.severities.len()
    }

    fn validate(&self, available_templates: usize) -> Result<(), EvalError> {
        let fail = |m: String| Err(EvalError::InvalidGrid(m));
        for (name, len) in [
            ("variants", self.variants.len()),
            ("epsilons", self.epsilons.len()),
            ("template_counts", self.template_counts.len()),
            ("severities", self.severities.len()),
            ("seeds", self.seeds.len()),
        ] {
            if len == 0 {
                return fail(format!("{name} is empty"));
            }
        }
        if let Some(&m) = self.template_counts.iter().find(|&&m| m == 0 || m > available_templates) {
            return fail(format!("template count {m} outside [1, {available_templates}]"));
        }
        if let Scenario::File(_) = self.scenario {
            if self.severities.len() != 1 {
                return fail("a file scenario has a single, fixed severity".into());
            }
        }
        self.base
            .validate()
            .map_err(|e| EvalError::InvalidGrid(e.to_string()))
    }
}

/// Error marker kept in place of a failed cell.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellError {
    pub code: String,
    pub message: String,
}

impl From<AdaptError> for CellError {
    fn from(e: AdaptError) -> Self {
        Self {
            code: e.code().to_string(),
            message: e.to_string(),
        }
    }
}

impl From<DataError> for CellError {
    fn from(e: DataError) -> Self {
        Self {
            code: "data".to_string(),
            message: e.to_string(),
        }
    }
}

/// Outcome of one full stream.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamOutcome {
    /// Percent correct over every post-adaptation prediction.
    pub accuracy: f64,
    /// Largest class share among all hard labels of the stream.
    pub collapse: f64,
    /// Largest class share in the last batch.
    pub final_collapse: f64,
    pub batches: usize,
    /// Largest deviation of any code's per-class mass from `B/K`, relative to
    /// `B/K`, over all batches and templates.
    pub max_code_mass_error: f64,
    pub wall_time: Duration,
}

fn summarize(
    predicted: Vec<Vec<usize>>,
    truth: Vec<Vec<usize>>,
    classes: usize,
    mass_error: f64,
    started: Instant,
) -> StreamOutcome {
    let final_collapse = predicted.last().map_or(0.0, |l| collapse_metric(l, classes));
    let predicted: Vec<usize> = predicted.into_iter().flatten().collect();
    let truth: Vec<usize> = truth.into_iter().flatten().collect();
    StreamOutcome {
        accuracy: accuracy(&predicted, &truth),
        collapse: collapse_metric(&predicted, classes),
        final_collapse,
        batches: 0,
        max_code_mass_error: mass_error,
        wall_time: started.elapsed(),
    }
}

fn code_mass_error(result: &crate::adapt::BatchResult, classes: usize) -> f64 {
    let ideal = result.hard_labels.len() as f64 / classes as f64;
    result
        .code_class_mass
        .iter()
        .flat_map(|m| m.iter().map(move |x| (x - ideal).abs() / ideal))
        .fold(0.0, f64::max)
}

/// Runs one variant over a synthetic stream from a fresh (identity) state.
pub fn run_stream(
    encoder: &ToyEncoder,
    bank: &PrototypeBank,
    batches: &[LabeledBatch],
    cfg: &AdaptConfig,
) -> Result<StreamOutcome, AdaptError> {
    let started = Instant::now();
    let mut adapter = Adapter::new(encoder, bank, cfg.clone())?;
    let mut predicted = Vec::with_capacity(batches.len());
    let mut truth = Vec::with_capacity(batches.len());
    let mut mass_error: f64 = 0.0;
    for batch in batches {
        let result = adapter.step(batch.inputs.view())?;
        mass_error = mass_error.max(code_mass_error(&result, bank.classes()));
        predicted.push(result.hard_labels);
        truth.push(batch.labels.clone());
    }
    let mut outcome = summarize(predicted, truth, bank.classes(), mass_error, started);
    outcome.batches = batches.len();
    Ok(outcome)
}

/// Runs `zero_shot` or `training_free` over fixed labelled embeddings, in
/// consecutive batches of `cfg.batch_size`.
pub fn run_embedding_stream(
    bank: &PrototypeBank,
    items: &Array2<f64>,
    labels: &[usize],
    cfg: &AdaptConfig,
) -> Result<StreamOutcome, CellError> {
    let started = Instant::now();
    cfg.validate()?;
    let n = items.ncols();
    let mut predicted = Vec::new();
    let mut truth = Vec::new();
    let mut mass_error: f64 = 0.0;
    let mut start = 0;
    while start < n {
        let end = (start + cfg.batch_size).min(n);
        let z = EmbeddingBatch::normalized(items.slice(s![.., start..end]).to_owned())
            .map_err(|e| CellError::from(AdaptError::from(e)))?;
        let result = step_embeddings(bank, &z, cfg)?;
        mass_error = mass_error.max(code_mass_error(&result, bank.classes()));
        predicted.push(result.hard_labels);
        truth.push(labels[start..end].to_vec());
        start = end;
    }
    let batches = predicted.len();
    let mut outcome = summarize(predicted, truth, bank.classes(), mass_error, started);
    outcome.batches = batches;
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    pub outcome: Result<StreamOutcome, CellError>,
}

/// One grid point, aggregated over seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub variant: Variant,
    pub epsilon: f64,
    pub templates: usize,
    pub severity: f64,
    pub per_seed: Vec<SeedResult>,
    pub accuracy_mean: f64,
    /// Sample standard deviation (`n - 1`); zero for a single seed.
    pub accuracy_std: f64,
    pub collapse_mean: f64,
    pub final_collapse_mean: f64,
    pub wall_time_mean: f64,
    /// First failing seed's error; aggregates are NaN when set.
    pub error: Option<CellError>,
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

pub fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
}

impl ResultRow {
    fn aggregate(variant: Variant, epsilon: f64, templates: usize, severity: f64, per_seed: Vec<SeedResult>) -> Self {
        let error = per_seed.iter().find_map(|s| s.outcome.as_ref().err().cloned());
        let ok: Vec<&StreamOutcome> = per_seed.iter().filter_map(|s| s.outcome.as_ref().ok()).collect();
        let field = |f: fn(&StreamOutcome) -> f64| -> Vec<f64> { ok.iter().map(|o| f(o)).collect() };
        let (accuracy_mean, accuracy_std, collapse_mean, final_collapse_mean) = if error.is_some() {
            (f64::NAN, f64::NAN, f64::NAN, f64::NAN)
        } else {
            let acc = field(|o| o.accuracy);
            (
                mean(&acc),
                sample_std(&acc),
                mean(&field(|o| o.collapse)),
                mean(&field(|o| o.final_collapse)),
            )
        };
        let times: Vec<f64> = ok.iter().map(|o| o.wall_time.as_secs_f64()).collect();
        Self {
            variant,
            epsilon,
            templates,
            severity,
            accuracy_mean,
            accuracy_std,
            collapse_mean,
            final_collapse_mean,
            wall_time_mean: if times.is_empty() { f64::NAN } else { mean(&times) },
            per_seed,
            error,
        }
    }

    pub fn seed_accuracies(&self) -> Vec<f64> {
        self.per_seed
            .iter()
            .filter_map(|s| s.outcome.as_ref().ok().map(|o| o.accuracy))
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
struct Cell {
    variant: Variant,
    epsilon: f64,
    templates: usize,
    severity: f64,
    seed: u64,
}

/// Everything one synthetic stream needs: the frozen encoder (seeded like the
/// data), the first `templates` templates of the bank, and the batches.
#[derive(Debug, Clone)]
pub struct SyntheticSetup {
    pub encoder: ToyEncoder,
    pub bank: PrototypeBank,
    pub batches: Vec<LabeledBatch>,
}

pub fn prepare_synthetic(
    spec: &SyntheticShiftSpec,
    templates: usize,
    batch_size: usize,
) -> Result<SyntheticSetup, CellError> {
    let scenario = generate_synthetic(spec, batch_size)?;
    let bank = scenario
        .bank
        .subset(&(0..templates).collect::<Vec<_>>())
        .map_err(|e| CellError::from(AdaptError::from(e)))?;
    let encoder = ToyEncoder::new(ToyEncoderSpec::for_dim(spec.d, spec.seed)).map_err(|e| CellError::from(AdaptError::from(e)))?;
    Ok(SyntheticSetup {
        encoder,
        bank,
        batches: scenario.batches,
    })
}

fn run_synthetic_cell(spec: &SyntheticShiftSpec, base: &AdaptConfig, cell: Cell) -> Result<StreamOutcome, CellError> {
    let spec = SyntheticShiftSpec {
        seed: cell.seed,
        severity: cell.severity,
        ..spec.clone()
    };
    let SyntheticSetup { encoder, bank, batches } = prepare_synthetic(&spec, cell.templates, base.batch_size)?;
    let cfg = AdaptConfig {
        variant: cell.variant,
        epsilon: cell.epsilon,
        seed: cell.seed,
        ..base.clone()
    };
    Ok(run_stream(&encoder, &bank, &batches, &cfg)?)
}

fn run_file_cell(data: &LoadedEmbeddings, base: &AdaptConfig, cell: Cell) -> Result<StreamOutcome, CellError> {
    let bank = data.bank.as_ref().expect("checked before the grid runs");
    let bank = bank
        .subset(&(0..cell.templates).collect::<Vec<_>>())
        .map_err(|e| CellError::from(AdaptError::from(e)))?;
    let labels = data.labels.as_deref().expect("checked before the grid runs");
    let cfg = AdaptConfig {
        variant: cell.variant,
        epsilon: cell.epsilon,
        seed: cell.seed,
        ..base.clone()
    };
    run_embedding_stream(&bank, &data.items, labels, &cfg)
}

/// Runs every grid point for every seed on up to `jobs` threads (0 picks the
/// default). Output order is the grid's nesting order (variant, epsilon,
/// templates, severity) regardless of scheduling.
pub fn run_grid(grid: &ExperimentGrid, jobs: usize) -> Result<Vec<ResultRow>, EvalError> {
    let file = match &grid.scenario {
        Scenario::Synthetic(spec) => {
            spec.validate()?;
            grid.validate(spec.templates)?;
            None
        }
        Scenario::File(path) => {
            let data = read_embedding_file(path)?;
            let templates = match &data.bank {
                Some(bank) => bank.templates(),
                None => return Err(EvalError::InvalidGrid(format!("{} has no prototype block", path.display()))),
            };
            if data.labels.is_none() {
                return Err(EvalError::InvalidGrid(format!("{} has no labels", path.display())));
            }
            grid.validate(templates)?;
            Some(data)
        }
    };

    let mut cells = Vec::new();
    for &variant in &grid.variants {
        for &epsilon in &grid.epsilons {
            for &templates in &grid.template_counts {
                for &severity in &grid.severities {
                    for &seed in &grid.seeds {
                        cells.push(Cell {
                            variant,
                            epsilon,
                            templates,
                            severity,
                            seed,
                        });
                    }
                }
            }
        }
    }

    let run = |cell: &Cell| -> SeedResult {
        let outcome = match (&grid.scenario, &file) {
            (Scenario::Synthetic(spec), _) => run_synthetic_cell(spec, &grid.base, *cell),
            (Scenario::File(_), Some(data)) => run_file_cell(data, &grid.base, *cell),
            (Scenario::File(_), None) => unreachable!("file loaded above"),
        };
        if let Err(e) = &outcome {
            log::warn!(
                "{} eps={} M={} severity={} seed={}: {}",
                cell.variant,
                cell.epsilon,
                cell.templates,
                cell.severity,
                cell.seed,
                e.message
            );
        }
        SeedResult {
            seed: cell.seed,
            outcome,
        }
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if jobs > 0 {
        builder = builder.num_threads(jobs);
    }
    let results: Vec<SeedResult> = builder.build()?.install(|| cells.par_iter().map(run).collect());

    let seeds = grid.seeds.len();
    Ok(cells
        .chunks(seeds)
        .zip(results.chunks(seeds))
        .map(|(cell, per_seed)| {
            let c = cell[0];
            ResultRow::aggregate(c.variant, c.epsilon, c.templates, c.severity, per_seed.to_vec())
        })
        .collect())
}

/// Rendered report: markdown tables, the main CSV and a per-seed timing CSV.
/// Only the timing CSV depends on wall-clock time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Report {
    pub markdown: String,
    pub csv: String,
    pub timings_csv: String,
}

pub const CSV_HEADER: [&str; 9] = [
    "variant",
    "epsilon",
    "templates",
    "severity",
    "seeds",
    "accuracy_mean",
    "accuracy_std",
    "collapse_mean",
    "final_collapse_mean",
];

fn err_cell(e: &CellError) -> String {
    format!("ERR({})", e.code)
}

pub fn render_report(rows: &[ResultRow]) -> Result<Report, EvalError> {
    if rows.is_empty() {
        return Err(EvalError::InvalidGrid("no rows to report".into()));
    }

    let mut csv = csv::Writer::from_writer(Vec::new());
    csv.write_record(CSV_HEADER)?;
    for row in rows {
        let seeds = row
            .per_seed
            .iter()
            .map(|s| s.seed.to_string())
            .collect::<Vec<_>>()
            .join(";");
        let stats = match &row.error {
            Some(e) => [err_cell(e), String::new(), String::new(), String::new()],
            None => [
                row.accuracy_mean.to_string(),
                row.accuracy_std.to_string(),
                row.collapse_mean.to_string(),
                row.final_collapse_mean.to_string(),
            ],
        };
        let mut record = vec![
            row.variant.to_string(),
            row.epsilon.to_string(),
            row.templates.to_string(),
            row.severity.to_string(),
            seeds,
        ];
        record.extend(stats);
        csv.write_record(&record)?;
    }
    let csv = String::from_utf8(csv.into_inner().map_err(|e| e.into_error())?).expect("csv writes UTF-8");

    let mut timings = csv::Writer::from_writer(Vec::new());
    timings.write_record(["variant", "epsilon", "templates", "severity", "seed", "wall_time_s"])?;
    for row in rows {
        for s in &row.per_seed {
            let time = s
                .outcome
                .as_ref()
                .map_or_else(err_cell, |o| o.wall_time.as_secs_f64().to_string());
            timings.write_record([
                row.variant.to_string(),
                row.epsilon.to_string(),
                row.templates.to_string(),
                row.severity.to_string(),
                s.seed.to_string(),
                time,
            ])?;
        }
    }
    let timings_csv = String::from_utf8(timings.into_inner().map_err(|e| e.into_error())?).expect("csv writes UTF-8");

    Ok(Report {
        markdown: render_markdown(rows),
        csv,
        timings_csv,
    })
}

/// One table per (epsilon, template count): severities down, variants across,
/// `mean ± std` accuracy in each cell.
fn render_markdown(rows: &[ResultRow]) -> String {
    let mut variants: Vec<Variant> = Vec::new();
    let mut groups: Vec<(f64, usize)> = Vec::new();
    for row in rows {
        if !variants.contains(&row.variant) {
            variants.push(row.variant);
        }
        if !groups.contains(&(row.epsilon, row.templates)) {
            groups.push((row.epsilon, row.templates));
        }
    }

    let mut out = String::new();
    for (epsilon, templates) in groups {
        let in_group: Vec<&ResultRow> = rows
            .iter()
            .filter(|r| r.epsilon == epsilon && r.templates == templates)
            .collect();
        let mut severities: Vec<f64> = Vec::new();
        for r in &in_group {
            if !severities.contains(&r.severity) {
                severities.push(r.severity);
            }
        }
        let _ = writeln!(out, "### epsilon = {epsilon}, templates = {templates}\n");
        let _ = write!(out, "| severity |");
        for v in &variants {
            let _ = write!(out, " {v} |");
        }
        let _ = write!(out, "\n|---|");
        for _ in &variants {
            let _ = write!(out, "---|");
        }
        out.push('\n');
        for severity in severities {
            let _ = write!(out, "| {severity} |");
            for v in &variants {
                let cell = in_group
                    .iter()
                    .find(|r| r.variant == *v && r.severity == severity)
                    .map_or_else(String::new, |r| match &r.error {
                        Some(e) => err_cell(e),
                        None => format!("{:.2} ± {:.2}", r.accuracy_mean, r.accuracy_std),
                    });
                let _ = write!(out, " {cell} |");
            }
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

/// Writes `results.md`, `results.csv` and `timings.csv` into `dir`.
pub fn write_report(report: &Report, dir: impl AsRef<Path>) -> Result<(), EvalError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    fs::write(dir.join("results.md"), &report.markdown)?;
    fs::write(dir.join("results.csv"), &report.csv)?;
    fs::write(dir.join("timings.csv"), &report.timings_csv)?;
    Ok(())
}

/// `variants` at each epsilon, everything else at the grid's base values.
pub fn epsilon_sweep(scenario: Scenario, variants: Vec<Variant>, epsilons: Vec<f64>) -> ExperimentGrid {
    ExperimentGrid::new(scenario)
        .with_variants(variants)
        .with_epsilons(epsilons)
}

/// `variants` at each template count (the first `m` templates of the bank).
pub fn template_sweep(scenario: Scenario, variants: Vec<Variant>, counts: Vec<usize>) -> ExperimentGrid {
    ExperimentGrid::new(scenario)
        .with_variants(variants)
        .with_template_counts(counts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ShiftKind;
    use crate::ot::Stabilization;

    fn small_spec() -> SyntheticShiftSpec {
        SyntheticShiftSpec {
            d: 8,
            classes: 3,
            templates: 3,
            n_per_class: 16,
            ..SyntheticShiftSpec::default()
        }
    }

    fn small_grid() -> ExperimentGrid {
        ExperimentGrid::new(Scenario::Synthetic(small_spec())).with_base(AdaptConfig {
            batch_size: 12,
            ..AdaptConfig::default()
        })
    }

    #[test]
    fn grid_is_complete_and_ordered() {
        let grid = small_grid()
            .with_variants(vec![Variant::ZeroShot, Variant::ClipOt])
            .with_epsilons(vec![0.5, 0.7])
            .with_template_counts(vec![1, 3])
            .with_seeds(vec![4, 5]);
        let rows = run_grid(&grid, 2).unwrap();
        assert_eq!(rows.len(), grid.cells());
        assert_eq!(rows.len(), 8);
        assert_eq!((rows[0].variant, rows[0].epsilon, rows[0].templates), (Variant::ZeroShot, 0.5, 1));
        assert_eq!((rows[7].variant, rows[7].epsilon, rows[7].templates), (Variant::ClipOt, 0.7, 3));
        for row in &rows {
            assert_eq!(row.per_seed.iter().map(|s| s.seed).collect::<Vec<_>>(), vec![4, 5]);
            assert!(row.error.is_none());
            assert!((0.0..=100.0).contains(&row.accuracy_mean));
            assert!(row.accuracy_std >= 0.0);
        }
    }

    #[test]
    fn seed_aggregation_matches_recomputation() {
        let rows = run_grid(&small_grid().with_variants(vec![Variant::Tent]).with_seeds(vec![0, 1, 2, 3]), 1).unwrap();
        let acc = rows[0].seed_accuracies();
        assert_eq!(acc.len(), 4);
        let m = acc.iter().sum::<f64>() / 4.0;
        let v = acc.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 3.0;
        assert!((rows[0].accuracy_mean - m).abs() < 1e-12);
        assert!((rows[0].accuracy_std - v.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn noiseless_zero_shot_is_perfect() {
        let spec = SyntheticShiftSpec {
            sample_noise: 0.0,
            shift_kind: ShiftKind::None,
            severity: 0.0,
            ..small_spec()
        };
        let grid = ExperimentGrid::new(Scenario::Synthetic(spec))
            .with_variants(vec![Variant::ZeroShot])
            .with_base(AdaptConfig {
                batch_size: 12,
                ..AdaptConfig::default()
            });
        let rows = run_grid(&grid, 1).unwrap();
        assert_eq!(rows[0].accuracy_mean, 100.0);
        assert_eq!(rows[0].accuracy_std, 0.0);
    }

    #[test]
    fn failing_cells_are_marked_and_the_suite_completes() {
        let grid = small_grid()
            .with_variants(vec![Variant::TrainingFree])
            .with_epsilons(vec![0.05, 0.7])
            .with_base(AdaptConfig {
                batch_size: 12,
                stabilization: Stabilization::Plain,
                ..AdaptConfig::default()
            });
        let rows = run_grid(&grid, 0).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].error.as_ref().unwrap().code, "non_finite_kernel");
        assert!(rows[1].error.is_none());
        let report = render_report(&rows).unwrap();
        assert!(report.csv.contains("ERR(non_finite_kernel)"));
        assert!(report.markdown.contains("ERR(non_finite_kernel)"));
        assert!(!report.csv.contains("NaN"));
    }

    #[test]
    fn csv_shape_and_determinism() {
        let grid = small_grid().with_variants(vec![Variant::ClipOt]).with_seeds(vec![7]);
        let a = render_report(&run_grid(&grid, 0).unwrap()).unwrap();
        let b = render_report(&run_grid(&grid, 3).unwrap()).unwrap();
        assert_eq!(a.csv, b.csv);
        assert_eq!(a.markdown, b.markdown);
        let lines: Vec<&str> = a.csv.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0], CSV_HEADER.join(","));
        assert!(lines[1].starts_with("clip_ot,0.7,3,0.6,7,"));
        assert_eq!(a.timings_csv.lines().count(), 2);
    }

    #[test]
    fn invalid_grids() {
        assert!(matches!(run_grid(&small_grid().with_template_counts(vec![4]), 1), Err(EvalError::InvalidGrid(_))));
        assert!(matches!(run_grid(&small_grid().with_seeds(vec![]), 1), Err(EvalError::InvalidGrid(_))));
        assert!(render_report(&[]).is_err());
    }

    #[test]
    fn file_scenario_runs_fixed_embedding_variants() {
        let spec = small_spec();
        let scenario = generate_synthetic(&spec, 12).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.oteb");
        scenario.to_embedding_file().unwrap().write(&path).unwrap();
        let grid = ExperimentGrid::new(Scenario::File(path))
            .with_variants(vec![Variant::ZeroShot, Variant::TrainingFree, Variant::Tent])
            .with_template_counts(vec![3])
            .with_seeds(vec![0])
            .with_base(AdaptConfig {
                batch_size: 12,
                ..AdaptConfig::default()
            });
        let rows = run_grid(&grid, 1).unwrap();
        assert!(rows[0].error.is_none() && rows[1].error.is_none());
        assert_eq!(rows[2].error.as_ref().unwrap().code, "unsupported_variant");
        let outcome = rows[1].per_seed[0].outcome.as_ref().unwrap();
        assert_eq!(outcome.batches, 4);
        assert!(outcome.max_code_mass_error < 1e-12);
    }

    #[test]
    fn std_helpers() {
        assert_eq!(sample_std(&[3.0]), 0.0);
        assert!((sample_std(&[1.0, 2.0, 3.0]) - 1.0).abs() < 1e-15);
        assert_eq!(mean(&[1.0, 2.0]), 1.5);
    }
}
