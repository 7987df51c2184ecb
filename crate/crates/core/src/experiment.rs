//! Grid runs, the paired drift report and the gradient-check suite.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{RunConfig, StreamSource};
use crate::datasets::{load_tensor_file, synth_stream, tasks_from_sets, StreamSpec, TaskData, TEST_ID_BASE};
use crate::error::{Error, Result};
use crate::losses;
use crate::metrics::{summarize, AccuracyMatrix, DriftLog, Summary};
use crate::numerics::{finite_diff_check, l2_normalize, Matrix, Tape};
use crate::trainer::{run_stream, Method, RunOutcome, TrainerConfig};

/// One point of the experiment grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub method: Method,
    pub lambda: f64,
    pub memory: usize,
    pub seed: u64,
}

impl Cell {
    /// File-name stem, unique within a grid.
    pub fn slug(&self) -> String {
        format!("{}_lambda{}_m{}_seed{}", self.method, self.lambda, self.memory, self.seed)
    }
}

/// Expands the grid. Finetune ignores both lambda and memory and ER ignores
/// lambda, so those methods get one cell per seed (and memory size for ER).
pub fn grid(config: &RunConfig) -> Vec<Cell> {
    let mut cells = Vec::new();
    for &method in &config.methods {
        let lambdas = if method.is_regularized() { config.lambdas.clone() } else { vec![0.0] };
        let memories = if method.uses_memory() { config.memories.clone() } else { vec![0] };
        for &lambda in &lambdas {
            for &memory in &memories {
                for &seed in &config.seeds {
                    let cell = Cell { method, lambda, memory, seed };
                    if !cells.contains(&cell) {
                        cells.push(cell);
                    }
                }
            }
        }
    }
    cells
}

/// Builds the task stream a given seed trains on.
pub fn load_stream(config: &RunConfig, seed: u64) -> Result<Vec<TaskData>> {
    let stream_seed = config.stream_seed.unwrap_or(seed);
    match &config.stream {
        StreamSource::Synthetic(spec) => synth_stream(&StreamSpec { seed: stream_seed, ..spec.clone() }),
        StreamSource::Files { train, test, classes_per_task } => {
            let train = load_tensor_file(train)?;
            let test = load_tensor_file(test)?;
            if train.class_count != test.class_count || train.x.cols() != test.x.cols() {
                return Err(Error::Malformed("train and test files disagree on classes or dimension".into()));
            }
            let classes = train.class_count;
            tasks_from_sets(&train.into_set(0), &test.into_set(TEST_ID_BASE), classes, *classes_per_task, stream_seed)
        }
    }
}

pub fn cell_config(config: &RunConfig, cell: &Cell) -> TrainerConfig {
    TrainerConfig {
        method: cell.method,
        lambda: cell.lambda,
        memory_capacity: cell.memory,
        seed: cell.seed,
        ..config.trainer.clone()
    }
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub cell: Cell,
    pub accuracy: AccuracyMatrix,
    pub drift: DriftLog,
    pub summary: Summary,
    pub single_pass: bool,
}

pub fn run_cell(config: &RunConfig, cell: &Cell) -> Result<CellResult> {
    let tasks = load_stream(config, cell.seed)?;
    let outcome = run_stream(&cell_config(config, cell), &tasks)?;
    let single_pass = outcome.single_pass_holds(&tasks);
    let RunOutcome { accuracy, drift, .. } = outcome;
    Ok(CellResult { cell: *cell, summary: summarize(&accuracy)?, accuracy, drift, single_pass })
}

/// Runs cells on a pool of `threads` workers (all cores when `None`).
/// Results come back in grid order regardless of scheduling.
pub fn run_cells(config: &RunConfig, cells: &[Cell], threads: Option<usize>) -> Result<Vec<Result<CellResult>>> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n.max(1));
    }
    let pool = builder.build().map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    Ok(pool.install(|| cells.par_iter().map(|cell| run_cell(config, cell)).collect()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRecord {
    pub method: Method,
    pub seed: u64,
    pub lambda: f64,
    pub tau: f64,
    #[serde(rename = "M")]
    pub memory: usize,
    pub fa: f64,
    pub ga: f64,
    pub fm: Option<f64>,
    pub la: f64,
}

/// Mean and 95% half-width over seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Interval {
    pub mean: f64,
    pub ci95: f64,
}

impl Interval {
    pub fn of(values: &[f64]) -> Option<Self> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let ci95 = if n < 2 {
            0.0
        } else {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            1.96 * var.sqrt() / (n as f64).sqrt()
        };
        Some(Self { mean, ci95 })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellAggregate {
    pub method: Method,
    pub lambda: f64,
    pub tau: f64,
    #[serde(rename = "M")]
    pub memory: usize,
    pub seeds: usize,
    pub fa: Interval,
    pub ga: Interval,
    pub fm: Option<Interval>,
    pub la: Interval,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Failure {
    pub cell: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub config_hash: String,
    pub runs: Vec<RunRecord>,
    pub cells: Vec<CellAggregate>,
    pub failures: Vec<Failure>,
}

pub fn aggregate(runs: &[RunRecord]) -> Vec<CellAggregate> {
    let mut order: Vec<(Method, u64, usize)> = Vec::new();
    let mut groups: BTreeMap<(Method, u64, usize), Vec<&RunRecord>> = BTreeMap::new();
    for r in runs {
        let key = (r.method, r.lambda.to_bits(), r.memory);
        if !groups.contains_key(&key) {
            order.push(key);
        }
        groups.entry(key).or_default().push(r);
    }
    order
        .into_iter()
        .map(|key| {
            let rs = &groups[&key];
            let pick = |f: fn(&RunRecord) -> f64| {
                Interval::of(&rs.iter().map(|r| f(r)).collect::<Vec<_>>()).expect("non-empty group")
            };
            let fms: Option<Vec<f64>> = rs.iter().map(|r| r.fm).collect();
            CellAggregate {
                method: key.0,
                lambda: rs[0].lambda,
                tau: rs[0].tau,
                memory: key.2,
                seeds: rs.len(),
                fa: pick(|r| r.fa),
                ga: pick(|r| r.ga),
                fm: fms.and_then(|v| Interval::of(&v)),
                la: pick(|r| r.la),
            }
        })
        .collect()
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents)?;
    Ok(())
}

pub fn matrix_path(dir: &Path, cell: &Cell) -> PathBuf {
    dir.join(format!("matrix_{}.csv", cell.slug()))
}

pub fn drift_path(dir: &Path, cell: &Cell) -> PathBuf {
    dir.join(format!("drift_{}.csv", cell.slug()))
}

/// Executes the whole grid and writes reports under the config's output
/// directory. Successful cells are written even when others fail; the
/// report lists the failures and an error is returned afterwards.
pub fn cmd_run(config: &RunConfig, threads: Option<usize>) -> Result<RunReport> {
    let dir = config.output_dir();
    fs::create_dir_all(&dir)?;
    let cells = grid(config);
    let results = run_cells(config, &cells, threads)?;

    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for (cell, result) in cells.iter().zip(results) {
        match result {
            Ok(r) => {
                write_file(&matrix_path(&dir, cell), &r.accuracy.to_csv())?;
                write_file(&drift_path(&dir, cell), &r.drift.to_csv())?;
                runs.push(RunRecord {
                    method: cell.method,
                    seed: cell.seed,
                    lambda: cell.lambda,
                    tau: config.trainer.tau,
                    memory: cell.memory,
                    fa: r.summary.fa,
                    ga: r.summary.ga,
                    fm: r.summary.fm,
                    la: r.summary.la,
                });
            }
            Err(e) => failures.push(Failure { cell: cell.slug(), error: e.to_string() }),
        }
    }
    let report = RunReport { config_hash: config.hash(), cells: aggregate(&runs), runs, failures };
    write_file(&dir.join("summary.json"), &(serde_json::to_string_pretty(&report)? + "\n"))?;
    if let Some(first) = report.failures.first() {
        return Err(Error::InvalidArgument(format!(
            "{} of {} cells failed; first: {}: {}",
            report.failures.len(),
            cells.len(),
            first.cell,
            first.error
        )));
    }
    Ok(report)
}

/// Rows `after_task,task_1,...,task_T` with blanks for tasks not yet seen.
pub fn accuracy_evolution_csv(a: &AccuracyMatrix) -> String {
    let t = a.tasks();
    let mut out = String::from("after_task");
    for j in 1..=t {
        let _ = write!(out, ",task_{j}");
    }
    out.push('\n');
    for i in 0..t {
        let _ = write!(out, "{}", i + 1);
        for j in 0..t {
            match a.row(i).get(j) {
                Some(v) => {
                    let _ = write!(out, ",{v}");
                }
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}

/// Two drift curves on the same update grid.
pub fn paired_drift_csv(base: &DriftLog, regularized: &DriftLog, lambda: f64) -> Result<String> {
    if base.points().len() != regularized.points().len() {
        return Err(Error::InvalidArgument("drift logs have different lengths".into()));
    }
    let mut out = format!("update_index,task_id,drift_lambda0,drift_lambda{lambda}\n");
    for (a, b) in base.points().iter().zip(regularized.points()) {
        let _ = writeln!(out, "{},{},{},{}", a.update, a.task, a.mean_cosine_distance, b.mean_cosine_distance);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct DriftReport {
    pub lambda: f64,
    pub baseline: CellResult,
    pub regularized: CellResult,
    pub dir: PathBuf,
}

/// KISP at lambda 0 and at the first configured lambda, on the first seed
/// and memory size.
pub fn cmd_drift(config: &RunConfig) -> Result<DriftReport> {
    let seed = config.seeds[0];
    let memory = config.memories[0];
    let lambda = config.lambdas[0];
    let baseline = run_cell(config, &Cell { method: Method::Kisp, lambda: 0.0, memory, seed })?;
    let regularized = run_cell(config, &Cell { method: Method::Kisp, lambda, memory, seed })?;

    let dir = config.output_dir();
    fs::create_dir_all(&dir)?;
    write_file(
        &dir.join(format!("drift_pair_seed{seed}.csv")),
        &paired_drift_csv(&baseline.drift, &regularized.drift, lambda)?,
    )?;
    write_file(
        &dir.join(format!("accuracy_evolution_lambda0_seed{seed}.csv")),
        &accuracy_evolution_csv(&baseline.accuracy),
    )?;
    write_file(
        &dir.join(format!("accuracy_evolution_lambda{lambda}_seed{seed}.csv")),
        &accuracy_evolution_csv(&regularized.accuracy),
    )?;
    Ok(DriftReport { lambda, baseline, regularized, dir })
}

/// Gradient check of one loss family.
#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckEntry {
    pub loss: &'static str,
    pub instances: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub entries: Vec<GradcheckEntry>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.max_rel_error < self.tolerance)
    }
}

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const GRADCHECK_INSTANCES: usize = 100;
const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, Default)]
pub struct GradcheckOptions {
    pub instances: usize,
    /// Negates the analytic KISP gradient; the suite must then fail.
    pub flip_kisp_sign: bool,
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    Matrix::new(rows, cols, data).expect("finite")
}

/// Evaluates `build` on a fresh tape whose leaves are `params`.
fn tape_grad(
    params: &[Matrix],
    build: impl Fn(&mut Tape, &[crate::numerics::NodeId]) -> Result<crate::numerics::NodeId>,
) -> Result<(f64, Vec<Matrix>)> {
    let mut tape = Tape::new();
    let leaves: Vec<_> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = build(&mut tape, &leaves)?;
    let mut grads = tape.backward(loss)?;
    let value = tape.value(loss).get(0, 0);
    Ok((value, leaves.iter().map(|&l| grads.take(l).expect("leaf gradient")).collect()))
}

pub fn gradcheck(seed: u64, options: GradcheckOptions) -> Result<GradcheckReport> {
    let instances = if options.instances == 0 { GRADCHECK_INSTANCES } else { options.instances };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tau = losses::DEFAULT_TAU;
    let sign = if options.flip_kisp_sign { -1.0 } else { 1.0 };
    let mut worst = [0.0f64; 5];

    for _ in 0..instances {
        let m = rng.random_range(1..=6usize);
        let d = rng.random_range(2..=8usize);
        let c = rng.random_range(2..=5usize);
        let labels: Vec<usize> = (0..m).map(|_| rng.random_range(0..c)).collect();

        let logits = random_matrix(&mut rng, m, c, 3.0);
        let ce = |p: &[Matrix]| tape_grad(p, |t, l| losses::cross_entropy_on(t, l[0], &labels));
        worst[0] = worst[0].max(finite_diff_check(&ce, &[logits], FD_STEP)?);

        let pre = l2_normalize(&random_matrix(&mut rng, m, d, 1.0))?;
        let cur = random_matrix(&mut rng, m, d, 1.0);
        let kisp = |p: &[Matrix]| {
            let (v, mut g) = tape_grad(p, |t, l| {
                let pre = t.constant(pre.clone());
                let cur = t.l2_normalize(l[0])?;
                losses::kisp_on(t, pre, cur, tau)
            })?;
            g[0] = g[0].map(|x| sign * x);
            Ok((v, g))
        };
        worst[1] = worst[1].max(finite_diff_check(&kisp, std::slice::from_ref(&cur), FD_STEP)?);

        let lfc = |p: &[Matrix]| {
            tape_grad(p, |t, l| {
                let pre = t.constant(pre.clone());
                let cur = t.l2_normalize(l[0])?;
                losses::lfc_on(t, pre, cur)
            })
        };
        worst[2] = worst[2].max(finite_diff_check(&lfc, std::slice::from_ref(&cur), FD_STEP)?);

        let raw_pre = random_matrix(&mut rng, m, d, 1.0);
        let rld = |p: &[Matrix]| {
            tape_grad(p, |t, l| {
                let pre = t.constant(raw_pre.clone());
                losses::rld_on(t, pre, l[0])
            })
        };
        worst[3] = worst[3].max(finite_diff_check(&rld, std::slice::from_ref(&cur), FD_STEP)?);

        // total loss through a one-hidden-layer encoder and a linear head
        let d_in = rng.random_range(2..=6usize);
        let hidden = rng.random_range(2..=6usize);
        let lambda = rng.random_range(0.0..2.0);
        let x = random_matrix(&mut rng, m, d_in, 1.0);
        let params = vec![
            random_matrix(&mut rng, d_in, hidden, 1.0),
            random_matrix(&mut rng, 1, hidden, 0.5),
            random_matrix(&mut rng, hidden, d, 1.0),
            random_matrix(&mut rng, 1, d, 0.5),
            random_matrix(&mut rng, d, c, 1.0),
            random_matrix(&mut rng, 1, c, 0.5),
        ];
        let total = |p: &[Matrix]| {
            tape_grad(p, |t, l| {
                let x = t.constant(x.clone());
                let h = t.affine(x, l[0], l[1])?;
                let h = t.relu(h)?;
                let f = t.affine(h, l[2], l[3])?;
                let logits = t.affine(f, l[4], l[5])?;
                let ce = losses::cross_entropy_on(t, logits, &labels)?;
                let pre = t.constant(pre.clone());
                let cur = t.l2_normalize(f)?;
                let reg = losses::kisp_on(t, pre, cur, tau)?;
                losses::total_on(t, ce, reg, lambda)
            })
        };
        worst[4] = worst[4].max(finite_diff_check(&total, &params, FD_STEP)?);
    }

    let names = ["ce", "kisp", "lfc", "rld", "total"];
    Ok(GradcheckReport {
        entries: names
            .iter()
            .zip(worst)
            .map(|(&loss, max_rel_error)| GradcheckEntry { loss, instances, max_rel_error })
            .collect(),
        tolerance: GRADCHECK_TOLERANCE,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(text: &str) -> RunConfig {
        RunConfig::parse(text).unwrap()
    }

    #[test]
    fn grid_deduplicates_unregularized_methods() {
        let c = config("trainer.methods=finetune,er,kisp\ntrainer.lambda=0.1,1\ntrainer.memory=5,10\nrun.seeds=0,1");
        let cells = grid(&c);
        let count = |m: Method| cells.iter().filter(|c| c.method == m).count();
        assert_eq!(count(Method::Finetune), 2);
        assert_eq!(count(Method::Er), 4);
        assert_eq!(count(Method::Kisp), 8);
        assert!(cells.iter().filter(|c| c.method == Method::Finetune).all(|c| c.memory == 0 && c.lambda == 0.0));
    }

    #[test]
    fn slugs_are_unique() {
        let c = config(
            "trainer.methods=finetune,er,lfc,rld,kisp\ntrainer.lambda=0.1,1,10\ntrainer.memory=5,20\nrun.seeds=0,1",
        );
        let cells = grid(&c);
        let slugs: std::collections::HashSet<_> = cells.iter().map(Cell::slug).collect();
        assert_eq!(slugs.len(), cells.len());
    }

    #[test]
    fn interval_formula() {
        let i = Interval::of(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(i.mean, 2.0);
        assert!((i.ci95 - 1.96 / 3f64.sqrt()).abs() < 1e-15);
        assert_eq!(Interval::of(&[4.0]).unwrap().ci95, 0.0);
        assert!(Interval::of(&[]).is_none());
    }

    #[test]
    fn evolution_csv_layout() {
        let a = AccuracyMatrix::from_rows(vec![vec![0.5], vec![0.25, 1.0]]).unwrap();
        assert_eq!(accuracy_evolution_csv(&a), "after_task,task_1,task_2\n1,0.5,\n2,0.25,1\n");
    }

    #[test]
    fn gradcheck_passes_and_catches_sign_flip() {
        let ok = gradcheck(3, GradcheckOptions { instances: 20, ..Default::default() }).unwrap();
        assert!(ok.passed(), "{ok:?}");
        let bad = gradcheck(3, GradcheckOptions { instances: 20, flip_kisp_sign: true }).unwrap();
        assert!(!bad.passed());
        assert!(bad.entries[1].max_rel_error > 1e-2);
    }
}
