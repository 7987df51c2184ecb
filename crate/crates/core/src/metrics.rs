//! Continual-learning metrics over the train-test accuracy matrix, plus the
//! embedding-drift diagnostic.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::TaskId;

/// `a[i][j]`: accuracy on task `j` after training through task `i`, for
/// `j <= i`. Indices are zero-based in this API.
#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        Self { rows: Vec::new() }
    }

    /// Builds from lower-triangular rows; row `i` must have `i + 1` entries.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = Self::new();
        for row in rows {
            m.push_row(row)?;
        }
        Ok(m)
    }

    /// Appends the row for the next task.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        let expected = self.rows.len() + 1;
        if row.len() != expected {
            return Err(Error::shape("accuracy row", (1, expected), (1, row.len())));
        }
        if let Some(bad) = row.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(Error::InvalidArgument(format!("accuracy {bad} outside [0, 1]")));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, i: usize, j: usize) -> Result<f64> {
        if j > i {
            return Err(Error::AboveDiagonal { row: i, col: j });
        }
        self.rows.get(i).map(|r| r[j]).ok_or_else(|| Error::InvalidArgument(format!("row {i} not recorded")))
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i]
    }

    fn require(&self, metric: &'static str, min: usize) -> Result<usize> {
        let t = self.tasks();
        if t < min {
            return Err(Error::UndefinedMetric { metric, tasks: t });
        }
        Ok(t)
    }

    /// CSV with a `task` header, one row per finished task and blank cells
    /// above the diagonal.
    pub fn to_csv(&self) -> String {
        let t = self.tasks();
        let mut out = String::from("task");
        for j in 1..=t {
            let _ = write!(out, ",{j}");
        }
        out.push('\n');
        for (i, row) in self.rows.iter().enumerate() {
            let _ = write!(out, "{}", i + 1);
            for j in 0..t {
                out.push(',');
                if let Some(v) = row.get(j) {
                    let _ = write!(out, "{v}");
                }
            }
            out.push('\n');
        }
        out
    }
}

impl Default for AccuracyMatrix {
    fn default() -> Self {
        Self::new()
    }
}

/// Final accuracy: mean of the last row.
pub fn fa(a: &AccuracyMatrix) -> Result<f64> {
    let t = a.require("FA", 1)?;
    Ok(a.row(t - 1).iter().sum::<f64>() / t as f64)
}

/// Global accuracy: mean over every recorded entry.
pub fn ga(a: &AccuracyMatrix) -> Result<f64> {
    let t = a.require("GA", 1)?;
    let total: f64 = a.rows.iter().flatten().sum();
    Ok(total / (t * (t + 1) / 2) as f64)
}

/// Forgetting measure: mean drop from each earlier task's best accuracy to
/// its final accuracy. Negative values mean backward transfer.
pub fn fm(a: &AccuracyMatrix) -> Result<f64> {
    let t = a.require("FM", 2)?;
    let last = a.row(t - 1);
    let mut total = 0.0;
    for (j, &final_acc) in last.iter().enumerate().take(t - 1) {
        let best = (j..t - 1).map(|l| a.rows[l][j]).fold(f64::NEG_INFINITY, f64::max);
        total += best - final_acc;
    }
    Ok(total / (t - 1) as f64)
}

/// Learning accuracy: mean of the diagonal.
pub fn la(a: &AccuracyMatrix) -> Result<f64> {
    let t = a.require("LA", 1)?;
    Ok((0..t).map(|i| a.rows[i][i]).sum::<f64>() / t as f64)
}

/// All four metrics; `fm` is `None` for a single task.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct Summary {
    pub fa: f64,
    pub ga: f64,
    pub fm: Option<f64>,
    pub la: f64,
}

pub fn summarize(a: &AccuracyMatrix) -> Result<Summary> {
    Ok(Summary { fa: fa(a)?, ga: ga(a)?, fm: fm(a).ok(), la: la(a)? })
}

/// Mean cosine distance between paired rows.
pub fn embedding_drift(reference: &Matrix, current: &Matrix) -> Result<f64> {
    if reference.shape() != current.shape() {
        return Err(Error::shape("embedding_drift", reference.shape(), current.shape()));
    }
    if reference.rows() == 0 {
        return Err(Error::InvalidArgument("drift needs at least one row".into()));
    }
    let mut total = 0.0;
    for r in 0..reference.rows() {
        let (a, b) = (reference.row(r), current.row(r));
        let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            return Err(Error::DegenerateFeature { row: r, norm: na.min(nb) });
        }
        let cos = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
        total += 1.0 - cos.clamp(-1.0, 1.0);
    }
    Ok(total / reference.rows() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriftPoint {
    pub update: usize,
    pub task: TaskId,
    pub mean_cosine_distance: f64,
}

/// Per-update drift of the memory embeddings against their write-time values.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DriftLog {
    points: Vec<DriftPoint>,
}

impl DriftLog {
    pub fn push(&mut self, point: DriftPoint) {
        debug_assert!((0.0..=2.0).contains(&point.mean_cosine_distance));
        self.points.push(point);
    }

    pub fn points(&self) -> &[DriftPoint] {
        &self.points
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Last logged drift of each task, in task order.
    pub fn at_task_ends(&self) -> Vec<(TaskId, f64)> {
        let mut out: Vec<(TaskId, f64)> = Vec::new();
        for p in &self.points {
            match out.last_mut() {
                Some(last) if last.0 == p.task => last.1 = p.mean_cosine_distance,
                _ => out.push((p.task, p.mean_cosine_distance)),
            }
        }
        out
    }

    pub fn last(&self) -> Option<f64> {
        self.points.last().map(|p| p.mean_cosine_distance)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("update_index,task_id,mean_cosine_distance\n");
        for p in &self.points {
            let _ = writeln!(out, "{},{},{}", p.update, p.task, p.mean_cosine_distance);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fixed() -> AccuracyMatrix {
        AccuracyMatrix::from_rows(vec![vec![0.9], vec![0.7, 0.8]]).unwrap()
    }

    fn random_matrix(rng: &mut ChaCha8Rng, t: usize) -> AccuracyMatrix {
        AccuracyMatrix::from_rows((0..t).map(|i| (0..=i).map(|_| rng.random::<f64>()).collect()).collect()).unwrap()
    }

    // transcription oracles on 1-based indices
    fn fm_oracle(a: &AccuracyMatrix) -> f64 {
        let t = a.tasks();
        let at = |i: usize, j: usize| a.get(i - 1, j - 1).unwrap();
        let mut s = 0.0;
        for j in 1..t {
            let mut best = f64::MIN;
            for l in 1..t {
                if l >= j && at(l, j) > best {
                    best = at(l, j);
                }
            }
            s += best - at(t, j);
        }
        s / (t - 1) as f64
    }

    #[test]
    fn hand_evaluated_two_task_matrix() {
        let a = fixed();
        assert!((fa(&a).unwrap() - 0.75).abs() < 1e-12);
        assert!((ga(&a).unwrap() - 0.8).abs() < 1e-12);
        assert!((fm(&a).unwrap() - 0.2).abs() < 1e-12);
        assert!((la(&a).unwrap() - 0.85).abs() < 1e-12);
    }

    #[test]
    fn single_task_cases() {
        let a = AccuracyMatrix::from_rows(vec![vec![0.9]]).unwrap();
        assert_eq!(fa(&a).unwrap(), 0.9);
        assert_eq!(ga(&a).unwrap(), 0.9);
        assert_eq!(la(&a).unwrap(), 0.9);
        assert!(matches!(fm(&a), Err(Error::UndefinedMetric { metric: "FM", tasks: 1 })));
    }

    #[test]
    fn constant_and_perfect_diagonal() {
        let c = AccuracyMatrix::from_rows((0..4).map(|i| vec![0.37; i + 1]).collect()).unwrap();
        for v in [fa(&c), ga(&c), la(&c)] {
            assert!((v.unwrap() - 0.37).abs() < 1e-15);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut rows: Vec<Vec<f64>> = (0..3).map(|i| (0..=i).map(|_| rng.random::<f64>()).collect()).collect();
        for (i, r) in rows.iter_mut().enumerate() {
            r[i] = 1.0;
        }
        assert_eq!(la(&AccuracyMatrix::from_rows(rows).unwrap()).unwrap(), 1.0);
    }

    #[test]
    fn improving_columns_give_non_positive_forgetting() {
        let a = AccuracyMatrix::from_rows(vec![vec![0.5], vec![0.6, 0.4], vec![0.7, 0.9, 0.2]]).unwrap();
        assert!(fm(&a).unwrap() <= 0.0);
    }

    #[test]
    fn upper_triangle_and_bad_rows_are_rejected() {
        assert!(matches!(fixed().get(0, 1), Err(Error::AboveDiagonal { row: 0, col: 1 })));
        assert!(AccuracyMatrix::from_rows(vec![vec![0.9, 0.1]]).is_err());
        assert!(AccuracyMatrix::from_rows(vec![vec![1.2]]).is_err());
    }

    #[test]
    fn csv_layout() {
        assert_eq!(fixed().to_csv(), "task,1,2\n1,0.9,\n2,0.7,0.8\n");
    }

    #[test]
    fn three_task_forgetting_matches_transcription() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let a = random_matrix(&mut rng, 3);
            assert!((fm(&a).unwrap() - fm_oracle(&a)).abs() < 1e-12);
        }
    }

    #[test]
    fn drift_basics() {
        let r = Matrix::from_rows(&[[1.0, 2.0], [-0.5, 3.0]]).unwrap();
        assert!(embedding_drift(&r, &r).unwrap().abs() < 1e-15);
        assert!(embedding_drift(&r, &r.map(|v| 3.0 * v)).unwrap().abs() < 1e-15);
        let e = Matrix::identity(2);
        let swapped = Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap();
        assert_eq!(embedding_drift(&e, &swapped).unwrap(), 1.0);
        let z = Matrix::from_rows(&[[0.0, 0.0], [1.0, 1.0]]).unwrap();
        assert!(matches!(embedding_drift(&z, &r), Err(Error::DegenerateFeature { row: 0, .. })));
    }

    #[test]
    fn drift_log_task_ends() {
        let mut log = DriftLog::default();
        for (u, t, d) in [(0, 1, 0.1), (1, 1, 0.2), (2, 2, 0.3), (3, 2, 0.25)] {
            log.push(DriftPoint { update: u, task: t, mean_cosine_distance: d });
        }
        assert_eq!(log.at_task_ends(), vec![(1, 0.2), (2, 0.25)]);
        assert!(log.to_csv().starts_with("update_index,task_id,mean_cosine_distance\n0,1,0.1\n"));
    }

    proptest! {
        #[test]
        fn metrics_match_transcriptions(t in 1usize..8, seed in 0u64..100_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_matrix(&mut rng, t);
            let at = |i: usize, j: usize| a.get(i - 1, j - 1).unwrap();
            let fa_o = (1..=t).map(|i| at(t, i)).sum::<f64>() / t as f64;
            let mut ga_o = 0.0;
            for i in 1..=t { for j in 1..=i { ga_o += at(i, j); } }
            ga_o /= (t * (t + 1)) as f64 / 2.0;
            let la_o = (1..=t).map(|i| at(i, i)).sum::<f64>() / t as f64;
            prop_assert!((fa(&a).unwrap() - fa_o).abs() <= 1e-12);
            prop_assert!((ga(&a).unwrap() - ga_o).abs() <= 1e-12);
            prop_assert!((la(&a).unwrap() - la_o).abs() <= 1e-12);
            for v in [fa_o, ga_o, la_o] { prop_assert!((0.0..=1.0).contains(&v)); }
            if t >= 2 {
                let f = fm(&a).unwrap();
                prop_assert!((f - fm_oracle(&a)).abs() <= 1e-12);
                prop_assert!((-1.0..=1.0).contains(&f));
            } else {
                prop_assert_eq!(fa_o, ga_o);
                prop_assert_eq!(ga_o, la_o);
            }
        }

        #[test]
        fn drift_is_scale_invariant(
            rows in prop::collection::vec(prop::collection::vec(0.1f64..5.0, 3), 1..6),
            scale in 0.01f64..100.0
        ) {
            let r = Matrix::from_rows(&rows).unwrap();
            let c = r.map(|v| 1.5 - v);
            prop_assume!(c.row_norms().iter().all(|n| *n > 1e-6));
            let base = embedding_drift(&r, &c).unwrap();
            let scaled = embedding_drift(&r.map(|v| v * scale), &c).unwrap();
            prop_assert!((base - scaled).abs() <= 1e-12);
            prop_assert!((0.0..=2.0).contains(&base));
        }
    }
}
