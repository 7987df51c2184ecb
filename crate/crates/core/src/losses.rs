//! Training objectives.
//!
//! Every loss is defined once, as a tape recording. The plain functions in
//! this module build a throwaway tape of constants and read the value back,
//! so the forward value used in training and the value reported here are the
//! same computation.
//!
//! The knowledge-invariant/spread-out regularizer treats each memory
//! instance `i` as its own class. With unit-norm snapshot features `p_k` and
//! live features `c_j`,
//!
//! ```text
//! P[i, j] = exp(<p_i, c_j> / tau) / sum_k exp(<p_k, c_j> / tau)
//! J       = -sum_i ln P[i, i] - sum_i sum_{j != i} ln(1 - P[i, j])
//! ```
//!
//! The diagonal terms pull each live feature toward its own snapshot
//! feature; the off-diagonal terms push it away from every other instance.

use crate::error::{Error, Result};
use crate::numerics::{Matrix, NodeId, Tape};

/// Temperature used unless configured otherwise.
pub const DEFAULT_TAU: f64 = 0.1;

/// Lower bound applied to `1 - P[i, j]` before taking the log.
pub const ONE_MINUS_FLOOR: f64 = 1e-12;

/// Paired, normalized memory features from the snapshot and the live model.
#[derive(Debug, Clone, PartialEq)]
pub struct KispBatch {
    f_pre: Matrix,
    f_cur: Matrix,
    tau: f64,
}

impl KispBatch {
    /// Both matrices must have matching shapes and unit-norm rows.
    pub fn new(f_pre_norm: Matrix, f_cur_norm: Matrix, tau: f64) -> Result<Self> {
        if f_pre_norm.shape() != f_cur_norm.shape() {
            return Err(Error::shape("kisp batch", f_pre_norm.shape(), f_cur_norm.shape()));
        }
        if f_pre_norm.rows() == 0 {
            return Err(Error::InvalidArgument("kisp batch needs at least one instance".into()));
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
        }
        for m in [&f_pre_norm, &f_cur_norm] {
            if let Some(row) = m.row_norms().iter().position(|n| (n - 1.0).abs() > 1e-9) {
                return Err(Error::InvalidArgument(format!("row {row} is not unit norm")));
            }
        }
        Ok(Self { f_pre: f_pre_norm, f_cur: f_cur_norm, tau })
    }

    pub fn f_pre(&self) -> &Matrix {
        &self.f_pre
    }

    pub fn f_cur(&self) -> &Matrix {
        &self.f_cur
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn len(&self) -> usize {
        self.f_pre.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Loss components of one update. `kisp` holds whichever regularizer the
/// method uses (zero when none applies).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub ce: f64,
    pub kisp: f64,
    pub total: f64,
    pub lambda: f64,
}

/// Mean negative log-likelihood of `labels` under row-wise softmax.
pub fn cross_entropy_on(tape: &mut Tape, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    let ls = tape.log_softmax(logits)?;
    tape.nll_mean(ls, labels.to_vec())
}

/// `log P` transposed: entry `[j, i]` is `ln P[i, j]`.
fn kisp_logits_t(tape: &mut Tape, f_pre: NodeId, f_cur: NodeId, tau: f64) -> Result<NodeId> {
    let sims = tape.matmul_bt(f_cur, f_pre)?;
    tape.scale(sims, 1.0 / tau)
}

/// Records the regularizer on normalized features. Gradients flow into
/// `f_cur` only when `f_pre` is a constant.
pub fn kisp_on(tape: &mut Tape, f_pre: NodeId, f_cur: NodeId, tau: f64) -> Result<NodeId> {
    let (pre, cur) = (tape.value(f_pre).shape(), tape.value(f_cur).shape());
    if pre != cur {
        return Err(Error::shape("kisp", pre, cur));
    }
    let m = pre.0;
    let logits = kisp_logits_t(tape, f_pre, f_cur, tau)?;
    let log_q = tape.log_softmax(logits)?;

    let diag_mask = tape.constant(Matrix::identity(m));
    let diag = tape.mul(log_q, diag_mask)?;
    let diag_sum = tape.sum(diag)?;

    let log_not_q = tape.log_softmax_complement(logits, ONE_MINUS_FLOOR)?;
    let off_mask = tape.constant(Matrix::identity(m).map(|v| 1.0 - v));
    let off = tape.mul(log_not_q, off_mask)?;
    let off_sum = tape.sum(off)?;

    let likelihood = tape.add(diag_sum, off_sum)?;
    tape.scale(likelihood, -1.0)
}

/// `mean_i (1 - <p_i, c_i>)` on normalized features.
pub fn lfc_on(tape: &mut Tape, f_pre: NodeId, f_cur: NodeId) -> Result<NodeId> {
    let m = tape.value(f_pre).rows() as f64;
    let prod = tape.mul(f_pre, f_cur)?;
    let dots = tape.sum(prod)?;
    tape.affine_scalar(dots, -1.0 / m, 1.0)
}

/// Mean squared distance per coordinate on unnormalized features.
pub fn rld_on(tape: &mut Tape, f_pre: NodeId, f_cur: NodeId) -> Result<NodeId> {
    let (m, d) = tape.value(f_pre).shape();
    let diff = tape.sub(f_cur, f_pre)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq)?;
    tape.scale(total, 1.0 / (m * d) as f64)
}

/// `ce + lambda * reg`.
pub fn total_on(tape: &mut Tape, ce: NodeId, reg: NodeId, lambda: f64) -> Result<NodeId> {
    check_lambda(lambda)?;
    let weighted = tape.scale(reg, lambda)?;
    tape.add(ce, weighted)
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!("lambda must be non-negative, got {lambda}")));
    }
    Ok(())
}

fn scalar_of(tape: &Tape, id: NodeId) -> f64 {
    tape.value(id).get(0, 0)
}

pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let z = tape.constant(logits.clone());
    let loss = cross_entropy_on(&mut tape, z, labels)?;
    Ok(scalar_of(&tape, loss))
}

/// `P[i, j]`, the probability that live feature `j` is recognized as
/// instance `i`. Columns sum to one.
pub fn kisp_probs(batch: &KispBatch) -> Matrix {
    let mut tape = Tape::new();
    let pre = tape.constant(batch.f_pre.clone());
    let cur = tape.constant(batch.f_cur.clone());
    let logits = kisp_logits_t(&mut tape, pre, cur, batch.tau).expect("batch shapes validated");
    tape.value(logits).softmax_rows().transpose()
}

pub fn kisp_loss(batch: &KispBatch) -> f64 {
    let mut tape = Tape::new();
    let pre = tape.constant(batch.f_pre.clone());
    let cur = tape.constant(batch.f_cur.clone());
    let loss = kisp_on(&mut tape, pre, cur, batch.tau).expect("batch shapes validated");
    scalar_of(&tape, loss)
}

pub fn total_loss(ce: f64, kisp: f64, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    Ok(ce + lambda * kisp)
}

pub fn lfc_loss(batch: &KispBatch) -> f64 {
    let mut tape = Tape::new();
    let pre = tape.constant(batch.f_pre.clone());
    let cur = tape.constant(batch.f_cur.clone());
    let loss = lfc_on(&mut tape, pre, cur).expect("batch shapes validated");
    scalar_of(&tape, loss)
}

pub fn rld_loss(f_pre: &Matrix, f_cur: &Matrix) -> Result<f64> {
    if f_pre.shape() != f_cur.shape() {
        return Err(Error::shape("rld", f_pre.shape(), f_cur.shape()));
    }
    if f_pre.rows() == 0 || f_pre.cols() == 0 {
        return Err(Error::InvalidArgument("rld needs a non-empty feature matrix".into()));
    }
    let mut tape = Tape::new();
    let pre = tape.constant(f_pre.clone());
    let cur = tape.constant(f_cur.clone());
    let loss = rld_on(&mut tape, pre, cur)?;
    Ok(scalar_of(&tape, loss))
}

impl LossBreakdown {
    pub fn new(ce: f64, kisp: f64, lambda: f64) -> Result<Self> {
        Ok(Self { ce, kisp, total: total_loss(ce, kisp, lambda)?, lambda })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_check, l2_normalize};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_unit(rng: &mut ChaCha8Rng, m: usize, d: usize) -> Matrix {
        let data: Vec<f64> = (0..m * d).map(|_| rng.sample(StandardNormal)).collect();
        l2_normalize(&Matrix::new(m, d, data).unwrap()).unwrap()
    }

    // literal transcription of the per-instance formulas, independent of the tape
    fn kisp_oracle(pre: &Matrix, cur: &Matrix, tau: f64) -> f64 {
        let m = pre.rows();
        let d = pre.cols();
        let inner = |i: usize, j: usize| -> f64 { (0..d).map(|c| pre.get(i, c) * cur.get(j, c)).sum() };
        let p = |i: usize, j: usize| -> f64 {
            let num = (inner(i, j) / tau).exp();
            let mut den = 0.0;
            for k in 0..m {
                den += (inner(k, j) / tau).exp();
            }
            num / den
        };
        let mut j_total = 0.0;
        for i in 0..m {
            j_total -= p(i, i).ln();
            for j in 0..m {
                if j != i {
                    j_total -= (1.0 - p(i, j)).ln();
                }
            }
        }
        j_total
    }

    // unit vectors in the plane at the given angles
    fn plane(angles: &[f64], d: usize) -> Matrix {
        let rows: Vec<Vec<f64>> = angles
            .iter()
            .map(|a| {
                let mut r = vec![0.0; d];
                r[0] = a.cos();
                r[1] = a.sin();
                r
            })
            .collect();
        Matrix::from_rows(&rows).unwrap()
    }

    #[test]
    fn cross_entropy_values() {
        let uniform = Matrix::filled(3, 4, 0.7);
        assert!((cross_entropy(&uniform, &[0, 1, 3]).unwrap() - 4f64.ln()).abs() < 1e-12);
        let two = Matrix::from_rows(&[[2.0, 0.0]]).unwrap();
        let expected = -(2f64.exp() / (2f64.exp() + 1.0)).ln();
        assert!((cross_entropy(&two, &[0]).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.126928).abs() < 1e-6);
        let sat = Matrix::from_rows(&[[50.0, 0.0, 0.0]]).unwrap();
        assert!(cross_entropy(&sat, &[0]).unwrap() < 1e-12);
        assert!(matches!(cross_entropy(&two, &[2]), Err(Error::LabelOutOfRange { label: 2, .. })));
    }

    #[test]
    fn single_instance_probability_is_one() {
        let f = Matrix::from_rows(&[[0.6, 0.8]]).unwrap();
        let batch = KispBatch::new(f.clone(), f, 0.1).unwrap();
        assert_eq!(kisp_probs(&batch).as_scalar(), Some(1.0));
        assert_eq!(kisp_loss(&batch), 0.0);
    }

    #[test]
    fn orthonormal_pair_closed_form() {
        let basis = Matrix::identity(2);
        let batch = KispBatch::new(basis.clone(), basis, 0.1).unwrap();
        let p = kisp_probs(&batch);
        let e10 = 10f64.exp();
        assert!((p.get(0, 0) - e10 / (e10 + 1.0)).abs() < 1e-15);
        assert!((p.get(0, 1) - 1.0 / (e10 + 1.0)).abs() < 1e-15);
        assert!((p.get(0, 0) - 0.9999546).abs() < 1e-7);
        assert!((p.get(0, 1) - 4.5398e-5).abs() < 1e-9);
        // 2 * (-ln(e10/(e10+1))) + 2 * (-ln(1 - 1/(e10+1))) = 4 ln(1 + e^-10)
        let expected = 4.0 * (-10f64).exp().ln_1p();
        assert!((kisp_loss(&batch) - expected).abs() < 1e-12);
        assert!((kisp_loss(&batch) - 1.816e-4).abs() < 1e-7);
    }

    #[test]
    fn identical_live_rows_give_identical_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pre = random_unit(&mut rng, 4, 5);
        let one = random_unit(&mut rng, 1, 5);
        let cur = Matrix::vstack(&[&one, &one, &one, &one]).unwrap();
        let p = kisp_probs(&KispBatch::new(pre, cur, 0.1).unwrap());
        for r in 0..4 {
            for c in 1..4 {
                assert_eq!(p.get(r, c), p.get(r, 0));
            }
        }
    }

    #[test]
    fn kisp_matches_brute_force_transcription() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..20 {
            let pre = random_unit(&mut rng, 3, 4);
            let cur = random_unit(&mut rng, 3, 4);
            let batch = KispBatch::new(pre.clone(), cur.clone(), 0.1).unwrap();
            assert!((kisp_loss(&batch) - kisp_oracle(&pre, &cur, 0.1)).abs() < 1e-10);
        }
    }

    #[test]
    fn batch_validation() {
        let a = Matrix::identity(2);
        assert!(KispBatch::new(a.clone(), Matrix::identity(3), 0.1).is_err());
        assert!(KispBatch::new(a.clone(), a.map(|v| 2.0 * v), 0.1).is_err());
        assert!(KispBatch::new(a.clone(), a, 0.0).is_err());
    }

    #[test]
    fn total_loss_rules() {
        assert_eq!(total_loss(1.3, 7.0, 0.0).unwrap(), 1.3);
        assert_eq!(total_loss(1.0, 2.0, 0.5).unwrap(), 2.0);
        assert!(total_loss(1.0, 2.0, -0.1).is_err());
        let b = LossBreakdown::new(0.4, 0.0, 3.0).unwrap();
        assert_eq!(b.total, b.ce);
    }

    #[test]
    fn lfc_values() {
        let pre = Matrix::identity(3);
        let b = |cur: Matrix| lfc_loss(&KispBatch::new(pre.clone(), cur, 0.1).unwrap());
        assert_eq!(b(pre.clone()), 0.0);
        let rotated = Matrix::from_rows(&[[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]]).unwrap();
        assert_eq!(b(rotated), 1.0);
        assert_eq!(b(pre.map(|v| -v)), 2.0);
    }

    #[test]
    fn rld_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pre = Matrix::new(3, 5, (0..15).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let cur = Matrix::new(3, 5, (0..15).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        assert_eq!(rld_loss(&pre, &pre).unwrap(), 0.0);
        assert_eq!(rld_loss(&Matrix::scalar(0.0), &Matrix::scalar(2.0)).unwrap(), 4.0);
        let mut expected = 0.0;
        for i in 0..3 {
            for c in 0..5 {
                expected += (pre.get(i, c) - cur.get(i, c)).powi(2);
            }
        }
        expected /= 15.0;
        assert!((rld_loss(&pre, &cur).unwrap() - expected).abs() < 1e-12);
        assert!(rld_loss(&pre, &Matrix::zeros(2, 5)).is_err());
    }

    #[test]
    fn alignment_monotonicity() {
        // memory 1 swings toward its snapshot direction through a plane
        // orthogonal to memory 2, so every off-diagonal similarity stays 0
        let pre = Matrix::identity(3).slice_rows(0, 2).unwrap();
        let mut last = f64::INFINITY;
        for step in (0..=40).rev() {
            let theta = std::f64::consts::FRAC_PI_2 * step as f64 / 40.0;
            let cur = Matrix::from_rows(&[[theta.cos(), 0.0, theta.sin()], [0.0, 1.0, 0.0]]).unwrap();
            let j = kisp_loss(&KispBatch::new(pre.clone(), cur, 0.1).unwrap());
            assert!(j <= last + 1e-12, "theta {theta}: {j} > {last}");
            last = j;
        }
    }

    #[test]
    fn spread_out_monotonicity() {
        let mut last = f64::INFINITY;
        for step in 1..=40 {
            let psi = std::f64::consts::FRAC_PI_2 * step as f64 / 40.0;
            let f = plane(&[0.0, psi], 3);
            let j = kisp_loss(&KispBatch::new(f.clone(), f, 0.1).unwrap());
            assert!(j <= last + 1e-12, "psi {psi}: {j} > {last}");
            last = j;
        }
    }

    #[test]
    fn kisp_gradient_through_normalization() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let m = rng.random_range(1..=6);
            let d = rng.random_range(2..=8);
            let pre = random_unit(&mut rng, m, d);
            let raw: Vec<f64> = (0..m * d).map(|_| rng.sample(StandardNormal)).collect();
            let raw = Matrix::new(m, d, raw).unwrap();
            let f = |p: &[Matrix]| {
                let mut tape = Tape::new();
                let c = tape.leaf(p[0].clone());
                let cn = tape.l2_normalize(c)?;
                let pr = tape.constant(pre.clone());
                let loss = kisp_on(&mut tape, pr, cn, 0.1)?;
                let g = tape.backward(loss)?;
                Ok((tape.value(loss).get(0, 0), vec![g.get(c).unwrap().clone()]))
            };
            assert!(finite_diff_check(&f, &[raw], 1e-5).unwrap() < 1e-4);
        }
    }

    proptest! {
        #[test]
        fn columns_sum_to_one_and_loss_non_negative(
            m in 1usize..=64, d in 2usize..6, tau in 0.01f64..10.0, seed in 0u64..10_000
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let batch = KispBatch::new(random_unit(&mut rng, m, d), random_unit(&mut rng, m, d), tau).unwrap();
            let p = kisp_probs(&batch);
            for c in 0..m {
                let s: f64 = (0..m).map(|r| p.get(r, c)).sum();
                prop_assert!((s - 1.0).abs() <= 1e-10);
            }
            prop_assert!(kisp_loss(&batch) >= 0.0);
        }
    }
}
