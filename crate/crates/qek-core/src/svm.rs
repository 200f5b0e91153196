//! Kernel SVM with class weights, stratified k-fold CV, and grid search.
//!
//! The solver minimizes the soft-margin dual
//!   1/2 a' Q a - sum(a),  Q_ij = y_i y_j K_ij,  0 <= a_i <= C w(y_i),
//! by sequential minimal optimization on the maximal violating pair, with
//! deterministic lowest-index tie-breaks. Labels are {1, 2}; class 1 is the
//! positive class for every metric.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::features::KernelMatrix;
use crate::seeding;
use crate::{Error, Result};

const KKT_TOL: f64 = 1e-6;
const MAX_PAIR_UPDATES: usize = 400_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvmHyperparams {
    #[serde(rename = "C")]
    pub c: f64,
    /// (class-1 weight, class-2 weight).
    #[serde(rename = "w")]
    pub weights: (f64, f64),
}

impl SvmHyperparams {
    pub fn new(c: f64, weights: (f64, f64)) -> Result<Self> {
        if !(c.is_finite() && c > 0.0 && weights.0.is_finite() && weights.0 > 0.0 && weights.1.is_finite() && weights.1 > 0.0)
        {
            return Err(Error::Config(format!(
                "SVM hyperparameters must be positive, got C = {c}, w = {weights:?}"
            )));
        }
        Ok(SvmHyperparams { c, weights })
    }

    fn box_for(&self, label: u8) -> f64 {
        if label == 1 {
            self.c * self.weights.0
        } else {
            self.c * self.weights.1
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SvmModel {
    /// alpha_i * y_i per training point.
    pub coef: Vec<f64>,
    pub bias: f64,
    /// Indices with alpha > 0, ascending.
    pub support: Vec<usize>,
    pub training_ids: Vec<u64>,
}

impl SvmModel {
    /// Decision value for one test point given its similarities to every
    /// training point.
    pub fn decision(&self, kernel_row: &[f64]) -> Result<f64> {
        if kernel_row.len() != self.coef.len() {
            return Err(Error::DimensionMismatch {
                expected: self.coef.len(),
                got: kernel_row.len(),
            });
        }
        Ok(self
            .coef
            .iter()
            .zip(kernel_row)
            .map(|(c, k)| c * k)
            .sum::<f64>()
            + self.bias)
    }
}

fn to_sign(label: u8) -> f64 {
    if label == 1 {
        1.0
    } else {
        -1.0
    }
}

/// Train on a dense row-major Gram matrix over the training points.
pub fn train_svm(gram: &[f64], labels: &[u8], ids: &[u64], hp: &SvmHyperparams) -> Result<SvmModel> {
    let n = labels.len();
    if gram.len() != n * n || ids.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n * n,
            got: gram.len(),
        });
    }
    SvmHyperparams::new(hp.c, hp.weights)?;
    for (i, &l) in labels.iter().enumerate() {
        if l != 1 && l != 2 {
            return Err(Error::Config(format!("label at index {i} must be 1 or 2, got {l}")));
        }
    }
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(Error::SingleClass);
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if (gram[i * n + j] - gram[j * n + i]).abs() > 1e-8 {
                return Err(Error::NotSymmetric { i, j });
            }
        }
    }

    let y: Vec<f64> = labels.iter().map(|&l| to_sign(l)).collect();
    let cap: Vec<f64> = labels.iter().map(|&l| hp.box_for(l)).collect();

    let mut alpha = vec![0.0f64; n];
    // Gradient of the dual objective: G_i = sum_j Q_ij a_j - 1.
    let mut grad = vec![-1.0f64; n];

    let mut updates = 0;
    loop {
        // Maximal violating pair: m = max over I_up of -y G, M = min over
        // I_low; optimal within KKT_TOL when m - M <= tol.
        let mut i_sel = usize::MAX;
        let mut m_val = f64::NEG_INFINITY;
        let mut j_sel = usize::MAX;
        let mut big_m = f64::INFINITY;
        for t in 0..n {
            let v = -y[t] * grad[t];
            let in_up = (y[t] > 0.0 && alpha[t] < cap[t]) || (y[t] < 0.0 && alpha[t] > 0.0);
            let in_low = (y[t] > 0.0 && alpha[t] > 0.0) || (y[t] < 0.0 && alpha[t] < cap[t]);
            if in_up && v > m_val {
                m_val = v;
                i_sel = t;
            }
            if in_low && v < big_m {
                big_m = v;
                j_sel = t;
            }
        }
        if i_sel == usize::MAX || j_sel == usize::MAX || m_val - big_m <= KKT_TOL {
            let bias = bias_from_gradient(&alpha, &grad, &y, &cap, m_val, big_m);
            let coef: Vec<f64> = alpha.iter().zip(&y).map(|(a, s)| a * s).collect();
            let support = (0..n).filter(|&i| alpha[i] > 1e-12).collect();
            return Ok(SvmModel {
                coef,
                bias,
                support,
                training_ids: ids.to_vec(),
            });
        }
        if updates >= MAX_PAIR_UPDATES {
            return Err(Error::Numerical(format!(
                "SMO did not reach tolerance {KKT_TOL} within {MAX_PAIR_UPDATES} updates (gap {})",
                m_val - big_m
            )));
        }

        let (i, j) = (i_sel, j_sel);
        // Step along d = y_i e_i - y_j e_j, which preserves sum(a y).
        let quad = (gram[i * n + i] + gram[j * n + j] - 2.0 * gram[i * n + j]).max(1e-12);
        let mut t_step = (m_val - big_m) / quad;
        t_step = t_step
            .min(if y[i] > 0.0 { cap[i] - alpha[i] } else { alpha[i] })
            .min(if y[j] > 0.0 { alpha[j] } else { cap[j] - alpha[j] });

        alpha[i] += y[i] * t_step;
        alpha[j] -= y[j] * t_step;
        // Clamp accumulated round-off at the box.
        alpha[i] = alpha[i].clamp(0.0, cap[i]);
        alpha[j] = alpha[j].clamp(0.0, cap[j]);

        for t in 0..n {
            grad[t] += y[t] * t_step * (gram[t * n + i] - gram[t * n + j]);
        }
        updates += 1;
    }
}

fn bias_from_gradient(alpha: &[f64], grad: &[f64], y: &[f64], cap: &[f64], m_val: f64, big_m: f64) -> f64 {
    // Free support vectors pin the bias exactly: b = -y_i G_i there.
    let mut sum = 0.0;
    let mut count = 0usize;
    for t in 0..alpha.len() {
        if alpha[t] > 1e-12 && alpha[t] < cap[t] - 1e-12 {
            sum += -y[t] * grad[t];
            count += 1;
        }
    }
    if count > 0 {
        sum / count as f64
    } else if m_val.is_finite() && big_m.is_finite() {
        (m_val + big_m) / 2.0
    } else {
        0.0
    }
}

/// Predicted labels for rows of test-vs-training similarities. Decision
/// value >= 0 maps to class 1.
pub fn predict(model: &SvmModel, kernel_rows: &[Vec<f64>]) -> Result<Vec<u8>> {
    kernel_rows
        .iter()
        .map(|row| model.decision(row).map(|d| if d >= 0.0 { 1 } else { 2 }))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub f1: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Binary metrics with class 1 positive.
pub fn evaluate(y_true: &[u8], y_pred: &[u8]) -> Result<Metrics> {
    if y_true.len() != y_pred.len() {
        return Err(Error::DimensionMismatch {
            expected: y_true.len(),
            got: y_pred.len(),
        });
    }
    if y_true.is_empty() {
        return Err(Error::EmptyInput("metrics need at least one example".into()));
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    let mut tn = 0usize;
    for (&t, &p) in y_true.iter().zip(y_pred) {
        match (t == 1, p == 1) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let precision = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
    let recall = if tp + fn_ > 0 { tp as f64 / (tp + fn_) as f64 } else { 0.0 };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(Metrics {
        f1,
        accuracy: (tp + tn) as f64 / y_true.len() as f64,
        precision,
        recall,
    })
}

fn mean_metrics(folds: &[Metrics]) -> Metrics {
    let n = folds.len().max(1) as f64;
    Metrics {
        f1: folds.iter().map(|m| m.f1).sum::<f64>() / n,
        accuracy: folds.iter().map(|m| m.accuracy).sum::<f64>() / n,
        precision: folds.iter().map(|m| m.precision).sum::<f64>() / n,
        recall: folds.iter().map(|m| m.recall).sum::<f64>() / n,
    }
}

/// Seeded stratified folds: each class is shuffled and dealt round-robin, so
/// per-fold class proportions match the corpus within one sample.
pub fn stratified_folds(labels: &[u8], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::Config(format!("k-fold needs k >= 2, got {k}")));
    }
    let mut folds = vec![Vec::new(); k];
    let mut rng = ChaCha12Rng::seed_from_u64(seeding::stream_seed(seed, "folds", &[]));
    let mut cursor = 0usize;
    for class in [1u8, 2] {
        let mut members: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(i, _)| i)
            .collect();
        members.shuffle(&mut rng);
        for idx in members {
            folds[cursor % k].push(idx);
            cursor += 1;
        }
    }
    for fold in folds.iter_mut() {
        fold.sort_unstable();
    }
    Ok(folds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchGrid {
    pub c_values: Vec<f64>,
    /// (class-1 weight, class-2 weight) pairs.
    pub weight_pairs: Vec<(f64, f64)>,
}

impl SearchGrid {
    /// 100 log-spaced C in [1e-4, 1e4] x 30 minority weights log-spaced in
    /// [1, 1000].
    pub fn paper_default() -> Self {
        SearchGrid {
            c_values: log_space(1e-4, 1e4, 100),
            weight_pairs: log_space(1.0, 1000.0, 30).into_iter().map(|x| (x, 1.0)).collect(),
        }
    }

    /// A small grid for quick runs: 10 C values, 5 weights.
    pub fn coarse() -> Self {
        SearchGrid {
            c_values: log_space(1e-2, 1e2, 10),
            weight_pairs: log_space(1.0, 30.0, 5).into_iter().map(|x| (x, 1.0)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.c_values.len() * self.weight_pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn log_space(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..count)
        .map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp())
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridSearchOutcome {
    pub best: SvmHyperparams,
    /// Held-out metrics of the best hyperparameters, one per non-empty fold.
    pub folds: Vec<Metrics>,
    pub mean: Metrics,
}

struct FoldData {
    train_idx: Vec<usize>,
    /// Training Gram, eigenshifted if its minimum eigenvalue < -1e-6.
    gram: Vec<f64>,
    train_labels: Vec<u8>,
    train_ids: Vec<u64>,
    valid_labels: Vec<u8>,
    /// Validation-vs-training similarities from the unshifted kernel.
    valid_rows: Vec<Vec<f64>>,
}

fn prepare_fold(kernel: &KernelMatrix, labels: &[u8], fold: &[usize], n: usize) -> FoldData {
    let in_fold: Vec<bool> = {
        let mut f = vec![false; n];
        for &i in fold {
            f[i] = true;
        }
        f
    };
    let train_idx: Vec<usize> = (0..n).filter(|&i| !in_fold[i]).collect();
    let mut gram = kernel.submatrix(&train_idx);
    shift_if_indefinite(&mut gram, train_idx.len());
    FoldData {
        gram,
        train_labels: train_idx.iter().map(|&i| labels[i]).collect(),
        train_ids: train_idx.iter().map(|&i| kernel.graph_ids[i]).collect(),
        valid_labels: fold.iter().map(|&i| labels[i]).collect(),
        valid_rows: fold
            .iter()
            .map(|&v| train_idx.iter().map(|&t| kernel.get(v, t)).collect())
            .collect(),
        train_idx,
    }
}

/// Diagonal shift by |lambda_min| when the Gram is indefinite beyond -1e-6.
fn shift_if_indefinite(gram: &mut [f64], m: usize) {
    if m == 0 {
        return;
    }
    let mat = nalgebra::DMatrix::from_row_slice(m, m, gram);
    let min_eig = mat
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    if min_eig < -1e-6 {
        let shift = -min_eig;
        for d in 0..m {
            gram[d * m + d] += shift;
        }
    }
}

/// Stratified k-fold grid search; best point maximizes mean F1 with ties
/// broken toward lower C, then lower class-1 weight.
pub fn kfold_grid_search(
    kernel: &KernelMatrix,
    labels: &[u8],
    grid: &SearchGrid,
    k: usize,
    seed: u64,
) -> Result<GridSearchOutcome> {
    let n = kernel.n();
    if labels.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: labels.len(),
        });
    }
    if grid.is_empty() {
        return Err(Error::Config("empty hyperparameter grid".into()));
    }
    if !labels.iter().any(|&l| l == 1) || !labels.iter().any(|&l| l == 2) {
        return Err(Error::SingleClass);
    }
    kernel.check_symmetric(1e-8)?;

    let folds = stratified_folds(labels, k, seed)?;
    let fold_data: Vec<FoldData> = folds
        .par_iter()
        .filter(|f| !f.is_empty())
        .map(|f| prepare_fold(kernel, labels, f, n))
        .collect();
    if fold_data.iter().any(|f| f.train_idx.is_empty()) {
        return Err(Error::Config("a fold left no training data; reduce k".into()));
    }

    // Grid points in (C asc, weight asc) order so the strict-improvement
    // scan lands on the tie-break winner.
    let points: Vec<SvmHyperparams> = grid
        .c_values
        .iter()
        .flat_map(|&c| grid.weight_pairs.iter().map(move |&w| SvmHyperparams { c, weights: w }))
        .collect();

    let evaluated: Vec<(f64, Vec<Metrics>)> = points
        .par_iter()
        .map(|hp| -> Result<(f64, Vec<Metrics>)> {
            let mut per_fold = Vec::with_capacity(fold_data.len());
            for fd in &fold_data {
                let model = train_svm(&fd.gram, &fd.train_labels, &fd.train_ids, hp)?;
                let pred = predict(&model, &fd.valid_rows)?;
                per_fold.push(evaluate(&fd.valid_labels, &pred)?);
            }
            let mean_f1 = per_fold.iter().map(|m| m.f1).sum::<f64>() / per_fold.len().max(1) as f64;
            Ok((mean_f1, per_fold))
        })
        .collect::<Result<_>>()?;

    let mut best_idx = 0usize;
    for (idx, (f1, _)) in evaluated.iter().enumerate() {
        if *f1 > evaluated[best_idx].0 {
            best_idx = idx;
        }
    }
    let (_, folds_metrics) = &evaluated[best_idx];
    Ok(GridSearchOutcome {
        best: points[best_idx],
        folds: folds_metrics.clone(),
        mean: mean_metrics(folds_metrics),
    })
}

/// Predict-the-majority baseline over the same folds, for comparison rows.
pub fn majority_baseline(labels: &[u8], folds: &[Vec<usize>]) -> Result<Metrics> {
    let mut per_fold = Vec::new();
    for fold in folds.iter().filter(|f| !f.is_empty()) {
        let train: Vec<u8> = labels
            .iter()
            .enumerate()
            .filter(|(i, _)| !fold.contains(i))
            .map(|(_, &l)| l)
            .collect();
        let ones = train.iter().filter(|&&l| l == 1).count();
        let majority = if ones * 2 > train.len() { 1u8 } else { 2u8 };
        let y_true: Vec<u8> = fold.iter().map(|&i| labels[i]).collect();
        let y_pred = vec![majority; y_true.len()];
        per_fold.push(evaluate(&y_true, &y_pred)?);
    }
    if per_fold.is_empty() {
        return Err(Error::EmptyInput("no non-empty folds".into()));
    }
    Ok(mean_metrics(&per_fold))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::KernelKind;
    use approx::assert_relative_eq;

    fn block_kernel(labels: &[u8], within: f64, cross: f64) -> Vec<f64> {
        let n = labels.len();
        let mut k = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                k[i * n + j] = if i == j {
                    1.0
                } else if labels[i] == labels[j] {
                    within
                } else {
                    cross
                };
            }
        }
        k
    }

    fn ids(n: usize) -> Vec<u64> {
        (1..=n as u64).collect()
    }

    fn dual_objective(gram: &[f64], labels: &[u8], alpha: &[f64]) -> f64 {
        let n = labels.len();
        let y: Vec<f64> = labels.iter().map(|&l| to_sign(l)).collect();
        let mut obj = 0.0;
        for i in 0..n {
            for j in 0..n {
                obj += 0.5 * alpha[i] * alpha[j] * y[i] * y[j] * gram[i * n + j];
            }
            obj -= alpha[i];
        }
        obj
    }

    /// Exact QP reference: enumerate every {lower, upper, free} pattern and
    /// solve the KKT system of the free block.
    fn oracle_dual_objective(gram: &[f64], labels: &[u8], hp: &SvmHyperparams) -> f64 {
        use nalgebra::{DMatrix, DVector};
        let n = labels.len();
        let y: Vec<f64> = labels.iter().map(|&l| to_sign(l)).collect();
        let cap: Vec<f64> = labels.iter().map(|&l| hp.box_for(l)).collect();
        let eps = 1e-9;
        let mut best = f64::INFINITY;
        let mut pattern = vec![0u8; n];
        let total = 3usize.pow(n as u32);
        for code in 0..total {
            let mut c = code;
            for p in pattern.iter_mut() {
                *p = (c % 3) as u8; // 0 = at 0, 1 = at cap, 2 = free
                c /= 3;
            }
            let free: Vec<usize> = (0..n).filter(|&i| pattern[i] == 2).collect();
            let mut alpha: Vec<f64> = (0..n)
                .map(|i| if pattern[i] == 1 { cap[i] } else { 0.0 })
                .collect();

            let nu;
            if free.is_empty() {
                let bal: f64 = (0..n).map(|i| alpha[i] * y[i]).sum();
                if bal.abs() > eps {
                    continue;
                }
                // nu must fit every bound-side KKT inequality.
                let mut lo = f64::NEG_INFINITY;
                let mut hi = f64::INFINITY;
                for i in 0..n {
                    let g: f64 = (0..n).map(|j| y[i] * y[j] * gram[i * n + j] * alpha[j]).sum::<f64>() - 1.0;
                    let at_zero = pattern[i] == 0;
                    // stationarity: g - nu y_i = lambda (>=0 at zero) or -mu (<=0 at cap)
                    if at_zero {
                        if y[i] > 0.0 {
                            hi = hi.min(g);
                        } else {
                            lo = lo.max(-g);
                        }
                    } else if y[i] > 0.0 {
                        lo = lo.max(g);
                    } else {
                        hi = hi.min(-g);
                    }
                }
                if lo > hi + eps {
                    continue;
                }
                nu = 0.5 * (lo.max(-1e12) + hi.min(1e12));
                let _ = nu;
            } else {
                let f = free.len();
                let mut a = DMatrix::zeros(f + 1, f + 1);
                let mut b = DVector::zeros(f + 1);
                for (r, &i) in free.iter().enumerate() {
                    for (cc, &j) in free.iter().enumerate() {
                        a[(r, cc)] = y[i] * y[j] * gram[i * n + j];
                    }
                    a[(r, f)] = -y[i];
                    let fixed: f64 = (0..n)
                        .filter(|&j| pattern[j] == 1)
                        .map(|j| y[i] * y[j] * gram[i * n + j] * cap[j])
                        .sum();
                    b[r] = 1.0 - fixed;
                    a[(f, r)] = y[i];
                }
                let fixed_bal: f64 = (0..n).filter(|&j| pattern[j] == 1).map(|j| y[j] * cap[j]).sum();
                b[f] = -fixed_bal;
                let Some(sol) = a.lu().solve(&b) else { continue };
                let mut ok = true;
                for (r, &i) in free.iter().enumerate() {
                    let v = sol[r];
                    if !(eps..=cap[i] - eps).contains(&v) {
                        ok = false;
                        break;
                    }
                    alpha[i] = v;
                }
                if !ok {
                    continue;
                }
                let nu_v = sol[f];
                // Bound-side inequalities.
                for i in 0..n {
                    if pattern[i] == 2 {
                        continue;
                    }
                    let g: f64 = (0..n).map(|j| y[i] * y[j] * gram[i * n + j] * alpha[j]).sum::<f64>() - 1.0;
                    let s = g - nu_v * y[i];
                    if pattern[i] == 0 && s < -eps {
                        ok = false;
                        break;
                    }
                    if pattern[i] == 1 && s > eps {
                        ok = false;
                        break;
                    }
                }
                if !ok {
                    continue;
                }
            }
            best = best.min(dual_objective(gram, labels, &alpha));
        }
        best
    }

    #[test]
    fn block_kernel_separates_training_data() {
        let labels = [1u8, 1, 2, 2];
        let gram = block_kernel(&labels, 1.0, 0.5);
        let hp = SvmHyperparams::new(1.0, (1.0, 1.0)).unwrap();
        let model = train_svm(&gram, &labels, &ids(4), &hp).unwrap();

        let rows: Vec<Vec<f64>> = (0..4).map(|i| (0..4).map(|j| gram[i * 4 + j]).collect()).collect();
        let pred = predict(&model, &rows).unwrap();
        assert_eq!(pred, labels);
        // Fully symmetric problem pins the bias at zero.
        assert!(model.bias.abs() < 1e-9, "bias {}", model.bias);

        // Fresh within-class-1 point.
        let test_row = vec![1.0, 1.0, 0.5, 0.5];
        assert_eq!(predict(&model, &[test_row]).unwrap(), vec![1]);
    }

    #[test]
    fn smo_objective_matches_enumeration_oracle() {
        let cases: Vec<(Vec<u8>, Vec<f64>, SvmHyperparams)> = vec![
            (
                vec![1, 1, 2, 2],
                block_kernel(&[1, 1, 2, 2], 0.9, 0.4),
                SvmHyperparams::new(1.0, (1.0, 1.0)).unwrap(),
            ),
            (
                vec![1, 2, 2, 2, 1],
                block_kernel(&[1, 2, 2, 2, 1], 0.8, 0.6),
                SvmHyperparams::new(0.7, (3.0, 1.0)).unwrap(),
            ),
            (
                vec![1, 1, 1, 2, 2, 2],
                {
                    // Noisy symmetric PSD kernel: B B^T row-normalized.
                    let n = 6;
                    let mut b = vec![0.0; n * 3];
                    let mut state = 88172645463325252u64;
                    let mut next = || {
                        state ^= state << 13;
                        state ^= state >> 7;
                        state ^= state << 17;
                        (state >> 11) as f64 / (1u64 << 53) as f64
                    };
                    for (i, x) in b.iter_mut().enumerate() {
                        *x = next() + if (i / 3) < 3 { 0.8 } else { 0.0 };
                    }
                    let mut k = vec![0.0; n * n];
                    for i in 0..n {
                        for j in 0..n {
                            k[i * n + j] = (0..3).map(|d| b[i * 3 + d] * b[j * 3 + d]).sum();
                        }
                    }
                    let norm: Vec<f64> = (0..n).map(|i| k[i * n + i].sqrt()).collect();
                    for i in 0..n {
                        for j in 0..n {
                            k[i * n + j] /= norm[i] * norm[j];
                        }
                    }
                    k
                },
                SvmHyperparams::new(5.0, (2.0, 1.0)).unwrap(),
            ),
        ];
        for (labels, gram, hp) in cases {
            let model = train_svm(&gram, &labels, &ids(labels.len()), &hp).unwrap();
            let alpha: Vec<f64> = model.coef.iter().zip(&labels).map(|(c, &l)| c * to_sign(l)).collect();
            let ours = dual_objective(&gram, &labels, &alpha);
            let oracle = oracle_dual_objective(&gram, &labels, &hp);
            assert!(
                (ours - oracle).abs() < 1e-5,
                "objective {ours} vs oracle {oracle} for labels {labels:?}"
            );
        }
    }

    #[test]
    fn model_satisfies_box_and_balance_constraints() {
        let labels = [1u8, 2, 1, 2, 2, 1, 2];
        let gram = block_kernel(&labels, 0.85, 0.55);
        let hp = SvmHyperparams::new(2.0, (4.0, 1.0)).unwrap();
        let model = train_svm(&gram, &labels, &ids(7), &hp).unwrap();
        let mut balance = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            let alpha = model.coef[i] * to_sign(l);
            assert!(alpha >= -1e-12 && alpha <= hp.box_for(l) + 1e-12);
            balance += model.coef[i];
        }
        assert!(balance.abs() < 1e-6, "sum alpha_i y_i = {balance}");
    }

    #[test]
    fn duplicating_an_interior_point_keeps_decisions() {
        let labels = [1u8, 1, 2, 2];
        let gram = block_kernel(&labels, 0.9, 0.5);
        let hp = SvmHyperparams::new(10.0, (1.0, 1.0)).unwrap();
        let model = train_svm(&gram, &labels, &ids(4), &hp).unwrap();
        // All alphas interior at this C.
        for (i, &l) in labels.iter().enumerate() {
            let a = model.coef[i] * to_sign(l);
            assert!(a > 1e-6 && a < hp.box_for(l) - 1e-6, "alpha[{i}] = {a} not interior");
        }

        // Duplicate point 0.
        let labels2 = [1u8, 1, 1, 2, 2];
        let n2 = 5;
        let map = [0usize, 0, 1, 2, 3];
        let mut gram2 = vec![0.0; n2 * n2];
        for i in 0..n2 {
            for j in 0..n2 {
                gram2[i * n2 + j] = gram[map[i] * 4 + map[j]];
            }
        }
        let model2 = train_svm(&gram2, &labels2, &ids(5), &hp).unwrap();

        for i in 0..4 {
            let row: Vec<f64> = (0..4).map(|j| gram[i * 4 + j]).collect();
            let row2: Vec<f64> = (0..n2).map(|j| gram2[map.iter().position(|&m| m == i).unwrap() * n2 + j]).collect();
            let d1 = model.decision(&row).unwrap();
            let d2 = model2.decision(&row2).unwrap();
            assert!((d1 - d2).abs() < 1e-6, "decision drift {d1} vs {d2}");
        }
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        let hp = SvmHyperparams::new(1.0, (1.0, 1.0)).unwrap();
        assert!(matches!(
            train_svm(&block_kernel(&[1, 1], 0.9, 0.5), &[1, 1], &ids(2), &hp),
            Err(Error::SingleClass)
        ));
        let mut asym = block_kernel(&[1, 2], 0.9, 0.5);
        asym[1] += 0.1;
        assert!(matches!(
            train_svm(&asym, &[1, 2], &ids(2), &hp),
            Err(Error::NotSymmetric { .. })
        ));
        assert!(SvmHyperparams::new(0.0, (1.0, 1.0)).is_err());
        assert!(SvmHyperparams::new(1.0, (0.0, 1.0)).is_err());
    }

    #[test]
    fn metrics_match_definition_arithmetic() {
        let all_right = evaluate(&[1, 2, 1], &[1, 2, 1]).unwrap();
        assert_eq!(
            all_right,
            Metrics {
                f1: 1.0,
                accuracy: 1.0,
                precision: 1.0,
                recall: 1.0
            }
        );

        // TP=3, FP=1, FN=2, TN=4.
        let y_true = [1u8, 1, 1, 1, 1, 2, 2, 2, 2, 2];
        let y_pred = [1u8, 1, 1, 2, 2, 1, 2, 2, 2, 2];
        let m = evaluate(&y_true, &y_pred).unwrap();
        assert_relative_eq!(m.precision, 0.75);
        assert_relative_eq!(m.recall, 0.6);
        assert_relative_eq!(m.f1, 2.0 * 0.75 * 0.6 / 1.35, max_relative = 1e-12);
        assert_relative_eq!(m.accuracy, 0.7);

        assert!(evaluate(&[1], &[1, 2]).is_err());
        assert!(evaluate(&[], &[]).is_err());
    }

    #[test]
    fn majority_prediction_on_imbalanced_labels_has_zero_f1() {
        // 33 positive vs 110 negative.
        let mut labels = vec![1u8; 33];
        labels.extend(vec![2u8; 110]);
        let pred = vec![2u8; 143];
        let m = evaluate(&labels, &pred).unwrap();
        assert_relative_eq!(m.accuracy, 110.0 / 143.0, max_relative = 1e-12);
        assert_eq!(m.recall, 0.0);
        assert_eq!(m.f1, 0.0);
    }

    #[test]
    fn folds_partition_and_stratify() {
        let mut labels = vec![1u8; 12];
        labels.extend(vec![2u8; 28]);
        let folds = stratified_folds(&labels, 10, 99).unwrap();
        assert_eq!(folds.len(), 10);
        let mut seen = vec![false; 40];
        for fold in &folds {
            for &i in fold {
                assert!(!seen[i], "index {i} in two folds");
                seen[i] = true;
            }
            let ones = fold.iter().filter(|&&i| labels[i] == 1).count();
            // 12/40 = 30% minority; folds of 4 expect 1.2.
            assert!((ones as f64 - 1.2).abs() <= 1.0, "fold minority count {ones}");
        }
        assert!(seen.iter().all(|&s| s));
        assert!(stratified_folds(&labels, 1, 0).is_err());

        let replay = stratified_folds(&labels, 10, 99).unwrap();
        assert_eq!(folds, replay);
    }

    fn toy_kernel(labels: &[u8]) -> KernelMatrix {
        KernelMatrix {
            kind: KernelKind::Spk,
            graph_ids: (1..=labels.len() as u64).collect(),
            values: block_kernel(labels, 0.9, 0.5),
        }
    }

    #[test]
    fn grid_search_is_perfect_on_block_kernels() {
        let labels: Vec<u8> = (0..20).map(|i| if i < 8 { 1 } else { 2 }).collect();
        let kernel = toy_kernel(&labels);
        // Both C values separate the blocks perfectly (the box never binds),
        // so the result is a genuine tie and the scan order decides.
        let grid = SearchGrid {
            c_values: vec![1.0, 10.0],
            weight_pairs: vec![(1.0, 1.0), (3.0, 1.0)],
        };
        let out = kfold_grid_search(&kernel, &labels, &grid, 5, 7).unwrap();
        assert_relative_eq!(out.mean.f1, 1.0);
        assert_relative_eq!(out.mean.accuracy, 1.0);
        assert_relative_eq!(out.best.c, 1.0);
        assert_relative_eq!(out.best.weights.0, 1.0);
    }

    #[test]
    fn single_point_grid_reduces_to_plain_kfold() {
        let labels: Vec<u8> = (0..16).map(|i| if i % 4 == 0 { 1 } else { 2 }).collect();
        let kernel = toy_kernel(&labels);
        let hp = SvmHyperparams::new(2.0, (2.0, 1.0)).unwrap();
        let grid = SearchGrid {
            c_values: vec![hp.c],
            weight_pairs: vec![hp.weights],
        };
        let out = kfold_grid_search(&kernel, &labels, &grid, 4, 3).unwrap();
        assert_eq!(out.best, hp);

        // Manual k-fold with the same folds and hyperparameters.
        let folds = stratified_folds(&labels, 4, 3).unwrap();
        let mut manual = Vec::new();
        for fold in folds.iter().filter(|f| !f.is_empty()) {
            let fd = prepare_fold(&kernel, &labels, fold, labels.len());
            let model = train_svm(&fd.gram, &fd.train_labels, &fd.train_ids, &hp).unwrap();
            let pred = predict(&model, &fd.valid_rows).unwrap();
            manual.push(evaluate(&fd.valid_labels, &pred).unwrap());
        }
        assert_eq!(out.folds, manual);
    }

    #[test]
    fn grid_search_replays_identically() {
        let labels: Vec<u8> = (0..18).map(|i| if i % 3 == 0 { 1 } else { 2 }).collect();
        let kernel = toy_kernel(&labels);
        let grid = SearchGrid::coarse();
        let a = kfold_grid_search(&kernel, &labels, &grid, 6, 11).unwrap();
        let b = kfold_grid_search(&kernel, &labels, &grid, 6, 11).unwrap();
        assert_eq!(a.best, b.best);
        assert_eq!(a.folds, b.folds);
    }

    #[test]
    fn minority_weight_never_hurts_minority_recall() {
        // Slightly overlapping blocks with imbalance; small C so errors
        // surface at low weights.
        for seed in [5u64, 21, 77] {
            let n = 12usize;
            let labels: Vec<u8> = (0..n).map(|i| if i < 3 { 1 } else { 2 }).collect();
            let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
            let mut next = || {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                (state >> 11) as f64 / (1u64 << 53) as f64
            };
            let mut feats: Vec<[f64; 2]> = Vec::new();
            for i in 0..n {
                let base = if labels[i] == 1 { [1.0, 0.2] } else { [0.2, 1.0] };
                feats.push([base[0] + 0.45 * next(), base[1] + 0.45 * next()]);
            }
            let mut gram = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    let dot = feats[i][0] * feats[j][0] + feats[i][1] * feats[j][1];
                    let ni = (feats[i][0].powi(2) + feats[i][1].powi(2)).sqrt();
                    let nj = (feats[j][0].powi(2) + feats[j][1].powi(2)).sqrt();
                    gram[i * n + j] = dot / (ni * nj);
                }
            }
            let mut last_recall = -1.0;
            for w1 in [1.0, 3.0, 10.0, 30.0] {
                let hp = SvmHyperparams::new(0.05, (w1, 1.0)).unwrap();
                let model = train_svm(&gram, &labels, &ids(n), &hp).unwrap();
                let rows: Vec<Vec<f64>> = (0..n).map(|i| gram[i * n..(i + 1) * n].to_vec()).collect();
                let pred = predict(&model, &rows).unwrap();
                let m = evaluate(&labels, &pred).unwrap();
                assert!(
                    m.recall >= last_recall - 1e-12,
                    "recall dropped from {last_recall} to {} at w1 = {w1} (seed {seed})",
                    m.recall
                );
                last_recall = m.recall;
            }
            assert!(last_recall > 0.99, "heaviest weight should recover recall, got {last_recall}");
        }
    }

    #[test]
    fn indefinite_kernels_are_shifted_before_training() {
        // A symmetric matrix with a negative eigenvalue.
        let labels = [1u8, 1, 2, 2];
        let mut values = block_kernel(&labels, 0.9, 0.5);
        values[0 * 4 + 3] = 1.4;
        values[3 * 4 + 0] = 1.4;
        let kernel = KernelMatrix {
            kind: KernelKind::Spk,
            graph_ids: vec![1, 2, 3, 4],
            values,
        };
        let grid = SearchGrid {
            c_values: vec![1.0],
            weight_pairs: vec![(1.0, 1.0)],
        };
        // Without the shift the dual is unbounded along the negative
        // direction; with it, training must converge.
        let out = kfold_grid_search(&kernel, &labels, &grid, 2, 1).unwrap();
        assert!(out.mean.accuracy.is_finite());
    }

    #[test]
    fn majority_baseline_mirrors_class_balance() {
        let mut labels = vec![1u8; 4];
        labels.extend(vec![2u8; 12]);
        let folds = stratified_folds(&labels, 4, 2).unwrap();
        let m = majority_baseline(&labels, &folds).unwrap();
        assert_eq!(m.f1, 0.0);
        assert_relative_eq!(m.accuracy, 0.75, max_relative = 1e-12);
    }
}
