//! Bounds on the best achievable KL divergence of rank-d sequence encoders:
//! the optimization-based lower-bound estimate, the circle encoder for
//! lookup tasks, the near-orthogonal-unembedding upper bound with its
//! per-sequence temperature equation, capacity/parameter comparisons, and
//! the centered-logit diagnostic.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::model::TokenSeq;
use crate::numkernel::{log_softmax, softmax, Matrix, Rng};
use crate::task::{check_assumptions, negentropy, TaskDistribution};
use crate::{Error, Result};

/// A rank-d sequence encoder: unembedding `W` (N x d) and one embedding
/// vector per supported sequence. Logits are `W * E(t)`, so the logit table
/// has rank at most d.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SequenceEncoder {
    pub w: Matrix,
    /// Embedding per support index of the task it was built for.
    pub e_table: Vec<Vec<f64>>,
}

impl SequenceEncoder {
    pub fn dim(&self) -> usize {
        self.w.cols
    }

    pub fn logits(&self, idx: usize) -> Vec<f64> {
        self.w.matvec(&self.e_table[idx])
    }

    /// N x T matrix of logits, one column per supported sequence.
    pub fn logit_matrix(&self) -> Matrix {
        let mut m = Matrix::zeros(self.w.rows, self.e_table.len());
        for j in 0..self.e_table.len() {
            m.set_col(j, &self.logits(j));
        }
        m
    }

    /// d x T matrix of embeddings, one column per supported sequence.
    pub fn embedding_matrix(&self) -> Matrix {
        let mut m = Matrix::zeros(self.dim(), self.e_table.len());
        for (j, e) in self.e_table.iter().enumerate() {
            m.set_col(j, e);
        }
        m
    }

    /// Lookup closure mapping sequences to logits via the task's support.
    pub fn logits_fn<'a>(
        &'a self,
        task: &TaskDistribution,
    ) -> impl FnMut(&TokenSeq) -> Vec<f64> + 'a {
        let index: BTreeMap<TokenSeq, usize> = task
            .support
            .iter()
            .enumerate()
            .map(|(i, (t, _))| (t.clone(), i))
            .collect();
        move |t: &TokenSeq| {
            let idx = *index.get(t).expect("sequence not in task support");
            self.logits(idx)
        }
    }

    /// Prior-averaged KL of this encoder against the task conditionals.
    pub fn kl_against(&self, task: &TaskDistribution) -> f64 {
        let mut total = 0.0;
        for (idx, (_, prior)) in task.support.iter().enumerate() {
            let logq = log_softmax(&self.logits(idx));
            let row = &task.conditionals[idx];
            let mut kl = 0.0;
            for (p, lq) in row.iter().zip(&logq) {
                if *p > 0.0 {
                    kl += p * (p.ln() - lq);
                }
            }
            total += prior * kl;
        }
        total
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OptConfig {
    pub restarts: usize,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl OptConfig {
    pub fn new(seed: u64) -> Self {
        OptConfig {
            restarts: 5,
            steps: 2000,
            lr: 0.05,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OptimizerMeta {
    pub restarts: usize,
    pub iterations: usize,
    pub final_grad_norm: f64,
}

/// Everything the bound computations report.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct BoundReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lower_bound: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub upper_full: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub upper_simplified: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c_gram: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_table: Option<Vec<f64>>,
    /// Measured KL of the explicit near-orthogonal encoder.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub measured_encoder_kl: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub optimizer_meta: Option<OptimizerMeta>,
}

/// Orthonormal basis of the sum-zero subspace of R^n (Helmert columns),
/// n x (n-1).
fn sum_zero_basis(n: usize) -> Matrix {
    let mut b = Matrix::zeros(n, n - 1);
    for k in 1..n {
        let norm = (k as f64 * (k + 1) as f64).sqrt();
        for i in 0..k {
            b[(i, k - 1)] = 1.0 / norm;
        }
        b[(k, k - 1)] = -(k as f64) / norm;
    }
    b
}

/// Flat Adam state used by the encoder optimizer.
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    lr: f64,
    step: i32,
}

impl Adam {
    fn new(len: usize, lr: f64) -> Self {
        Adam {
            m: vec![0.0; len],
            v: vec![0.0; len],
            lr,
            step: 0,
        }
    }

    fn begin_step(&mut self) {
        self.step += 1;
    }

    #[inline]
    fn update(&mut self, k: usize, p: &mut f64, g: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.m[k] = B1 * self.m[k] + (1.0 - B1) * g;
        self.v[k] = B2 * self.v[k] + (1.0 - B2) * g * g;
        let mh = self.m[k] / (1.0 - B1.powi(self.step));
        let vh = self.v[k] / (1.0 - B2.powi(self.step));
        *p -= self.lr * mh / (vh.sqrt() + EPS);
    }
}

/// Estimate the smallest KL achievable by any rank-d sequence encoder on
/// the task, together with the encoder realizing the estimate.
///
/// When `d >= N - 1` and the task has full support the infimum is zero and
/// is realized exactly by embedding the centered log-conditionals. Otherwise
/// the infimum is approximated from above by multi-restart Adam on (W, E)
/// with the exact closed-form KL gradient; the best iterate seen is kept.
/// Without full support the weights are clipped to a ball after each step so
/// the runaway-logit direction stays bounded.
pub fn encoder_lower_bound(
    task: &TaskDistribution,
    d: usize,
    opt: OptConfig,
) -> Result<(BoundReport, SequenceEncoder)> {
    if d < 1 {
        return Err(Error::InvalidArg("encoder dimension must be >= 1".into()));
    }
    let n = task.n;
    let assumptions = check_assumptions(task);

    if d >= n - 1 && assumptions.assumption2 {
        // Exact representation: logits = centered log pi, reachable at rank N-1.
        let basis = sum_zero_basis(n);
        let mut w = Matrix::zeros(n, d);
        for i in 0..n {
            for j in 0..(n - 1) {
                w[(i, j)] = basis[(i, j)];
            }
        }
        let mut e_table = Vec::with_capacity(task.support_size());
        for row in &task.conditionals {
            let logs: Vec<f64> = row.iter().map(|p| p.ln()).collect();
            let mean = logs.iter().sum::<f64>() / n as f64;
            let centered: Vec<f64> = logs.iter().map(|l| l - mean).collect();
            let mut e = basis.tr_matvec(&centered);
            e.resize(d, 0.0);
            e_table.push(e);
        }
        let enc = SequenceEncoder { w, e_table };
        let value = enc.kl_against(task);
        let report = BoundReport {
            lower_bound: Some(value),
            optimizer_meta: Some(OptimizerMeta {
                restarts: 0,
                iterations: 0,
                final_grad_norm: 0.0,
            }),
            ..BoundReport::default()
        };
        return Ok((report, enc));
    }

    optimize_encoder(task, d, opt, !assumptions.assumption2)
}

/// Multi-restart Adam over (W, E) minimizing the prior-averaged KL.
fn optimize_encoder(
    task: &TaskDistribution,
    d: usize,
    opt: OptConfig,
    cap_weights: bool,
) -> Result<(BoundReport, SequenceEncoder)> {
    let n = task.n;
    let t_count = task.support_size();
    let rows = &task.conditionals;
    let priors: Vec<f64> = task.support.iter().map(|(_, p)| *p).collect();

    let mut best: Option<(f64, Matrix, Vec<Vec<f64>>)> = None;
    let mut total_iters = 0usize;
    let mut last_grad_norm = f64::NAN;

    for restart in 0..opt.restarts {
        let mut rng = Rng::stream(opt.seed, &[0x6c_6f_77_65_72, restart as u64]);
        let mut w = Matrix::random_normal(n, d, 0.5, &mut rng);
        let mut e: Vec<Vec<f64>> = (0..t_count)
            .map(|_| (0..d).map(|_| 0.5 * rng.normal()).collect())
            .collect();

        let mut adam = Adam::new(n * d + t_count * d, opt.lr);
        let mut gw = Matrix::zeros(n, d);
        let mut ge = vec![vec![0.0; d]; t_count];

        for _ in 0..opt.steps {
            // Loss and exact gradient over the whole support.
            gw.data.fill(0.0);
            for row in ge.iter_mut() {
                row.fill(0.0);
            }
            let mut loss = 0.0;
            for t in 0..t_count {
                let z = w.matvec(&e[t]);
                let lq = log_softmax(&z);
                let q = softmax(&z);
                let pi = &rows[t];
                let mut kl = 0.0;
                for (p, l) in pi.iter().zip(&lq) {
                    if *p > 0.0 {
                        kl += p * (p.ln() - l);
                    }
                }
                loss += priors[t] * kl;
                for i in 0..n {
                    let gz = priors[t] * (q[i] - pi[i]);
                    for j in 0..d {
                        gw[(i, j)] += gz * e[t][j];
                        ge[t][j] += gz * w[(i, j)];
                    }
                }
            }
            if !loss.is_finite() {
                break;
            }
            if best.as_ref().is_none_or(|(bl, _, _)| loss < *bl) {
                best = Some((loss, w.clone(), e.clone()));
            }

            adam.begin_step();
            let mut gnorm2 = 0.0;
            let mut k = 0;
            for i in 0..n {
                for j in 0..d {
                    let g = gw[(i, j)];
                    gnorm2 += g * g;
                    adam.update(k, &mut w[(i, j)], g);
                    k += 1;
                }
            }
            for t in 0..t_count {
                for j in 0..d {
                    let g = ge[t][j];
                    gnorm2 += g * g;
                    adam.update(k, &mut e[t][j], g);
                    k += 1;
                }
            }
            last_grad_norm = gnorm2.sqrt();
            total_iters += 1;

            if cap_weights {
                for i in 0..w.rows {
                    clip_vec(w.row_mut(i), 10.0);
                }
                for row in e.iter_mut() {
                    clip_vec(row, 10.0);
                }
            }
        }
    }

    let (_, w, e_table) = best.ok_or_else(|| {
        Error::OptimizationFailed("all restarts produced non-finite loss".into())
    })?;
    let enc = SequenceEncoder { w, e_table };
    // The reported value is exactly what the returned encoder achieves.
    let value = enc.kl_against(task);
    let report = BoundReport {
        lower_bound: Some(value),
        optimizer_meta: Some(OptimizerMeta {
            restarts: opt.restarts,
            iterations: total_iters,
            final_grad_norm: last_grad_norm,
        }),
        ..BoundReport::default()
    };
    Ok((report, enc))
}

fn clip_vec(v: &mut [f64], max_norm: f64) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for x in v.iter_mut() {
            *x *= s;
        }
    }
}

/// The d = 2 circle encoder for lookup tasks: unembedding rows on the unit
/// circle and E(t) = lambda * W_{g(t)}.
pub fn circle_encoder(task: &TaskDistribution, lambda: f64) -> Result<SequenceEncoder> {
    let g = task
        .g
        .as_ref()
        .ok_or_else(|| Error::InvalidArg("circle encoder needs the lookup table g".into()))?;
    if lambda < 0.0 {
        return Err(Error::InvalidArg("lambda must be >= 0".into()));
    }
    let n = task.n;
    let mut w = Matrix::zeros(n, 2);
    for i in 0..n {
        let angle = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
        w[(i, 0)] = angle.cos();
        w[(i, 1)] = angle.sin();
    }
    let e_table: Vec<Vec<f64>> = g
        .iter()
        .map(|&gi| vec![lambda * w[(gi, 0)], lambda * w[(gi, 1)]])
        .collect();
    Ok(SequenceEncoder { w, e_table })
}

/// Closed-form KL of the circle encoder against a zero-entropy task:
/// E_t[ log(1 + sum_{j != g} exp(-lambda (1 - cos(2 pi (j - g)/N)))) ].
pub fn circle_encoder_closed_form_kl(task: &TaskDistribution, lambda: f64) -> Result<f64> {
    let g = task
        .g
        .as_ref()
        .ok_or_else(|| Error::InvalidArg("circle encoder needs the lookup table g".into()))?;
    let n = task.n;
    let mut total = 0.0;
    for ((_, prior), &gi) in task.support.iter().zip(g) {
        let mut inner = 0.0;
        for j in 0..n {
            if j == gi {
                continue;
            }
            let diff = 2.0 * std::f64::consts::PI * (j as f64 - gi as f64) / n as f64;
            inner += (-lambda * (1.0 - diff.cos())).exp();
        }
        total += prior * (1.0 + inner).ln();
    }
    Ok(total)
}

/// Near-orthonormal unembedding columns via random sign vectors.
///
/// Returns a d x N matrix whose columns W_i are +-1/sqrt(d) sign vectors
/// (unit norm by construction), resampled until the largest off-diagonal
/// Gram entry is at most `sqrt(32 ln(N+1) / d)`, together with the achieved
/// deviation. When N <= d the distinct standard basis columns are used and
/// the deviation is exactly zero.
pub fn near_orthogonal_unembedding(n: usize, d: usize, seed: u64, max_tries: usize) -> Result<(Matrix, f64)> {
    if d < 1 || n < 1 {
        return Err(Error::InvalidArg("need n >= 1 and d >= 1".into()));
    }
    if n <= d {
        let mut w = Matrix::zeros(d, n);
        for i in 0..n {
            w[(i, i)] = 1.0;
        }
        return Ok((w, 0.0));
    }
    sign_unembedding(n, d, seed, max_tries)
}

/// The sampling path of [`near_orthogonal_unembedding`], usable on its own: always draws
/// +-1/sqrt(d) sign columns (no orthonormal shortcut).
pub fn sign_unembedding(n: usize, d: usize, seed: u64, max_tries: usize) -> Result<(Matrix, f64)> {
    let target = gram_deviation_target(n, d);
    let scale = 1.0 / (d as f64).sqrt();
    let mut best_dev = f64::INFINITY;
    let mut best: Option<Matrix> = None;

    for attempt in 0..max_tries.max(1) {
        let mut rng = Rng::stream(seed, &[0x6a_6c, attempt as u64]);
        let mut w = Matrix::zeros(d, n);
        for j in 0..n {
            for i in 0..d {
                w[(i, j)] = if rng.next_u64() & 1 == 0 { scale } else { -scale };
            }
        }
        let dev = gram_deviation(&w);
        if dev < best_dev {
            best_dev = dev;
            best = Some(w);
        }
        if best_dev <= target {
            return Ok((best.unwrap(), best_dev));
        }
    }
    Err(Error::JlTargetNotMet {
        tries: max_tries,
        best: best_dev,
    })
}

/// The near-orthogonality target sqrt(32 ln(N+1) / d).
pub fn gram_deviation_target(n: usize, d: usize) -> f64 {
    (32.0 * ((n + 1) as f64).ln() / d as f64).sqrt()
}

/// Largest deviation of the column Gram matrix from the identity:
/// max over |W_i . W_j| (i != j) and | ||W_i||^2 - 1 |.
pub fn gram_deviation(w: &Matrix) -> f64 {
    let n = w.cols;
    let mut dev = 0.0f64;
    let cols: Vec<Vec<f64>> = (0..n).map(|j| w.col(j)).collect();
    for i in 0..n {
        for j in i..n {
            let dot: f64 = cols[i].iter().zip(&cols[j]).map(|(a, b)| a * b).sum();
            if i == j {
                dev = dev.max((dot - 1.0).abs());
            } else {
                dev = dev.max(dot.abs());
            }
        }
    }
    dev
}

/// Solve `-H(pi) = log sum_j exp(lambda (W_j - W_g) . W_g)` for lambda >= 0
/// by bisection; the right-hand side decreases from log N to 0.
///
/// Also enforces the closed-form cap
/// `lambda <= log((N-1)/(exp(-H)-1)) / (1 - 2C)`.
pub fn solve_lambda(conditional: &[f64], w: &Matrix, g: usize, tol: f64) -> Result<f64> {
    let n = w.cols;
    if conditional.len() != n {
        return Err(Error::DimMismatch(
            "conditional length != column count".into(),
        ));
    }
    let neg_h = negentropy(conditional); // in [-ln N, 0]
    if neg_h >= 0.0 {
        return Err(Error::NoFiniteSolution(
            "zero-entropy conditional: the temperature equation has no finite root \
             (smooth the task first)"
                .into(),
        ));
    }
    let target = -neg_h; // in (0, ln N]

    let wg = w.col(g);
    let mut slopes = Vec::with_capacity(n);
    let mut max_off = f64::NEG_INFINITY;
    for j in 0..n {
        let wj = w.col(j);
        let s: f64 = wj.iter().zip(&wg).map(|(a, b)| (a - b) * b).sum();
        slopes.push(s);
        if j != g {
            max_off = max_off.max(s);
        }
    }
    if max_off >= 0.0 {
        return Err(Error::InvalidArg(format!(
            "precondition violated: max off-target exponent slope {max_off} >= 0 \
             (unembedding not close enough to orthonormal)"
        )));
    }

    let c = gram_deviation(w);
    if c >= 0.5 {
        return Err(Error::VacuousBound(format!("gram deviation C = {c} >= 1/2")));
    }
    let cap = lambda_cap(n, c, neg_h);

    // Exactly orthonormal columns: every off-target slope is -1 and the
    // equation solves in closed form, lambda = log((N-1)/(e^{-H}-1)).
    if slopes
        .iter()
        .enumerate()
        .all(|(j, &s)| if j == g { s == 0.0 } else { s == -1.0 })
    {
        let lambda = ((n - 1) as f64 / (target.exp() - 1.0)).ln().max(0.0);
        return Ok(lambda);
    }

    let rhs = |lambda: f64| -> f64 {
        // slopes[g] = 0 is the maximum, so the sum is stable as written.
        let s: f64 = slopes.iter().map(|&e| (lambda * e).exp()).sum();
        s.ln()
    };

    // RHS(0) = ln N >= target and RHS is decreasing.
    let mut lo = 0.0f64;
    let f_lo = rhs(lo) - target;
    if f_lo.abs() <= tol {
        return Ok(0.0);
    }
    let mut hi = cap + 1.0;
    let mut f_hi = rhs(hi) - target;
    let mut guard = 0;
    while f_hi > 0.0 && guard < 200 {
        hi *= 2.0;
        f_hi = rhs(hi) - target;
        guard += 1;
    }
    if f_hi > 0.0 {
        return Err(Error::NoFiniteSolution(
            "bisection bracket not found".into(),
        ));
    }

    let mut lambda = 0.5 * (lo + hi);
    for _ in 0..500 {
        let f_mid = rhs(lambda) - target;
        if f_mid.abs() <= tol {
            break;
        }
        if f_mid > 0.0 {
            lo = lambda;
        } else {
            hi = lambda;
        }
        lambda = 0.5 * (lo + hi);
    }
    let residual = (rhs(lambda) - target).abs();
    if residual > tol {
        return Err(Error::OptimizationFailed(format!(
            "bisection residual {residual} above tolerance {tol}"
        )));
    }
    if lambda > cap + 1e-6 {
        return Err(Error::InvalidArg(format!(
            "solution lambda = {lambda} exceeds its closed-form cap {cap}"
        )));
    }
    Ok(lambda)
}

/// Closed-form cap on the temperature: log((N-1)/(e^{-H}-1)) / (1-2C).
pub fn lambda_cap(n: usize, c: f64, neg_h: f64) -> f64 {
    let num = ((n - 1) as f64 / ((-neg_h).exp() - 1.0)).ln();
    num / (1.0 - 2.0 * c)
}

/// Evaluate the full per-sequence upper bound at a given Gram deviation C:
/// E_t[(1 - pi(g|t)) (1 + 2C + C d_TV(pi~_t, unif)) / (1 - 2C)
///     * log((N-1)/(e^{-H_t} - 1))].
pub fn upper_full_given_c(task: &TaskDistribution, c: f64) -> Result<f64> {
    let g = task
        .g
        .as_ref()
        .ok_or_else(|| Error::InvalidArg("bound needs the lookup table g".into()))?;
    if c >= 0.5 {
        return Err(Error::VacuousBound(format!("C = {c} >= 1/2")));
    }
    let n = task.n;
    let mut total = 0.0;
    for (idx, (_, prior)) in task.support.iter().enumerate() {
        let row = &task.conditionals[idx];
        let neg_h = negentropy(row);
        if neg_h >= 0.0 {
            return Err(Error::NoFiniteSolution(
                "zero-entropy row: smooth the task first".into(),
            ));
        }
        let gi = g[idx];
        let p_g = row[gi];
        let miss = 1.0 - p_g;
        let dtv = if miss > 0.0 {
            let unif = 1.0 / (n - 1) as f64;
            0.5 * row
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != gi)
                .map(|(_, &p)| (p / miss - unif).abs())
                .sum::<f64>()
        } else {
            0.0
        };
        let log_term = ((n - 1) as f64 / ((-neg_h).exp() - 1.0)).ln();
        total += prior * miss * ((1.0 + 2.0 * c + c * dtv) / (1.0 - 2.0 * c)) * log_term;
    }
    Ok(total)
}

/// The simplified bound involving only the average entropy and average miss
/// probability: E[1 - pi(g|t)] * log((N-1)/(e^{-E[H]} - 1)) * (1+4C)/(1-2C).
pub fn upper_simplified_given_c(task: &TaskDistribution, c: f64) -> Result<f64> {
    let g = task
        .g
        .as_ref()
        .ok_or_else(|| Error::InvalidArg("bound needs the lookup table g".into()))?;
    if c >= 0.5 {
        return Err(Error::VacuousBound(format!("C = {c} >= 1/2")));
    }
    let n = task.n;
    let mut avg_miss = 0.0;
    let mut avg_neg_h = 0.0;
    for (idx, (_, prior)) in task.support.iter().enumerate() {
        let row = &task.conditionals[idx];
        let neg_h = negentropy(row);
        if neg_h >= 0.0 {
            return Err(Error::NoFiniteSolution(
                "zero-entropy row: smooth the task first".into(),
            ));
        }
        avg_miss += prior * (1.0 - row[g[idx]]);
        avg_neg_h += prior * neg_h;
    }
    let log_term = ((n - 1) as f64 / ((-avg_neg_h).exp() - 1.0)).ln();
    Ok(avg_miss * log_term * (1.0 + 4.0 * c) / (1.0 - 2.0 * c))
}

/// Theorem-2 chain: sample a near-orthonormal unembedding, solve the
/// temperature equation per sequence, build the explicit encoder, and report
/// the full and simplified bounds plus the measured KL of the encoder.
pub fn near_orthogonal_bound(
    task: &TaskDistribution,
    d: usize,
    seed: u64,
) -> Result<(BoundReport, SequenceEncoder)> {
    let g = task
        .g
        .as_ref()
        .ok_or_else(|| Error::InvalidArg("bound needs the lookup table g".into()))?
        .clone();

    let (w_cols, c_achieved) = near_orthogonal_unembedding(task.n, d, seed, 1000)?;
    if c_achieved >= 0.5 {
        return Err(Error::VacuousBound(format!(
            "achieved C = {c_achieved} >= 1/2, the bound denominators are not positive"
        )));
    }

    let mut lambda_table = Vec::with_capacity(task.support_size());
    for (idx, row) in task.conditionals.iter().enumerate() {
        let lambda = solve_lambda(row, &w_cols, g[idx], 1e-10)?;
        lambda_table.push(lambda);
    }

    // Explicit encoder: W = columns^T (N x d), E(t) = lambda_t * W_{g(t)}.
    let e_table: Vec<Vec<f64>> = lambda_table
        .iter()
        .zip(&g)
        .map(|(&l, &gi)| w_cols.col(gi).iter().map(|x| l * x).collect())
        .collect();
    let enc = SequenceEncoder {
        w: w_cols.transpose(),
        e_table,
    };
    let measured = enc.kl_against(task);

    let full = upper_full_given_c(task, c_achieved)?;
    let simplified = upper_simplified_given_c(task, c_achieved)?;

    let report = BoundReport {
        upper_full: Some(full),
        upper_simplified: Some(simplified),
        c_gram: Some(c_achieved),
        lambda_table: Some(lambda_table),
        measured_encoder_kl: Some(measured),
        ..BoundReport::default()
    };
    Ok((report, enc))
}

/// Capacity and parameter-count comparisons.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CapacityReport {
    /// H d_h + d
    pub ours: usize,
    /// H (d_h - 1) + 1
    pub previous: usize,
    /// S + N + sqrt(T0 ln T0), asymptotic form with unit constants.
    pub kim_params: f64,
    /// (d + S)(S + N + T0)
    pub huben_params: f64,
    /// min(1, 1/N + (1 - 1/N) ours / T0)
    pub phi_bound: f64,
}

pub fn capacity_formulas(
    h: usize,
    d_h: usize,
    d: usize,
    n: usize,
    s: usize,
    t0: usize,
) -> Result<CapacityReport> {
    if t0 == 0 {
        return Err(Error::InvalidArg("T0 must be positive".into()));
    }
    if n == 0 {
        return Err(Error::InvalidArg("N must be positive".into()));
    }
    let ours = h * d_h + d;
    let previous = h * d_h.saturating_sub(1) + 1;
    let t0f = t0 as f64;
    let kim_params = (s + n) as f64 + (t0f * t0f.ln().max(0.0)).sqrt();
    let huben_params = ((d + s) * (s + n + t0)) as f64;
    let phi_bound = phi(ours as f64, n, t0).min(1.0);
    Ok(CapacityReport {
        ours,
        previous,
        kim_params,
        huben_params,
        phi_bound,
    })
}

/// Accuracy expected from storing X associations out of T0 under a uniform
/// prior: 1/N + (1 - 1/N) X / T0.
pub fn phi(x: f64, n: usize, t0: usize) -> f64 {
    let inv_n = 1.0 / n as f64;
    inv_n + (1.0 - inv_n) * x / t0 as f64
}

/// Inverse of [`phi`]: stored-association count from accuracy.
pub fn phi_inv(acc: f64, n: usize, t0: usize) -> f64 {
    let inv_n = 1.0 / n as f64;
    (acc - inv_n) * t0 as f64 / (1.0 - inv_n)
}

/// Centered logit differences and their pi-weighted mean square, the
/// first-order KL proxy for near-uniform targets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CenteredGap {
    /// One row per supported sequence, one entry per token.
    pub table: Vec<Vec<f64>>,
    pub mean_square: f64,
}

pub fn centered_logit_gap<F>(task: &TaskDistribution, mut logits_fn: F) -> Result<CenteredGap>
where
    F: FnMut(&TokenSeq) -> Vec<f64>,
{
    let mut table = Vec::with_capacity(task.support_size());
    let mut mean_square = 0.0;
    for (idx, (t, prior)) in task.support.iter().enumerate() {
        let row = &task.conditionals[idx];
        if row.iter().any(|&p| p <= 0.0) {
            return Err(Error::InvalidArg(
                "centered logit gap needs full-support conditionals".into(),
            ));
        }
        let logits = logits_fn(t);
        let diffs: Vec<f64> = logits.iter().zip(row).map(|(&f, &p)| f - p.ln()).collect();
        let mean: f64 = diffs.iter().zip(row).map(|(&d, &p)| p * d).sum();
        let z: Vec<f64> = diffs.iter().map(|&d| d - mean).collect();
        for (zi, &p) in z.iter().zip(row) {
            mean_square += prior * p * zi * zi;
        }
        table.push(z);
    }
    Ok(CenteredGap { table, mean_square })
}
