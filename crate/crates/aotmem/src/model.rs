//! Forward semantics of the one-layer attention-only transformer and the
//! MLP-based comparator, plus parameter accounting.
//!
//! The model computes, for a length-S token sequence, the next-token logits
//! at the last position:
//!
//! ```text
//! logits = W_U (x_S + sum_h W_O^h W_V^h sum_s a^h_s x_s)      x_s = e(t_s) + pos_s
//! ```
//!
//! where `a^h` is the softmax over positions of the query-key scores
//! `x_S^T W_QK^h x_s`. The MLP variant inserts `W_2 GELU(W_1 z) + z` between
//! the head-plus-skip vector `z` and the unembedding. Logits are never
//! softmaxed here; probability conversion happens at metric boundaries.

use serde::{Deserialize, Serialize};

use crate::numkernel::{softmax, Matrix, Rng};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Aot,
    MlpBased,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum QkMode {
    #[default]
    Full,
    Rank1,
    /// Separate trainable query and key projections of shape d_h x d,
    /// scores (W_Q x_q) . (W_K x_s). This is the parametrization the
    /// parameter count 4 d_h H d tallies.
    Factored,
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Dictionary size N.
    pub n: usize,
    /// Context length S.
    pub s: usize,
    /// Embedding dimension d.
    pub d: usize,
    /// Head inner dimension d_h.
    pub d_h: usize,
    /// Head count H.
    pub h: usize,
    pub variant: Variant,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mlp_width: Option<usize>,
    #[serde(default)]
    pub qk_mode: QkMode,
}

impl ModelConfig {
    pub fn aot(n: usize, s: usize, d: usize, d_h: usize, h: usize) -> Self {
        ModelConfig {
            n,
            s,
            d,
            d_h,
            h,
            variant: Variant::Aot,
            mlp_width: None,
            qk_mode: QkMode::Full,
        }
    }

    pub fn mlp_based(n: usize, s: usize, d: usize, width: usize) -> Self {
        ModelConfig {
            n,
            s,
            d,
            d_h: d,
            h: 1,
            variant: Variant::MlpBased,
            mlp_width: Some(width),
            qk_mode: QkMode::Full,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::InvalidArg("dictionary size N must be >= 2".into()));
        }
        if self.s < 1 {
            return Err(Error::InvalidArg("context length S must be >= 1".into()));
        }
        // d_h > d is allowed (the factored value/output maps just stop
        // gaining rank past d); it only wastes parameters.
        match self.variant {
            Variant::Aot => {
                if self.h < 1 {
                    return Err(Error::InvalidArg("AoT needs at least one head".into()));
                }
            }
            Variant::MlpBased => {
                if self.h != 1 {
                    return Err(Error::InvalidArg(
                        "MLP-based variant uses exactly one head".into(),
                    ));
                }
                if self.d_h != self.d {
                    return Err(Error::InvalidArg(
                        "MLP-based variant uses a head of dimension d_h = d".into(),
                    ));
                }
                if self.mlp_width.is_none() {
                    return Err(Error::InvalidArg("MLP-based variant needs a width".into()));
                }
            }
        }
        Ok(())
    }
}

/// Per-head weights. In `Rank1` mode the query-key matrix is kept factored
/// as `q k^T`; `w_qk_matrix` materializes it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    #[serde(rename = "W_QK", default, skip_serializing_if = "Option::is_none")]
    pub w_qk: Option<Matrix>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<Vec<f64>>,
    #[serde(rename = "W_Q", default, skip_serializing_if = "Option::is_none")]
    pub w_q: Option<Matrix>,
    #[serde(rename = "W_K", default, skip_serializing_if = "Option::is_none")]
    pub w_k: Option<Matrix>,
    #[serde(rename = "W_V")]
    pub w_v: Matrix,
    #[serde(rename = "W_O")]
    pub w_o: Matrix,
}

impl HeadParams {
    pub fn full(w_qk: Matrix, w_v: Matrix, w_o: Matrix) -> Self {
        HeadParams {
            w_qk: Some(w_qk),
            q: None,
            k: None,
            w_q: None,
            w_k: None,
            w_v,
            w_o,
        }
    }

    pub fn rank1(q: Vec<f64>, k: Vec<f64>, w_v: Matrix, w_o: Matrix) -> Self {
        HeadParams {
            w_qk: None,
            q: Some(q),
            k: Some(k),
            w_q: None,
            w_k: None,
            w_v,
            w_o,
        }
    }

    pub fn factored(w_q: Matrix, w_k: Matrix, w_v: Matrix, w_o: Matrix) -> Self {
        HeadParams {
            w_qk: None,
            q: None,
            k: None,
            w_q: Some(w_q),
            w_k: Some(w_k),
            w_v,
            w_o,
        }
    }

    /// Inner dimension of this head (rows of W_V).
    pub fn inner_dim(&self) -> usize {
        self.w_v.rows
    }

    /// Query-key score x_q^T W_QK x_s.
    pub fn score(&self, x_q: &[f64], x_s: &[f64]) -> f64 {
        if let Some(w) = &self.w_qk {
            let wx = w.matvec(x_s);
            return dot(x_q, &wx);
        }
        if let (Some(q), Some(k)) = (&self.q, &self.k) {
            return dot(x_q, q) * dot(k, x_s);
        }
        if let (Some(wq), Some(wk)) = (&self.w_q, &self.w_k) {
            let qx = wq.matvec(x_q);
            let kx = wk.matvec(x_s);
            return dot(&qx, &kx);
        }
        panic!("head has no query-key weights")
    }

    /// Materialized query-key matrix (q k^T in rank-1 mode, W_Q^T W_K in
    /// factored mode).
    pub fn w_qk_matrix(&self, d: usize) -> Matrix {
        if let Some(w) = &self.w_qk {
            return w.clone();
        }
        if let (Some(q), Some(k)) = (&self.q, &self.k) {
            let mut m = Matrix::zeros(d, d);
            for i in 0..d {
                for j in 0..d {
                    m[(i, j)] = q[i] * k[j];
                }
            }
            return m;
        }
        if let (Some(wq), Some(wk)) = (&self.w_q, &self.w_k) {
            return wq.transpose().matmul(wk);
        }
        panic!("head has no query-key weights")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    #[serde(rename = "W_1")]
    pub w_1: Matrix,
    #[serde(rename = "W_2")]
    pub w_2: Matrix,
}

/// Full parameter set of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AoTParams {
    pub config: ModelConfig,
    /// Token embedding, d x N (column per token).
    pub e: Matrix,
    /// Positional embedding, d x S (column per position).
    pub pos: Matrix,
    pub heads: Vec<HeadParams>,
    #[serde(rename = "W_U")]
    pub w_u: Matrix,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mlp: Option<MlpParams>,
}

/// A length-S sequence of token ids in [0, N).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TokenSeq(pub Vec<usize>);

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Last token of the sequence.
    pub fn last(&self) -> usize {
        *self.0.last().expect("empty sequence")
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl AoTParams {
    /// Zero-initialized parameters for a config.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (n, s, d, d_h, h) = (config.n, config.s, config.d, config.d_h, config.h);
        let heads = (0..h)
            .map(|_| match config.qk_mode {
                QkMode::Full => HeadParams::full(
                    Matrix::zeros(d, d),
                    Matrix::zeros(d_h, d),
                    Matrix::zeros(d, d_h),
                ),
                QkMode::Rank1 => HeadParams::rank1(
                    vec![0.0; d],
                    vec![0.0; d],
                    Matrix::zeros(d_h, d),
                    Matrix::zeros(d, d_h),
                ),
                QkMode::Factored => HeadParams::factored(
                    Matrix::zeros(d_h, d),
                    Matrix::zeros(d_h, d),
                    Matrix::zeros(d_h, d),
                    Matrix::zeros(d, d_h),
                ),
            })
            .collect();
        let mlp = config.mlp_width.map(|w| MlpParams {
            w_1: Matrix::zeros(w, d),
            w_2: Matrix::zeros(d, w),
        });
        Ok(AoTParams {
            config,
            e: Matrix::zeros(d, n),
            pos: Matrix::zeros(d, s),
            heads,
            w_u: Matrix::zeros(n, d),
            mlp,
        })
    }

    /// All weights i.i.d. normal(0, scale^2).
    pub fn random_init(config: ModelConfig, scale: f64, rng: &mut Rng) -> Result<Self> {
        let mut p = AoTParams::zeros(config)?;
        for v in p.e.data.iter_mut() {
            *v = scale * rng.normal();
        }
        for v in p.pos.data.iter_mut() {
            *v = scale * rng.normal();
        }
        for head in p.heads.iter_mut() {
            if let Some(w) = head.w_qk.as_mut() {
                for v in w.data.iter_mut() {
                    *v = scale * rng.normal();
                }
            }
            if let Some(q) = head.q.as_mut() {
                for v in q.iter_mut() {
                    *v = scale * rng.normal();
                }
            }
            if let Some(k) = head.k.as_mut() {
                for v in k.iter_mut() {
                    *v = scale * rng.normal();
                }
            }
            if let Some(wq) = head.w_q.as_mut() {
                for v in wq.data.iter_mut() {
                    *v = scale * rng.normal();
                }
            }
            if let Some(wk) = head.w_k.as_mut() {
                for v in wk.data.iter_mut() {
                    *v = scale * rng.normal();
                }
            }
            for v in head.w_v.data.iter_mut() {
                *v = scale * rng.normal();
            }
            for v in head.w_o.data.iter_mut() {
                *v = scale * rng.normal();
            }
        }
        for v in p.w_u.data.iter_mut() {
            *v = scale * rng.normal();
        }
        if let Some(mlp) = p.mlp.as_mut() {
            for v in mlp.w_1.data.iter_mut() {
                *v = scale * rng.normal();
            }
            for v in mlp.w_2.data.iter_mut() {
                *v = scale * rng.normal();
            }
        }
        Ok(p)
    }

    /// x_s = e(t_s) + pos_s.
    pub fn position_vector(&self, token: usize, position: usize) -> Vec<f64> {
        let d = self.config.d;
        (0..d)
            .map(|i| self.e[(i, token)] + self.pos[(i, position)])
            .collect()
    }

    fn check_tokens(&self, t: &TokenSeq) -> Result<()> {
        if t.len() != self.config.s {
            return Err(Error::DimMismatch(format!(
                "sequence length {} != S = {}",
                t.len(),
                self.config.s
            )));
        }
        if let Some(&bad) = t.0.iter().find(|&&id| id >= self.config.n) {
            return Err(Error::InvalidArg(format!(
                "token id {bad} out of range [0, {})",
                self.config.n
            )));
        }
        Ok(())
    }

    /// The head-plus-skip vector z = x_S + sum_h W_O^h W_V^h A^h(t).
    fn head_plus_skip(&self, t: &TokenSeq) -> Vec<f64> {
        let d = self.config.d;
        let s = self.config.s;
        let xs: Vec<Vec<f64>> = (0..s).map(|i| self.position_vector(t.0[i], i)).collect();
        let x_q = &xs[s - 1];

        let mut z = x_q.clone();
        for head in &self.heads {
            let scores: Vec<f64> = xs.iter().map(|x| head.score(x_q, x)).collect();
            let pattern = softmax(&scores);
            let mut y = vec![0.0; d];
            for (a, x) in pattern.iter().zip(&xs) {
                for (yi, xi) in y.iter_mut().zip(x) {
                    *yi += a * xi;
                }
            }
            let v = head.w_v.matvec(&y);
            let o = head.w_o.matvec(&v);
            for (zi, oi) in z.iter_mut().zip(&o) {
                *zi += oi;
            }
        }
        z
    }

    pub fn save_json(&self, path: &std::path::Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self)?;
        std::fs::write(path, s)?;
        Ok(())
    }

    pub fn load_json(path: &std::path::Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&s)?)
    }
}

/// Attention pattern of one head on a sequence: softmax over positions of
/// the query-key scores, the last position acting as the query.
pub fn attention_pattern(head: &HeadParams, params: &AoTParams, t: &TokenSeq) -> Result<Vec<f64>> {
    params.check_tokens(t)?;
    let s = params.config.s;
    let xs: Vec<Vec<f64>> = (0..s).map(|i| params.position_vector(t.0[i], i)).collect();
    let x_q = &xs[s - 1];
    let scores: Vec<f64> = xs.iter().map(|x| head.score(x_q, x)).collect();
    Ok(softmax(&scores))
}

/// Next-token logits of the attention-only model.
pub fn aot_forward(params: &AoTParams, t: &TokenSeq) -> Result<Vec<f64>> {
    if params.config.variant != Variant::Aot {
        return Err(Error::InvalidArg("aot_forward needs variant = aot".into()));
    }
    params.check_tokens(t)?;
    let z = params.head_plus_skip(t);
    Ok(params.w_u.matvec(&z))
}

/// Next-token logits of the MLP-based comparator:
/// `W_U (W_2 GELU(W_1 z) + z)` with z the head-plus-skip vector.
pub fn mlp_forward(params: &AoTParams, t: &TokenSeq) -> Result<Vec<f64>> {
    if params.config.variant != Variant::MlpBased {
        return Err(Error::InvalidArg(
            "mlp_forward needs variant = mlp_based".into(),
        ));
    }
    let mlp = params
        .mlp
        .as_ref()
        .ok_or_else(|| Error::InvalidArg("mlp weights missing".into()))?;
    params.check_tokens(t)?;
    let z = params.head_plus_skip(t);
    let u = mlp.w_1.matvec(&z);
    let g: Vec<f64> = u.iter().map(|&x| gelu(x)).collect();
    let m = mlp.w_2.matvec(&g);
    let zm: Vec<f64> = z.iter().zip(&m).map(|(a, b)| a + b).collect();
    Ok(params.w_u.matvec(&zm))
}

/// Logits under whichever variant the parameters declare.
pub fn forward(params: &AoTParams, t: &TokenSeq) -> Result<Vec<f64>> {
    match params.config.variant {
        Variant::Aot => aot_forward(params, t),
        Variant::MlpBased => mlp_forward(params, t),
    }
}

/// Exact Gaussian-CDF GELU: x * Phi(x).
#[inline]
pub fn gelu(x: f64) -> f64 {
    x * 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// d/dx GELU(x) = Phi(x) + x * phi(x).
#[inline]
pub fn gelu_prime(x: f64) -> f64 {
    let phi_cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let phi_pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    phi_cdf + x * phi_pdf
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountFormula {
    /// d (S + 2N + 4 d_h H)
    Theorem1,
    /// d (S + 2N + 2 (d_h + 1) H), rank-1 query-key heads
    Remark2,
    /// Literal tally of stored entries.
    Raw,
}

/// Parameter count of a configuration under the named formula.
pub fn param_count(config: &ModelConfig, formula: CountFormula) -> usize {
    let (n, s, d, d_h, h) = (config.n, config.s, config.d, config.d_h, config.h);
    match formula {
        CountFormula::Theorem1 => d * (s + 2 * n + 4 * d_h * h),
        CountFormula::Remark2 => d * (s + 2 * n + 2 * (d_h + 1) * h),
        CountFormula::Raw => {
            let qk = match config.qk_mode {
                QkMode::Full => d * d,
                QkMode::Rank1 => 2 * d,
                QkMode::Factored => 2 * d_h * d,
            };
            let per_head = qk + d_h * d + d * d_h;
            let mlp = config.mlp_width.map_or(0, |w| 2 * w * d);
            d * n + d * s + n * d + h * per_head + mlp
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_params(n: usize, s: usize, d: usize, d_h: usize, h: usize, seed: u64) -> AoTParams {
        let mut rng = Rng::seed_from(seed);
        AoTParams::random_init(ModelConfig::aot(n, s, d, d_h, h), 0.5, &mut rng).unwrap()
    }

    #[test]
    fn zero_scores_give_uniform_pattern() {
        let mut p = tiny_params(4, 3, 2, 2, 1, 1);
        p.heads[0].w_qk = Some(Matrix::zeros(2, 2));
        let t = TokenSeq(vec![0, 1, 2]);
        let a = attention_pattern(&p.heads[0], &p, &t).unwrap();
        for &ai in &a {
            assert!((ai - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn single_position_pattern_is_one() {
        let p = tiny_params(4, 1, 2, 2, 1, 2);
        let t = TokenSeq(vec![3]);
        let a = attention_pattern(&p.heads[0], &p, &t).unwrap();
        assert_eq!(a.len(), 1);
        assert!((a[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn identity_qk_hand_pattern() {
        // x_1 = (1,0), x_2 = (0,1) with W_QK = I: scores = (x_2.x_1, x_2.x_2) = (0, 1).
        let mut p = AoTParams::zeros(ModelConfig::aot(2, 2, 2, 2, 1)).unwrap();
        p.e = Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        p.pos = Matrix::zeros(2, 2);
        p.heads[0].w_qk = Some(Matrix::identity(2));
        let t = TokenSeq(vec![0, 1]);
        let a = attention_pattern(&p.heads[0], &p, &t).unwrap();
        assert!((a[0] - 0.26894).abs() < 1e-5);
        assert!((a[1] - 0.73106).abs() < 1e-5);
    }

    #[test]
    fn disabled_heads_reduce_to_skip() {
        let mut p = tiny_params(5, 2, 3, 2, 4, 3);
        for head in p.heads.iter_mut() {
            head.w_o = Matrix::zeros(3, 2);
        }
        let t = TokenSeq(vec![1, 4]);
        let logits = aot_forward(&p, &t).unwrap();
        let x_q = p.position_vector(4, 1);
        let want = p.w_u.matvec(&x_q);
        for (a, b) in logits.iter().zip(&want) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn scalar_hand_computation() {
        // N=2, S=1, d=1, d_h=1, H=1, all scalars. Single position: pattern = [1].
        // z = x + w_o*w_v*x, logits_i = w_u[i] * z, with x = e[t] + pos.
        let mut p = AoTParams::zeros(ModelConfig::aot(2, 1, 1, 1, 1)).unwrap();
        p.e = Matrix::from_vec(1, 2, vec![0.7, -0.3]);
        p.pos = Matrix::from_vec(1, 1, vec![0.2]);
        p.heads[0].w_qk = Some(Matrix::from_vec(1, 1, vec![1.3]));
        p.heads[0].w_v = Matrix::from_vec(1, 1, vec![2.0]);
        p.heads[0].w_o = Matrix::from_vec(1, 1, vec![-0.5]);
        p.w_u = Matrix::from_vec(2, 1, vec![1.0, -2.0]);
        let t = TokenSeq(vec![0]);
        let logits = aot_forward(&p, &t).unwrap();
        let x = 0.7 + 0.2;
        let z = x + (-0.5) * 2.0 * x;
        assert!((logits[0] - z).abs() < 1e-12);
        assert!((logits[1] + 2.0 * z).abs() < 1e-12);
    }

    #[test]
    fn head_order_permutation_invariant() {
        let p = tiny_params(6, 3, 4, 2, 3, 7);
        let mut q = p.clone();
        q.heads.rotate_left(1);
        let t = TokenSeq(vec![5, 0, 2]);
        let a = aot_forward(&p, &t).unwrap();
        let b = aot_forward(&q, &t).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn rank1_matches_materialized_full() {
        let mut rng = Rng::seed_from(11);
        let d = 3;
        let q: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let k: Vec<f64> = (0..d).map(|_| rng.normal()).collect();

        let mut cfg = ModelConfig::aot(5, 2, d, 2, 1);
        cfg.qk_mode = QkMode::Rank1;
        let mut p1 = AoTParams::random_init(cfg, 0.4, &mut rng).unwrap();
        p1.heads[0].q = Some(q.clone());
        p1.heads[0].k = Some(k.clone());

        let mut p2 = p1.clone();
        p2.config.qk_mode = QkMode::Full;
        p2.heads[0] = HeadParams::full(
            p1.heads[0].w_qk_matrix(d),
            p1.heads[0].w_v.clone(),
            p1.heads[0].w_o.clone(),
        );

        let t = TokenSeq(vec![4, 1]);
        let a = aot_forward(&p1, &t).unwrap();
        let b = aot_forward(&p2, &t).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(3.0) - 2.99595).abs() < 1e-5);
        let x = 1.234;
        let phi = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
        assert!((gelu(x) - x * phi).abs() < 1e-15);
    }

    #[test]
    fn dead_mlp_equals_aot() {
        let mut rng = Rng::seed_from(13);
        let cfg = ModelConfig::mlp_based(5, 2, 3, 4);
        let mut p = AoTParams::random_init(cfg, 0.3, &mut rng).unwrap();
        p.mlp.as_mut().unwrap().w_1 = Matrix::zeros(4, 3);

        let mut aot = p.clone();
        aot.config = ModelConfig::aot(5, 2, 3, 3, 1);
        aot.mlp = None;

        let t = TokenSeq(vec![2, 0]);
        let a = mlp_forward(&p, &t).unwrap();
        let b = aot_forward(&aot, &t).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15, "W_1 = 0 must reduce exactly");
        }
    }

    #[test]
    fn zero_w2_equals_aot_exactly() {
        let mut rng = Rng::seed_from(14);
        let cfg = ModelConfig::mlp_based(5, 2, 3, 4);
        let mut p = AoTParams::random_init(cfg, 0.3, &mut rng).unwrap();
        p.mlp.as_mut().unwrap().w_2 = Matrix::zeros(3, 4);

        let mut aot = p.clone();
        aot.config = ModelConfig::aot(5, 2, 3, 3, 1);
        aot.mlp = None;

        let t = TokenSeq(vec![1, 3]);
        let a = mlp_forward(&p, &t).unwrap();
        let b = aot_forward(&aot, &t).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mlp_scalar_hand_computation() {
        // d=1, w=1: logits = w_u * (w2 * gelu(w1 * z) + z), z = x + w_o w_v x.
        let cfg = ModelConfig::mlp_based(2, 1, 1, 1);
        let mut p = AoTParams::zeros(cfg).unwrap();
        p.e = Matrix::from_vec(1, 2, vec![0.6, 0.0]);
        p.pos = Matrix::from_vec(1, 1, vec![0.1]);
        p.heads[0].w_qk = Some(Matrix::from_vec(1, 1, vec![0.0]));
        p.heads[0].w_v = Matrix::from_vec(1, 1, vec![1.5]);
        p.heads[0].w_o = Matrix::from_vec(1, 1, vec![0.4]);
        p.mlp = Some(MlpParams {
            w_1: Matrix::from_vec(1, 1, vec![2.0]),
            w_2: Matrix::from_vec(1, 1, vec![-0.7]),
        });
        p.w_u = Matrix::from_vec(2, 1, vec![1.0, 0.5]);

        let t = TokenSeq(vec![0]);
        let got = mlp_forward(&p, &t).unwrap();
        let x = 0.7;
        let z = x + 0.4 * 1.5 * x;
        let out = -0.7 * gelu(2.0 * z) + z;
        assert!((got[0] - out).abs() < 1e-10);
        assert!((got[1] - 0.5 * out).abs() < 1e-10);
    }

    #[test]
    fn out_of_range_token_rejected() {
        let p = tiny_params(4, 2, 2, 2, 1, 5);
        let t = TokenSeq(vec![0, 4]);
        assert!(aot_forward(&p, &t).is_err());
        assert!(attention_pattern(&p.heads[0], &p, &t).is_err());
    }

    #[test]
    fn param_count_formulas() {
        let cfg = ModelConfig::aot(50, 2, 10, 10, 20);
        assert_eq!(param_count(&cfg, CountFormula::Theorem1), 9020);
        assert_eq!(param_count(&cfg, CountFormula::Remark2), 5420);

        // At d = 2, storing T0 = 102 associations takes d_h H = 100.
        let cor1 = ModelConfig::aot(50, 2, 2, 2, 50);
        assert_eq!(param_count(&cor1, CountFormula::Theorem1), 1004);
    }

    #[test]
    fn raw_count_tallies_entries() {
        let cfg = ModelConfig::aot(5, 2, 3, 2, 2);
        // e: 15, pos: 6, W_U: 15, heads: 2 * (9 + 6 + 6) = 42
        assert_eq!(param_count(&cfg, CountFormula::Raw), 78);

        let mut r1 = cfg;
        r1.qk_mode = QkMode::Rank1;
        // heads: 2 * (6 + 6 + 6) = 36
        assert_eq!(param_count(&r1, CountFormula::Raw), 72);

        let m = ModelConfig::mlp_based(5, 2, 3, 4);
        // e: 15, pos: 6, W_U: 15, head: 9 + 9 + 9 = 27, mlp: 2*4*3 = 24
        assert_eq!(param_count(&m, CountFormula::Raw), 87);
    }

    #[test]
    fn json_roundtrip_and_field_names() {
        let p = tiny_params(3, 2, 2, 1, 2, 21);
        let s = serde_json::to_string(&p).unwrap();
        assert!(s.contains("\"W_U\""));
        assert!(s.contains("\"W_QK\""));
        assert!(s.contains("\"W_V\""));
        assert!(s.contains("\"W_O\""));
        assert!(s.contains("\"rows\""));
        let back: AoTParams = serde_json::from_str(&s).unwrap();
        assert_eq!(p, back);

        let mut cfg = ModelConfig::aot(3, 2, 2, 1, 1);
        cfg.qk_mode = QkMode::Factored;
        let mut rng = Rng::seed_from(22);
        let pf = AoTParams::random_init(cfg, 0.4, &mut rng).unwrap();
        let s = serde_json::to_string(&pf).unwrap();
        assert!(s.contains("\"W_Q\"") && s.contains("\"W_K\""));
        let back: AoTParams = serde_json::from_str(&s).unwrap();
        assert_eq!(pf, back);
    }
}
