//! Multimodal fusion kernels: projection of visual features into the language
//! width, multi-axis rotary positions, visual-prior reweighting and
//! concatenation with text embeddings.
//!
//! Matrices are row-major with tokens as rows. Every kernel that carries
//! parameters has an analytic backward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape, Error, Result};

pub const VISUAL_RESOLUTION: usize = 224;
pub const VISUAL_PATCH: usize = 14;
pub const VISUAL_LAYERS: usize = 24;
pub const VISUAL_HEADS: usize = 16;
pub const DEFAULT_LN_EPS: f64 = 1e-5;
pub const DEFAULT_ROPE_BASE: f64 = 10000.0;

/// Visual tokens per frame for a square image cut into square patches.
pub fn visual_tokens_per_frame(resolution: usize, patch: usize) -> usize {
    let side = resolution / patch;
    side * side
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        let m = FeatureMatrix { rows, cols, data };
        m.validate()?;
        Ok(m)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        FeatureMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(shape("ragged rows"));
        }
        FeatureMatrix::new(rows.len(), cols, rows.concat())
    }

    /// Entries drawn uniformly from [-scale, scale).
    pub fn random<R: Rng + ?Sized>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
        FeatureMatrix { rows, cols, data }
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.len() != self.rows * self.cols {
            return Err(shape(format!(
                "{}x{} matrix holds {} values",
                self.rows,
                self.cols,
                self.data.len()
            )));
        }
        if self.data.iter().any(|x| !x.is_finite()) {
            return Err(Error::Argument("matrix has non-finite entries".into()));
        }
        Ok(())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> FeatureMatrix {
        let mut t = FeatureMatrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.set(c, r, self.get(r, c));
            }
        }
        t
    }

    pub fn matmul(&self, rhs: &FeatureMatrix) -> Result<FeatureMatrix> {
        if self.cols != rhs.rows {
            return Err(shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = FeatureMatrix::zeros(self.rows, rhs.cols);
        for r in 0..self.rows {
            let acc = out.row_mut(r);
            for (k, &a) in self.row(r).iter().enumerate() {
                for (o, &b) in acc.iter_mut().zip(rhs.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn max_abs_diff(&self, other: &FeatureMatrix) -> f64 {
        if self.rows != other.rows || self.cols != other.cols {
            return f64::INFINITY;
        }
        max_abs_diff(&self.data, &other.data)
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

const GELU_C: f64 = 0.044_715;

fn sqrt_2_over_pi() -> f64 {
    (2.0 / std::f64::consts::PI).sqrt()
}

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (sqrt_2_over_pi() * (x + GELU_C * x * x * x)).tanh())
}

pub fn gelu_derivative(x: f64) -> f64 {
    let k = sqrt_2_over_pi();
    let t = (k * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * k * (1.0 + 3.0 * GELU_C * x * x)
}

fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(shape(format!("{what} has length {got}, expected {want}")));
    }
    Ok(())
}

/// Normalized row and the inverse standard deviation.
fn standardize(row: &[f64], eps: f64) -> (Vec<f64>, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    (row.iter().map(|x| (x - mean) * inv).collect(), inv)
}

/// Population-variance layer normalization of one row.
pub fn layer_norm(row: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Result<Vec<f64>> {
    check_len("gamma", gamma.len(), row.len())?;
    check_len("beta", beta.len(), row.len())?;
    if row.is_empty() {
        return Err(shape("layer norm of an empty row"));
    }
    let (xhat, _) = standardize(row, eps);
    Ok(xhat.iter().zip(gamma).zip(beta).map(|((x, g), b)| x * g + b).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormGrads {
    pub input: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

pub fn layer_norm_backward(row: &[f64], gamma: &[f64], eps: f64, upstream: &[f64]) -> Result<LayerNormGrads> {
    check_len("gamma", gamma.len(), row.len())?;
    check_len("upstream", upstream.len(), row.len())?;
    let n = row.len() as f64;
    let (xhat, inv) = standardize(row, eps);
    let dxhat: Vec<f64> = upstream.iter().zip(gamma).map(|(d, g)| d * g).collect();
    let mean_d = dxhat.iter().sum::<f64>() / n;
    let mean_dx = dxhat.iter().zip(&xhat).map(|(d, x)| d * x).sum::<f64>() / n;
    Ok(LayerNormGrads {
        input: dxhat
            .iter()
            .zip(&xhat)
            .map(|(d, x)| inv * (d - mean_d - x * mean_dx))
            .collect(),
        gamma: upstream.iter().zip(&xhat).map(|(d, x)| d * x).collect(),
        beta: upstream.to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionParams {
    /// d_v x d_h
    pub w1: FeatureMatrix,
    pub b1: Vec<f64>,
    /// d_h x d_llm
    pub w2: FeatureMatrix,
    pub b2: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub ln_eps: f64,
}

impl ProjectionParams {
    pub fn zeros(d_v: usize, d_h: usize, d_llm: usize) -> Self {
        ProjectionParams {
            w1: FeatureMatrix::zeros(d_v, d_h),
            b1: vec![0.0; d_h],
            w2: FeatureMatrix::zeros(d_h, d_llm),
            b2: vec![0.0; d_llm],
            gamma: vec![1.0; d_llm],
            beta: vec![0.0; d_llm],
            ln_eps: DEFAULT_LN_EPS,
        }
    }

    pub fn random<R: Rng + ?Sized>(d_v: usize, d_h: usize, d_llm: usize, rng: &mut R) -> Self {
        let mut vec = |n: usize, lo: f64, hi: f64| -> Vec<f64> { (0..n).map(|_| rng.random_range(lo..hi)).collect() };
        let b1 = vec(d_h, -0.5, 0.5);
        let b2 = vec(d_llm, -0.5, 0.5);
        let gamma = vec(d_llm, 0.5, 1.5);
        let beta = vec(d_llm, -0.5, 0.5);
        ProjectionParams {
            w1: FeatureMatrix::random(d_v, d_h, 1.0 / (d_v as f64).sqrt(), rng),
            b1,
            w2: FeatureMatrix::random(d_h, d_llm, 1.0 / (d_h as f64).sqrt(), rng),
            b2,
            gamma,
            beta,
            ln_eps: DEFAULT_LN_EPS,
        }
    }

    pub fn d_v(&self) -> usize {
        self.w1.rows
    }

    pub fn d_h(&self) -> usize {
        self.w1.cols
    }

    pub fn d_llm(&self) -> usize {
        self.w2.cols
    }

    pub fn validate(&self) -> Result<()> {
        self.w1.validate()?;
        self.w2.validate()?;
        check_len("b1", self.b1.len(), self.d_h())?;
        if self.w2.rows != self.d_h() {
            return Err(shape(format!("w2 has {} rows, expected {}", self.w2.rows, self.d_h())));
        }
        check_len("b2", self.b2.len(), self.d_llm())?;
        check_len("gamma", self.gamma.len(), self.d_llm())?;
        check_len("beta", self.beta.len(), self.d_llm())?;
        if !(self.ln_eps > 0.0) {
            return Err(Error::Argument("ln_eps must be positive".into()));
        }
        Ok(())
    }
}

struct ProjectionTrace {
    pre_gelu: FeatureMatrix,
    hidden: FeatureMatrix,
    pre_norm: FeatureMatrix,
    out: FeatureMatrix,
}

fn add_bias(m: &mut FeatureMatrix, b: &[f64]) {
    for r in 0..m.rows {
        m.row_mut(r).iter_mut().zip(b).for_each(|(x, b)| *x += b);
    }
}

fn project_trace(input: &FeatureMatrix, p: &ProjectionParams) -> Result<ProjectionTrace> {
    p.validate()?;
    input.validate()?;
    if input.cols != p.d_v() {
        return Err(Error::Argument(format!(
            "input has {} columns, projection expects {}",
            input.cols,
            p.d_v()
        )));
    }
    let mut pre_gelu = input.matmul(&p.w1)?;
    add_bias(&mut pre_gelu, &p.b1);
    let hidden = FeatureMatrix {
        data: pre_gelu.data.iter().map(|&x| gelu(x)).collect(),
        ..pre_gelu.clone()
    };
    let mut pre_norm = hidden.matmul(&p.w2)?;
    add_bias(&mut pre_norm, &p.b2);
    let mut out = FeatureMatrix::zeros(input.rows, p.d_llm());
    for r in 0..input.rows {
        out.row_mut(r)
            .copy_from_slice(&layer_norm(pre_norm.row(r), &p.gamma, &p.beta, p.ln_eps)?);
    }
    Ok(ProjectionTrace {
        pre_gelu,
        hidden,
        pre_norm,
        out,
    })
}

/// Affine, GELU, affine, then layer norm, applied to every row.
pub fn project(input: &FeatureMatrix, params: &ProjectionParams) -> Result<FeatureMatrix> {
    Ok(project_trace(input, params)?.out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionGrads {
    pub input: FeatureMatrix,
    pub w1: FeatureMatrix,
    pub b1: Vec<f64>,
    pub w2: FeatureMatrix,
    pub b2: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

/// Gradients of `sum(upstream * project(input))` with respect to the input and every parameter.
pub fn project_backward(
    input: &FeatureMatrix,
    params: &ProjectionParams,
    upstream: &FeatureMatrix,
) -> Result<ProjectionGrads> {
    let tr = project_trace(input, params)?;
    if upstream.rows != tr.out.rows || upstream.cols != tr.out.cols {
        return Err(shape("upstream gradient does not match the projection output"));
    }
    let (d_h, d_llm) = (params.d_h(), params.d_llm());
    let mut g = ProjectionGrads {
        input: FeatureMatrix::zeros(input.rows, input.cols),
        w1: FeatureMatrix::zeros(params.d_v(), d_h),
        b1: vec![0.0; d_h],
        w2: FeatureMatrix::zeros(d_h, d_llm),
        b2: vec![0.0; d_llm],
        gamma: vec![0.0; d_llm],
        beta: vec![0.0; d_llm],
    };
    let mut d_pre_norm = FeatureMatrix::zeros(input.rows, d_llm);
    for r in 0..input.rows {
        let ln = layer_norm_backward(tr.pre_norm.row(r), &params.gamma, params.ln_eps, upstream.row(r))?;
        d_pre_norm.row_mut(r).copy_from_slice(&ln.input);
        g.gamma.iter_mut().zip(&ln.gamma).for_each(|(a, b)| *a += b);
        g.beta.iter_mut().zip(&ln.beta).for_each(|(a, b)| *a += b);
    }
    for r in 0..input.rows {
        g.b2.iter_mut().zip(d_pre_norm.row(r)).for_each(|(a, b)| *a += b);
    }
    g.w2 = tr.hidden.transpose().matmul(&d_pre_norm)?;
    let mut d_pre_gelu = d_pre_norm.matmul(&params.w2.transpose())?;
    d_pre_gelu
        .data
        .iter_mut()
        .zip(&tr.pre_gelu.data)
        .for_each(|(d, &x)| *d *= gelu_derivative(x));
    for r in 0..input.rows {
        g.b1.iter_mut().zip(d_pre_gelu.row(r)).for_each(|(a, b)| *a += b);
    }
    g.w1 = input.transpose().matmul(&d_pre_gelu)?;
    g.input = d_pre_gelu.matmul(&params.w1.transpose())?;
    Ok(g)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Temporal,
    Height,
    Width,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::Temporal, Axis::Height, Axis::Width];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MRopeLayout {
    pub head_dim: usize,
    pub axis_of_pair: Vec<Axis>,
    pub base: f64,
}

impl MRopeLayout {
    pub fn pairs(&self) -> usize {
        self.head_dim / 2
    }

    pub fn theta(&self, pair: usize) -> f64 {
        self.base.powf(-2.0 * pair as f64 / self.head_dim as f64)
    }

    pub fn pairs_on(&self, axis: Axis) -> Vec<usize> {
        (0..self.pairs()).filter(|&j| self.axis_of_pair[j] == axis).collect()
    }
}

/// Frequency pairs are dealt round-robin to the temporal, height and width axes.
pub fn mrope_layout(head_dim: usize) -> Result<MRopeLayout> {
    mrope_layout_with_base(head_dim, DEFAULT_ROPE_BASE)
}

pub fn mrope_layout_with_base(head_dim: usize, base: f64) -> Result<MRopeLayout> {
    if head_dim == 0 || !head_dim.is_multiple_of(2) {
        return Err(Error::Argument(format!(
            "head_dim must be even and positive, got {head_dim}"
        )));
    }
    if !(base > 0.0) {
        return Err(Error::Argument("rotary base must be positive".into()));
    }
    Ok(MRopeLayout {
        head_dim,
        axis_of_pair: (0..head_dim / 2).map(|j| Axis::ALL[j % 3]).collect(),
        base,
    })
}

/// Rotates each (2j, 2j+1) column pair of every row by the row's position on
/// the pair's axis times the pair frequency.
pub fn mrope_apply(features: &FeatureMatrix, positions: &[[i64; 3]], layout: &MRopeLayout) -> Result<FeatureMatrix> {
    if features.cols != layout.head_dim {
        return Err(shape(format!(
            "features have {} columns, layout expects {}",
            features.cols, layout.head_dim
        )));
    }
    if positions.len() != features.rows {
        return Err(shape(format!(
            "{} positions for {} rows",
            positions.len(),
            features.rows
        )));
    }
    let thetas: Vec<f64> = (0..layout.pairs()).map(|j| layout.theta(j)).collect();
    let mut out = features.clone();
    for (r, pos) in positions.iter().enumerate() {
        let row = out.row_mut(r);
        for (j, (pair, theta)) in row.chunks_exact_mut(2).zip(&thetas).enumerate() {
            let angle = pos[layout.axis_of_pair[j].index()] as f64 * theta;
            let (s, c) = angle.sin_cos();
            let (x0, x1) = (pair[0], pair[1]);
            pair[0] = x0 * c - x1 * s;
            pair[1] = x0 * s + x1 * c;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VpaParams {
    pub w_p: FeatureMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VpaTrace {
    /// N_v x L_t attention logits.
    pub scores: FeatureMatrix,
    /// Scores softmaxed down each column.
    pub attention: FeatureMatrix,
    /// Per-visual-token weights with mean one.
    pub weights: Vec<f64>,
    pub out: FeatureMatrix,
}

fn check_vpa_shapes(h: &FeatureMatrix, u: &FeatureMatrix, w_p: &FeatureMatrix) -> Result<()> {
    let d = h.cols;
    if u.cols != d || w_p.rows != d || w_p.cols != d {
        return Err(shape(format!(
            "visual width {d}, text width {}, W_p {}x{}",
            u.cols, w_p.rows, w_p.cols
        )));
    }
    if h.rows == 0 {
        return Err(shape("no visual tokens"));
    }
    Ok(())
}

/// Forward pass with the intermediate quantities.
pub fn vpa_forward(h: &FeatureMatrix, u: &FeatureMatrix, w_p: &FeatureMatrix) -> Result<VpaTrace> {
    check_vpa_shapes(h, u, w_p)?;
    let (n_v, l_t) = (h.rows, u.rows);
    let mut scores = h.matmul(w_p)?.matmul(&u.transpose())?;
    let scale = 1.0 / (h.cols as f64).sqrt();
    scores.data.iter_mut().for_each(|s| *s *= scale);

    let mut attention = FeatureMatrix::zeros(n_v, l_t);
    for t in 0..l_t {
        let max = (0..n_v).map(|i| scores.get(i, t)).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = (0..n_v).map(|i| (scores.get(i, t) - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        for (i, e) in exps.iter().enumerate() {
            attention.set(i, t, e / z);
        }
    }
    let weights: Vec<f64> = if l_t == 0 {
        vec![1.0; n_v]
    } else {
        (0..n_v)
            .map(|i| attention.row(i).iter().sum::<f64>() / l_t as f64 * n_v as f64)
            .collect()
    };
    let mut out = h.clone();
    for (i, w) in weights.iter().enumerate() {
        out.row_mut(i).iter_mut().for_each(|x| *x *= w);
    }
    Ok(VpaTrace {
        scores,
        attention,
        weights,
        out,
    })
}

/// Scales each visual row by its text-pooled attention weight.
pub fn vpa_reweight(h: &FeatureMatrix, u: &FeatureMatrix, params: &VpaParams) -> Result<FeatureMatrix> {
    Ok(vpa_forward(h, u, &params.w_p)?.out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VpaGrads {
    pub w_p: FeatureMatrix,
    pub h: FeatureMatrix,
    pub u: FeatureMatrix,
}

/// Gradients of `sum(upstream * vpa_reweight(h, u))`.
pub fn vpa_backward(
    h: &FeatureMatrix,
    u: &FeatureMatrix,
    params: &VpaParams,
    upstream: &FeatureMatrix,
) -> Result<VpaGrads> {
    let w_p = &params.w_p;
    let tr = vpa_forward(h, u, w_p)?;
    if upstream.rows != h.rows || upstream.cols != h.cols {
        return Err(shape("upstream gradient does not match the reweighted output"));
    }
    let (n_v, l_t, d) = (h.rows, u.rows, h.cols);
    let mut dh = upstream.clone();
    for (i, w) in tr.weights.iter().enumerate() {
        dh.row_mut(i).iter_mut().for_each(|x| *x *= w);
    }
    if l_t == 0 {
        return Ok(VpaGrads {
            w_p: FeatureMatrix::zeros(d, d),
            h: dh,
            u: FeatureMatrix::zeros(0, d),
        });
    }
    let dw: Vec<f64> = (0..n_v)
        .map(|i| upstream.row(i).iter().zip(h.row(i)).map(|(a, b)| a * b).sum())
        .collect();
    let c = n_v as f64 / l_t as f64;
    // every entry of a row of the attention contributes c to its weight
    let mut ds = FeatureMatrix::zeros(n_v, l_t);
    for t in 0..l_t {
        let col_dot: f64 = (0..n_v).map(|i| tr.attention.get(i, t) * dw[i] * c).sum();
        for (i, dwi) in dw.iter().enumerate() {
            let p = tr.attention.get(i, t);
            ds.set(i, t, p * (dwi * c - col_dot));
        }
    }
    let scale = 1.0 / (d as f64).sqrt();
    ds.data.iter_mut().for_each(|x| *x *= scale);
    let a = h.matmul(w_p)?;
    let da = ds.matmul(u)?;
    let du = ds.transpose().matmul(&a)?;
    let dwp = h.transpose().matmul(&da)?;
    let dh_scores = da.matmul(&w_p.transpose())?;
    dh.data.iter_mut().zip(&dh_scores.data).for_each(|(x, y)| *x += y);
    Ok(VpaGrads { w_p: dwp, h: dh, u: du })
}

/// Visual rows followed by text rows.
pub fn concat_multimodal(visual: &FeatureMatrix, text: &FeatureMatrix) -> Result<FeatureMatrix> {
    if visual.cols != text.cols && text.rows > 0 {
        return Err(shape(format!(
            "visual width {} differs from text width {}",
            visual.cols, text.cols
        )));
    }
    let mut data = visual.data.clone();
    data.extend_from_slice(&text.data);
    Ok(FeatureMatrix {
        rows: visual.rows + text.rows,
        cols: visual.cols,
        data,
    })
}

/// Straightforward loop evaluators used to cross-check the kernels at run time.
#[allow(clippy::needless_range_loop)]
pub mod reference {
    use super::{gelu, FeatureMatrix, MRopeLayout, ProjectionParams};

    pub fn project(input: &FeatureMatrix, p: &ProjectionParams) -> FeatureMatrix {
        let (d_v, d_h, d_llm) = (p.w1.rows, p.w1.cols, p.w2.cols);
        let mut out = FeatureMatrix::zeros(input.rows, d_llm);
        for r in 0..input.rows {
            let mut hidden = vec![0.0; d_h];
            for (j, h) in hidden.iter_mut().enumerate() {
                let mut s = p.b1[j];
                for k in 0..d_v {
                    s += input.get(r, k) * p.w1.get(k, j);
                }
                *h = gelu(s);
            }
            let mut z = vec![0.0; d_llm];
            for (j, zj) in z.iter_mut().enumerate() {
                let mut s = p.b2[j];
                for (k, hk) in hidden.iter().enumerate() {
                    s += hk * p.w2.get(k, j);
                }
                *zj = s;
            }
            let mut mean = 0.0;
            for zj in &z {
                mean += zj;
            }
            mean /= d_llm as f64;
            let mut var = 0.0;
            for zj in &z {
                var += (zj - mean) * (zj - mean);
            }
            var /= d_llm as f64;
            for j in 0..d_llm {
                out.set(r, j, (z[j] - mean) / (var + p.ln_eps).sqrt() * p.gamma[j] + p.beta[j]);
            }
        }
        out
    }

    pub fn mrope(features: &FeatureMatrix, positions: &[[i64; 3]], layout: &MRopeLayout) -> FeatureMatrix {
        let mut out = features.clone();
        for r in 0..features.rows {
            for j in 0..layout.head_dim / 2 {
                let axis = j % 3;
                let theta = layout.base.powf(-2.0 * j as f64 / layout.head_dim as f64);
                let angle = positions[r][axis] as f64 * theta;
                let (x0, x1) = (features.get(r, 2 * j), features.get(r, 2 * j + 1));
                out.set(r, 2 * j, x0 * angle.cos() - x1 * angle.sin());
                out.set(r, 2 * j + 1, x0 * angle.sin() + x1 * angle.cos());
            }
        }
        out
    }

    /// Returns the column-softmax matrix, the weights and the output.
    pub fn vpa(h: &FeatureMatrix, u: &FeatureMatrix, w_p: &FeatureMatrix) -> (FeatureMatrix, Vec<f64>, FeatureMatrix) {
        let (n_v, l_t, d) = (h.rows, u.rows, h.cols);
        let mut s = FeatureMatrix::zeros(n_v, l_t);
        for i in 0..n_v {
            for t in 0..l_t {
                let mut acc = 0.0;
                for a in 0..d {
                    for b in 0..d {
                        acc += h.get(i, a) * w_p.get(a, b) * u.get(t, b);
                    }
                }
                s.set(i, t, acc / (d as f64).sqrt());
            }
        }
        let mut p = FeatureMatrix::zeros(n_v, l_t);
        for t in 0..l_t {
            let mut z = 0.0;
            for i in 0..n_v {
                z += s.get(i, t).exp();
            }
            for i in 0..n_v {
                p.set(i, t, s.get(i, t).exp() / z);
            }
        }
        let mut w = vec![1.0; n_v];
        if l_t > 0 {
            for (i, wi) in w.iter_mut().enumerate() {
                let mut acc = 0.0;
                for t in 0..l_t {
                    acc += p.get(i, t);
                }
                *wi = n_v as f64 * acc / l_t as f64;
            }
        }
        let mut out = FeatureMatrix::zeros(n_v, d);
        for i in 0..n_v {
            for c in 0..d {
                out.set(i, c, w[i] * h.get(i, c));
            }
        }
        (p, w, out)
    }
}

/// Kernel-versus-reference and gradient checks on seeded random instances.
pub mod check {
    use super::*;

    #[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
    pub struct CheckSizes {
        pub n_v: usize,
        pub d_v: usize,
        pub d_h: usize,
        pub d_llm: usize,
        pub l_t: usize,
        pub head_dim: usize,
        pub instances: usize,
    }

    impl Default for CheckSizes {
        fn default() -> Self {
            CheckSizes {
                n_v: 6,
                d_v: 5,
                d_h: 7,
                d_llm: 8,
                l_t: 4,
                head_dim: 12,
                instances: 100,
            }
        }
    }

    impl CheckSizes {
        pub fn validate(&self) -> Result<()> {
            let all = [
                self.n_v,
                self.d_v,
                self.d_h,
                self.d_llm,
                self.l_t,
                self.head_dim,
                self.instances,
            ];
            if all.contains(&0) {
                return Err(Error::Argument("all check sizes must be positive".into()));
            }
            if !self.head_dim.is_multiple_of(2) {
                return Err(Error::Argument("head_dim must be even".into()));
            }
            Ok(())
        }
    }

    #[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
    pub struct Tolerances {
        pub kernel_abs: f64,
        pub grad_rel: f64,
        pub unit: f64,
    }

    impl Default for Tolerances {
        fn default() -> Self {
            Tolerances {
                kernel_abs: 1e-6,
                grad_rel: 1e-4,
                unit: 1e-9,
            }
        }
    }

    pub type ProjectFn = fn(&FeatureMatrix, &ProjectionParams) -> Result<FeatureMatrix>;
    pub type VpaFn = fn(&FeatureMatrix, &FeatureMatrix, &FeatureMatrix) -> Result<VpaTrace>;
    pub type MropeFn = fn(&FeatureMatrix, &[[i64; 3]], &MRopeLayout) -> Result<FeatureMatrix>;

    /// The kernels under test; swapping one in lets a harness confirm that
    /// the checks catch a broken implementation.
    #[derive(Clone, Copy)]
    pub struct Kernels {
        pub project: ProjectFn,
        pub vpa: VpaFn,
        pub mrope: MropeFn,
    }

    impl Default for Kernels {
        fn default() -> Self {
            Kernels {
                project,
                vpa: vpa_forward,
                mrope: mrope_apply,
            }
        }
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct CheckResult {
        pub name: String,
        pub passed: bool,
        /// Worst observed error over all instances.
        pub worst: f64,
        pub tolerance: f64,
        /// First failing instance, if any.
        pub failing_instance: Option<usize>,
    }

    /// Inputs of one random instance, dumped when a check fails.
    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct Instance {
        pub index: usize,
        pub input: FeatureMatrix,
        pub params: ProjectionParams,
        pub text: FeatureMatrix,
        pub w_p: FeatureMatrix,
        pub rotary: FeatureMatrix,
        pub positions: Vec<[i64; 3]>,
        pub upstream_projection: FeatureMatrix,
        pub upstream_vpa: FeatureMatrix,
    }

    impl Instance {
        pub fn generate(seed: u64, index: usize, s: &CheckSizes) -> Self {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (index as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            let input = FeatureMatrix::random(s.n_v, s.d_v, 1.0, &mut rng);
            let params = ProjectionParams::random(s.d_v, s.d_h, s.d_llm, &mut rng);
            let text = FeatureMatrix::random(s.l_t, s.d_llm, 1.0, &mut rng);
            let w_p = FeatureMatrix::random(s.d_llm, s.d_llm, 1.0, &mut rng);
            let rotary = FeatureMatrix::random(s.n_v, s.head_dim, 1.0, &mut rng);
            let positions = (0..s.n_v)
                .map(|_| [0, 1, 2].map(|_| rng.random_range(-20..=20)))
                .collect();
            let upstream_projection = FeatureMatrix::random(s.n_v, s.d_llm, 1.0, &mut rng);
            let upstream_vpa = FeatureMatrix::random(s.n_v, s.d_llm, 1.0, &mut rng);
            Instance {
                index,
                input,
                params,
                text,
                w_p,
                rotary,
                positions,
                upstream_projection,
                upstream_vpa,
            }
        }
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct CheckReport {
        pub seed: u64,
        pub sizes: CheckSizes,
        pub tolerances: Tolerances,
        pub checks: Vec<CheckResult>,
        pub passed: bool,
        pub failing: Option<Instance>,
    }

    /// Largest entrywise difference scaled by the larger of the two vectors'
    /// largest magnitude.
    pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
        let scale = analytic.iter().chain(numeric).map(|x| x.abs()).fold(1e-12, f64::max);
        max_abs_diff(analytic, numeric) / scale
    }

    /// Central differences of `f` with respect to every entry of `x`.
    pub fn numeric_gradient(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
        let mut probe = x.to_vec();
        (0..x.len())
            .map(|i| {
                let orig = probe[i];
                probe[i] = orig + h;
                let up = f(&probe);
                probe[i] = orig - h;
                let down = f(&probe);
                probe[i] = orig;
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    fn weighted_sum(a: &FeatureMatrix, b: &FeatureMatrix) -> f64 {
        a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum()
    }

    const FD_STEP: f64 = 1e-5;

    struct Tally {
        name: &'static str,
        worst: f64,
        tolerance: f64,
        failing: Option<usize>,
    }

    impl Tally {
        fn new(name: &'static str, tolerance: f64) -> Self {
            Tally {
                name,
                worst: 0.0,
                tolerance,
                failing: None,
            }
        }

        fn record(&mut self, index: usize, err: f64) {
            let bad = !(err <= self.tolerance);
            if err > self.worst || err.is_nan() {
                self.worst = err;
            }
            if bad && self.failing.is_none() {
                self.failing = Some(index);
            }
        }

        fn finish(self) -> CheckResult {
            CheckResult {
                name: self.name.to_string(),
                passed: self.failing.is_none(),
                worst: self.worst,
                tolerance: self.tolerance,
                failing_instance: self.failing,
            }
        }
    }

    fn projection_grad_errors(inst: &Instance) -> Result<f64> {
        let (x, p, up) = (&inst.input, &inst.params, &inst.upstream_projection);
        let g = project_backward(x, p, up)?;
        let loss = |x: &FeatureMatrix, p: &ProjectionParams| weighted_sum(&reference::project(x, p), up);
        let mut worst = 0.0f64;
        let mut track = |analytic: &[f64], numeric: Vec<f64>| worst = worst.max(relative_error(analytic, &numeric));

        track(
            &g.input.data,
            numeric_gradient(&x.data, FD_STEP, |v| {
                loss(
                    &FeatureMatrix {
                        data: v.to_vec(),
                        ..x.clone()
                    },
                    p,
                )
            }),
        );
        track(
            &g.w1.data,
            numeric_gradient(&p.w1.data, FD_STEP, |v| {
                let mut q = p.clone();
                q.w1.data = v.to_vec();
                loss(x, &q)
            }),
        );
        track(
            &g.b1,
            numeric_gradient(&p.b1, FD_STEP, |v| {
                let mut q = p.clone();
                q.b1 = v.to_vec();
                loss(x, &q)
            }),
        );
        track(
            &g.w2.data,
            numeric_gradient(&p.w2.data, FD_STEP, |v| {
                let mut q = p.clone();
                q.w2.data = v.to_vec();
                loss(x, &q)
            }),
        );
        track(
            &g.b2,
            numeric_gradient(&p.b2, FD_STEP, |v| {
                let mut q = p.clone();
                q.b2 = v.to_vec();
                loss(x, &q)
            }),
        );
        track(
            &g.gamma,
            numeric_gradient(&p.gamma, FD_STEP, |v| {
                let mut q = p.clone();
                q.gamma = v.to_vec();
                loss(x, &q)
            }),
        );
        track(
            &g.beta,
            numeric_gradient(&p.beta, FD_STEP, |v| {
                let mut q = p.clone();
                q.beta = v.to_vec();
                loss(x, &q)
            }),
        );
        Ok(worst)
    }

    fn vpa_grad_errors(inst: &Instance, h: &FeatureMatrix) -> Result<f64> {
        let (u, w_p, up) = (&inst.text, &inst.w_p, &inst.upstream_vpa);
        let g = vpa_backward(h, u, &VpaParams { w_p: w_p.clone() }, up)?;
        let loss =
            |h: &FeatureMatrix, u: &FeatureMatrix, w: &FeatureMatrix| weighted_sum(&reference::vpa(h, u, w).2, up);
        let with = |m: &FeatureMatrix, v: &[f64]| FeatureMatrix {
            data: v.to_vec(),
            ..m.clone()
        };
        let e_w = relative_error(
            &g.w_p.data,
            &numeric_gradient(&w_p.data, FD_STEP, |v| loss(h, u, &with(w_p, v))),
        );
        let e_h = relative_error(
            &g.h.data,
            &numeric_gradient(&h.data, FD_STEP, |v| loss(&with(h, v), u, w_p)),
        );
        let e_u = relative_error(
            &g.u.data,
            &numeric_gradient(&u.data, FD_STEP, |v| loss(h, &with(u, v), w_p)),
        );
        Ok(e_w.max(e_h).max(e_u))
    }

    pub fn run(seed: u64, sizes: CheckSizes, tol: Tolerances, kernels: Kernels) -> Result<CheckReport> {
        sizes.validate()?;
        let layout = mrope_layout(sizes.head_dim)?;
        let mut t_project = Tally::new("project_vs_reference", tol.kernel_abs);
        let mut t_vpa = Tally::new("vpa_vs_reference", tol.kernel_abs);
        let mut t_colsum = Tally::new("column_softmax_sums", tol.unit);
        let mut t_mean = Tally::new("weight_mean_one", tol.unit);
        let mut t_mrope = Tally::new("mrope_vs_reference", tol.kernel_abs);
        let mut t_pair = Tally::new("mrope_pair_norms", tol.unit);
        let mut t_single = Tally::new("single_visual_token_identity", 0.0);
        let mut t_gproj = Tally::new("projection_gradients", tol.grad_rel);
        let mut t_gvpa = Tally::new("vpa_gradients", tol.grad_rel);

        for i in 0..sizes.instances {
            let inst = Instance::generate(seed, i, &sizes);
            let h = (kernels.project)(&inst.input, &inst.params)?;
            t_project.record(i, h.max_abs_diff(&reference::project(&inst.input, &inst.params)));

            let tr = (kernels.vpa)(&h, &inst.text, &inst.w_p)?;
            let (p_ref, w_ref, out_ref) = reference::vpa(&h, &inst.text, &inst.w_p);
            let vpa_err = tr
                .out
                .max_abs_diff(&out_ref)
                .max(tr.attention.max_abs_diff(&p_ref))
                .max(max_abs_diff(&tr.weights, &w_ref));
            t_vpa.record(i, vpa_err);
            let colsum = (0..tr.attention.cols)
                .map(|t| ((0..tr.attention.rows).map(|r| tr.attention.get(r, t)).sum::<f64>() - 1.0).abs())
                .fold(0.0, f64::max);
            t_colsum.record(i, colsum);
            let mean = tr.weights.iter().sum::<f64>() / tr.weights.len() as f64;
            let positive = tr.weights.iter().all(|&w| w > 0.0);
            t_mean.record(i, if positive { (mean - 1.0).abs() } else { f64::INFINITY });

            let single = FeatureMatrix::new(1, h.cols, h.row(0).to_vec())?;
            let same = (kernels.vpa)(&single, &inst.text, &inst.w_p)?.out;
            t_single.record(
                i,
                if same == single {
                    0.0
                } else {
                    same.max_abs_diff(&single).max(f64::MIN_POSITIVE)
                },
            );

            let rot = (kernels.mrope)(&inst.rotary, &inst.positions, &layout)?;
            t_mrope.record(
                i,
                rot.max_abs_diff(&reference::mrope(&inst.rotary, &inst.positions, &layout)),
            );
            let pair_err = inst
                .rotary
                .data
                .chunks_exact(2)
                .zip(rot.data.chunks_exact(2))
                .map(|(a, b)| (a[0].hypot(a[1]) - b[0].hypot(b[1])).abs())
                .fold(0.0, f64::max);
            t_pair.record(i, pair_err);

            t_gproj.record(i, projection_grad_errors(&inst)?);
            t_gvpa.record(i, vpa_grad_errors(&inst, &h)?);
        }
        let checks: Vec<CheckResult> = [
            t_project, t_vpa, t_colsum, t_mean, t_single, t_mrope, t_pair, t_gproj, t_gvpa,
        ]
        .into_iter()
        .map(Tally::finish)
        .collect();
        let passed = checks.iter().all(|c| c.passed);
        let failing = checks
            .iter()
            .filter_map(|c| c.failing_instance)
            .min()
            .map(|i| Instance::generate(seed, i, &sizes));
        Ok(CheckReport {
            seed,
            sizes,
            tolerances: tol,
            checks,
            passed,
            failing,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn visual_token_count() {
        assert_eq!(visual_tokens_per_frame(VISUAL_RESOLUTION, VISUAL_PATCH), 256);
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu(0.0), 0.0);
        let k = (2.0 / std::f64::consts::PI).sqrt();
        let direct = 0.5 * 3.0 * (1.0 + (k * (3.0 + 0.044715 * 27.0)).tanh());
        assert!((gelu(3.0) - direct).abs() < 1e-15);
        assert!((gelu(3.0) - 2.9964).abs() < 1e-4);
        for x in [-2.5, -0.3, 0.7, 4.0] {
            assert!((gelu(x) - gelu(-x) - x).abs() < 1e-12);
            let fd = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
            assert!((fd - gelu_derivative(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn layer_norm_cases() {
        let ones = [1.0; 3];
        let zeros = [0.0; 3];
        assert_eq!(layer_norm(&[4.0; 3], &ones, &zeros, 1e-5).unwrap(), vec![0.0; 3]);
        // mean 2, population variance 2/3
        let s = (2.0f64 / 3.0 + 1e-5).sqrt();
        let y = layer_norm(&[1.0, 2.0, 3.0], &ones, &zeros, 1e-5).unwrap();
        for (a, b) in y.iter().zip([-1.0 / s, 0.0, 1.0 / s]) {
            assert!((a - b).abs() < 1e-12);
        }
        let y = layer_norm(&[10.0, -3.0, 7.0, 0.5], &[1.0; 4], &[0.0; 4], 1e-5).unwrap();
        assert!(y.iter().sum::<f64>().abs() < 1e-9);
        assert!((y.iter().map(|x| x * x).sum::<f64>() / 4.0 - 1.0).abs() < 1e-5);
        assert!(layer_norm(&[1.0, 2.0], &ones, &zeros, 1e-5).is_err());
    }

    #[test]
    fn zero_projection_is_zero() {
        let p = ProjectionParams::zeros(7, 11, 13);
        let x = FeatureMatrix::random(5, 7, 1.0, &mut rng(1));
        let h = project(&x, &p).unwrap();
        assert_eq!((h.rows, h.cols), (5, 13));
        assert!(h.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn projection_rejects_wrong_width() {
        let p = ProjectionParams::zeros(7, 11, 13);
        assert!(matches!(
            project(&FeatureMatrix::zeros(5, 6), &p),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn mrope_layout_polls_axes() {
        use Axis::*;
        let l = mrope_layout(12).unwrap();
        assert_eq!(l.axis_of_pair, vec![Temporal, Height, Width, Temporal, Height, Width]);
        assert_eq!(mrope_layout(2).unwrap().axis_of_pair, vec![Temporal]);
        assert!(mrope_layout(7).is_err());
        let l = mrope_layout(18).unwrap();
        for a in Axis::ALL {
            let pairs = l.pairs_on(a);
            assert!(pairs[0] < 3 && *pairs.last().unwrap() >= l.pairs() - 3);
        }
        assert!((l.theta(0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn mrope_zero_position_identity() {
        let l = mrope_layout(8).unwrap();
        let x = FeatureMatrix::random(3, 8, 1.0, &mut rng(2));
        assert_eq!(mrope_apply(&x, &[[0, 0, 0]; 3], &l).unwrap(), x);
        assert!(mrope_apply(&x, &[[0, 0, 0]; 2], &l).is_err());
    }

    #[test]
    fn mrope_relative_position() {
        let l = mrope_layout(12).unwrap();
        let mut r = rng(3);
        let q = FeatureMatrix::random(1, 12, 1.0, &mut r);
        let k = FeatureMatrix::random(1, 12, 1.0, &mut r);
        let score = |p1: [i64; 3], p2: [i64; 3]| {
            let a = mrope_apply(&q, &[p1], &l).unwrap();
            let b = mrope_apply(&k, &[p2], &l).unwrap();
            a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum::<f64>()
        };
        let base = score([3, 1, 4], [1, 5, 9]);
        let shifted = score([3 + 7, 1 - 2, 4 + 11], [1 + 7, 5 - 2, 9 + 11]);
        assert!((base - shifted).abs() < 1e-9);
    }

    #[test]
    fn vpa_single_visual_token_identity() {
        let mut r = rng(4);
        let h = FeatureMatrix::random(1, 4, 1.0, &mut r);
        let u = FeatureMatrix::random(3, 4, 1.0, &mut r);
        let w = VpaParams {
            w_p: FeatureMatrix::random(4, 4, 1.0, &mut r),
        };
        assert_eq!(vpa_reweight(&h, &u, &w).unwrap(), h);
    }

    #[test]
    fn vpa_hand_two_by_two() {
        // H = I, W_p = I, U = [[1,0],[0,0]]: S = [[1,0],[0,0]]/sqrt 2
        let h = FeatureMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let u = FeatureMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let w_p = h.clone();
        let tr = vpa_forward(&h, &u, &w_p).unwrap();
        let e = (1.0 / 2.0f64.sqrt()).exp();
        let p0 = e / (e + 1.0);
        assert!((tr.attention.get(0, 0) - p0).abs() < 1e-15);
        assert!((tr.attention.get(0, 1) - 0.5).abs() < 1e-15);
        let w0 = 2.0 * (p0 + 0.5) / 2.0;
        let w1 = 2.0 * (1.0 - p0 + 0.5) / 2.0;
        assert!((tr.weights[0] - w0).abs() < 1e-15);
        assert!((tr.weights[1] - w1).abs() < 1e-15);
        assert!((tr.out.get(0, 0) - w0).abs() < 1e-15);
        assert!((tr.out.get(1, 1) - w1).abs() < 1e-15);
    }

    #[test]
    fn vpa_without_text_is_identity() {
        let h = FeatureMatrix::random(3, 4, 1.0, &mut rng(5));
        let w = VpaParams {
            w_p: FeatureMatrix::zeros(4, 4),
        };
        assert_eq!(vpa_reweight(&h, &FeatureMatrix::zeros(0, 4), &w).unwrap(), h);
        assert!(vpa_reweight(&h, &FeatureMatrix::zeros(2, 3), &w).is_err());
    }

    #[test]
    fn concat_cases() {
        let v = FeatureMatrix::random(3, 8, 1.0, &mut rng(6));
        let t = FeatureMatrix::random(5, 8, 1.0, &mut rng(7));
        let z = concat_multimodal(&v, &t).unwrap();
        assert_eq!((z.rows, z.cols), (8, 8));
        assert_eq!(&z.data[..24], &v.data[..]);
        assert_eq!(concat_multimodal(&v, &FeatureMatrix::zeros(0, 8)).unwrap(), v);
        assert!(concat_multimodal(&v, &FeatureMatrix::zeros(2, 7)).is_err());
    }

    #[test]
    fn default_checks_pass() {
        let sizes = check::CheckSizes {
            instances: 5,
            ..Default::default()
        };
        let r = check::run(11, sizes, check::Tolerances::default(), check::Kernels::default()).unwrap();
        assert!(r.passed, "{:#?}", r.checks);
        assert!(r.failing.is_none());
    }

    #[test]
    fn corrupted_kernel_is_caught() {
        fn bad(x: &FeatureMatrix, p: &ProjectionParams) -> Result<FeatureMatrix> {
            let mut h = project(x, p)?;
            h.data[0] += 1e-3;
            Ok(h)
        }
        let kernels = check::Kernels {
            project: bad,
            ..Default::default()
        };
        let sizes = check::CheckSizes {
            instances: 3,
            ..Default::default()
        };
        let r = check::run(11, sizes, check::Tolerances::default(), kernels).unwrap();
        assert!(!r.passed);
        assert_eq!(r.failing.as_ref().map(|i| i.index), Some(0));
    }

    #[test]
    fn fixture_round_trip() {
        let m = FeatureMatrix::random(2, 3, 1.0, &mut rng(8));
        let json = serde_json::to_string(&m).unwrap();
        assert!(json.starts_with("{\"rows\":2,\"cols\":3,\"data\":["));
        assert_eq!(serde_json::from_str::<FeatureMatrix>(&json).unwrap(), m);
    }
}
