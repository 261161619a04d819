//! ID/text fusion, the bottleneck text adapter, final-embedding concatenation
//! and sigmoid scoring, each with its exact local derivative.

use rand::Rng;

use crate::dense::{dot, norm, Dense};
use crate::error::{shape_err, Result};

/// Norms at or below this are treated as zero vectors.
pub const NORM_EPS: f64 = 1e-12;

/// Divide by the max-abs entry before taking the Euclidean norm. Both
/// divisions are correctly rounded, so an input scaled exactly by `c > 0`
/// normalises to the same bits.
fn prescale(x: &[f64]) -> Option<(Vec<f64>, f64)> {
    let m = x.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    if m == 0.0 || !m.is_finite() {
        return None;
    }
    let z: Vec<f64> = x.iter().map(|v| v / m).collect();
    let zn = norm(&z);
    if m * zn <= NORM_EPS {
        return None;
    }
    Some((z, m * zn))
}

pub fn l2_normalize(x: &[f64]) -> Vec<f64> {
    match prescale(x) {
        Some((z, _)) => {
            let zn = norm(&z);
            z.iter().map(|v| v / zn).collect()
        }
        None => vec![0.0; x.len()],
    }
}

/// Vector-Jacobian product of [`l2_normalize`]: `(I - y yᵀ) g / ‖x‖`, zero on
/// the guarded branch.
pub fn l2_normalize_backward(x: &[f64], grad_y: &[f64]) -> Vec<f64> {
    let Some((_, n)) = prescale(x) else {
        return vec![0.0; x.len()];
    };
    let y = l2_normalize(x);
    let proj = dot(&y, grad_y);
    y.iter().zip(grad_y).map(|(yv, g)| (g - yv * proj) / n).collect()
}

/// `Adapter(x) = W_up · ReLU(W_down · x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Adapter {
    /// `h x d_text`
    pub down: Dense,
    /// `d x h`
    pub up: Dense,
}

/// Intermediates of one adapter evaluation.
#[derive(Clone, Debug)]
pub struct AdapterTrace {
    pub pre: Vec<f64>,
    pub hidden: Vec<f64>,
    pub out: Vec<f64>,
}

impl Adapter {
    pub fn new(down: Dense, up: Dense) -> Result<Self> {
        if up.cols() != down.rows() {
            return shape_err(format!("adapter hidden sizes disagree: down {:?}, up {:?}", down.shape(), up.shape()));
        }
        Ok(Self { down, up })
    }

    pub fn xavier<R: Rng + ?Sized>(d_text: usize, hidden: usize, d: usize, rng: &mut R) -> Self {
        Self { down: Dense::xavier_uniform(hidden, d_text, rng), up: Dense::xavier_uniform(d, hidden, rng) }
    }

    pub fn text_dim(&self) -> usize {
        self.down.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.down.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.up.rows()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.trace(x)?.out)
    }

    pub fn trace(&self, x: &[f64]) -> Result<AdapterTrace> {
        if x.len() != self.text_dim() {
            return shape_err(format!("text vector has {} dims, adapter expects {}", x.len(), self.text_dim()));
        }
        let pre: Vec<f64> = (0..self.hidden_dim()).map(|i| dot(self.down.row(i), x)).collect();
        let hidden: Vec<f64> = pre.iter().map(|&z| z.max(0.0)).collect();
        let out = (0..self.out_dim()).map(|i| dot(self.up.row(i), &hidden)).collect();
        Ok(AdapterTrace { pre, hidden, out })
    }

    /// Accumulate weight gradients for one evaluation. The ReLU subgradient
    /// at exactly zero is taken as 0.
    pub fn accumulate_grad(
        &self,
        x: &[f64],
        trace: &AdapterTrace,
        grad_out: &[f64],
        grad_down: &mut Dense,
        grad_up: &mut Dense,
    ) {
        let h = self.hidden_dim();
        let mut grad_hidden = vec![0.0; h];
        for (i, &g) in grad_out.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let up_row = self.up.row(i);
            for (gh, &w) in grad_hidden.iter_mut().zip(up_row) {
                *gh += g * w;
            }
            for (gu, &a) in grad_up.row_mut(i).iter_mut().zip(&trace.hidden) {
                *gu += g * a;
            }
        }
        for j in 0..h {
            if trace.pre[j] <= 0.0 {
                continue;
            }
            let g = grad_hidden[j];
            for (gd, &xv) in grad_down.row_mut(j).iter_mut().zip(x) {
                *gd += g * xv;
            }
        }
    }
}

pub fn adapter_forward(adapter: &Adapter, x_text: &[f64]) -> Result<Vec<f64>> {
    adapter.forward(x_text)
}

/// `l2(h_id) + l2(adapter(x_text))`.
pub fn fuse(h_id: &[f64], x_text: &[f64], adapter: &Adapter) -> Result<Vec<f64>> {
    let a = adapter.forward(x_text)?;
    if a.len() != h_id.len() {
        return shape_err(format!("adapter emits {} dims, ID row has {}", a.len(), h_id.len()));
    }
    let mut out = l2_normalize(h_id);
    for (o, t) in out.iter_mut().zip(l2_normalize(&a)) {
        *o += t;
    }
    Ok(out)
}

/// Concatenation of the local and global fused vectors, local block first.
#[derive(Clone, Debug, PartialEq)]
pub struct FinalEmbedding(Vec<f64>);

impl FinalEmbedding {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn final_embed(local: &[f64], global: &[f64]) -> Result<FinalEmbedding> {
    if local.len() != global.len() {
        return shape_err(format!("blocks of length {} and {}", local.len(), global.len()));
    }
    let mut v = Vec::with_capacity(local.len() * 2);
    v.extend_from_slice(local);
    v.extend_from_slice(global);
    Ok(FinalEmbedding(v))
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn score(h_u: &FinalEmbedding, h_v: &FinalEmbedding) -> Result<f64> {
    if h_u.len() != h_v.len() {
        return shape_err(format!("embeddings of length {} and {}", h_u.len(), h_v.len()));
    }
    Ok(sigmoid(dot(&h_u.0, &h_v.0)))
}
