//! In-batch similarity and the three ranking objectives: the summed
//! triplet hinge, the hardest-negative hinge, and the hard-aware
//! log-sum-exp loss.
//!
//! Row `i` of the similarity matrix is text `i`, column `j` is image `j`;
//! the diagonal holds the positive pairs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::SampleRecord;
use crate::error::{Error, Result};
use crate::numerics::{CustomOp, Tape, Tensor2D, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    Sum,
    Max,
    Hal,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Triplet margin.
    pub margin: f64,
    pub hal_alpha: f64,
    pub hal_beta: f64,
    pub hal_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            kind: LossKind::Sum,
            margin: 0.2,
            hal_alpha: 20.0,
            hal_beta: 30.0,
            hal_eps: 0.2,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0) {
            return Err(Error::Config(format!("margin must be >= 0, got {}", self.margin)));
        }
        if !(self.hal_alpha > 0.0) {
            return Err(Error::Config(format!("hal alpha must be > 0, got {}", self.hal_alpha)));
        }
        Ok(())
    }
}

/// Margins searched by the `sweep` command.
pub const MARGIN_GRID: [f64; 4] = [0.05, 0.1, 0.2, 0.3];

/// `S = T Iᵀ`.
pub fn sim_matrix(text: &Tensor2D, image: &Tensor2D) -> Result<Tensor2D> {
    if text.rows() != image.rows() {
        return Err(Error::shape(
            "sim_matrix",
            format!("{} texts vs {} images", text.rows(), image.rows()),
        ));
    }
    text.matmul_nt(image)
}

fn square(s: &Tensor2D, op: &'static str) -> Result<usize> {
    if s.rows() != s.cols() {
        return Err(Error::shape(op, format!("similarity matrix is {:?}", s.shape())));
    }
    Ok(s.rows())
}

fn sum_with_grad(s: &Tensor2D, margin: f64, grad: bool) -> (f64, Tensor2D) {
    let n = s.rows();
    let mut g = Tensor2D::zeros(if grad { n } else { 0 }, if grad { n } else { 0 });
    let mut total = 0.0;
    for i in 0..n {
        for j in (0..n).filter(|&j| j != i) {
            // text i against image j
            let h = margin - s.get(i, i) + s.get(i, j);
            if h > 0.0 {
                total += h;
                if grad {
                    g.set(i, i, g.get(i, i) - 1.0);
                    g.set(i, j, g.get(i, j) + 1.0);
                }
            }
            // image i against text j
            let h = margin - s.get(i, i) + s.get(j, i);
            if h > 0.0 {
                total += h;
                if grad {
                    g.set(i, i, g.get(i, i) - 1.0);
                    g.set(j, i, g.get(j, i) + 1.0);
                }
            }
        }
    }
    (total, g)
}

fn max_with_grad(s: &Tensor2D, margin: f64, grad: bool) -> (f64, Tensor2D) {
    let n = s.rows();
    let mut g = Tensor2D::zeros(if grad { n } else { 0 }, if grad { n } else { 0 });
    let mut total = 0.0;
    for i in 0..n {
        let mut best_row: Option<(usize, f64)> = None;
        let mut best_col: Option<(usize, f64)> = None;
        for j in (0..n).filter(|&j| j != i) {
            let hr = margin - s.get(i, i) + s.get(i, j);
            if best_row.is_none_or(|(_, b)| hr > b) {
                best_row = Some((j, hr));
            }
            let hc = margin - s.get(i, i) + s.get(j, i);
            if best_col.is_none_or(|(_, b)| hc > b) {
                best_col = Some((j, hc));
            }
        }
        if let Some((j, h)) = best_row.filter(|(_, h)| *h > 0.0) {
            total += h;
            if grad {
                g.set(i, i, g.get(i, i) - 1.0);
                g.set(i, j, g.get(i, j) + 1.0);
            }
        }
        if let Some((j, h)) = best_col.filter(|(_, h)| *h > 0.0) {
            total += h;
            if grad {
                g.set(i, i, g.get(i, i) - 1.0);
                g.set(j, i, g.get(j, i) + 1.0);
            }
        }
    }
    (total, g)
}

/// `log(1 + Σ exp(a))` and the softmax weights of each `a` against the
/// implicit zero logit.
fn log1p_sum_exp(a: &[f64]) -> (f64, Vec<f64>) {
    let m = a.iter().cloned().fold(0.0f64, f64::max);
    let z0 = (-m).exp();
    let e: Vec<f64> = a.iter().map(|x| (x - m).exp()).collect();
    let z = z0 + e.iter().sum::<f64>();
    (m + z.ln(), e.into_iter().map(|x| x / z).collect())
}

fn hal_with_grad(s: &Tensor2D, alpha: f64, beta: f64, eps: f64, grad: bool) -> Result<(f64, Tensor2D)> {
    let n = s.rows();
    let nf = n as f64;
    let mut g = Tensor2D::zeros(if grad { n } else { 0 }, if grad { n } else { 0 });
    let mut total = 0.0;
    for i in 0..n {
        let arg = 1.0 + beta * s.get(i, i);
        if arg <= 0.0 {
            return Err(Error::Domain(format!(
                "1 + beta * S[{i},{i}] = {arg} is not positive"
            )));
        }
        let others: Vec<usize> = (0..n).filter(|&m| m != i).collect();
        // texts m against image i, then images n against text i
        let col: Vec<f64> = others.iter().map(|&m| alpha * (s.get(m, i) - eps)).collect();
        let row: Vec<f64> = others.iter().map(|&m| alpha * (s.get(i, m) - eps)).collect();
        let (lc, wc) = log1p_sum_exp(&col);
        let (lr, wr) = log1p_sum_exp(&row);
        total += lc / alpha + lr / alpha - arg.ln();
        if grad {
            for (k, &m) in others.iter().enumerate() {
                g.set(m, i, g.get(m, i) + wc[k] / nf);
                g.set(i, m, g.get(i, m) + wr[k] / nf);
            }
            g.set(i, i, g.get(i, i) - beta / arg / nf);
        }
    }
    Ok((total / nf, g))
}

pub fn loss_sum(s: &Tensor2D, margin: f64) -> Result<f64> {
    square(s, "loss_sum")?;
    Ok(sum_with_grad(s, margin, false).0)
}

/// Errors when the batch has a single pair, since there is no negative.
pub fn loss_max(s: &Tensor2D, margin: f64) -> Result<f64> {
    if square(s, "loss_max")? < 2 {
        return Err(Error::Contract("loss_max needs at least two pairs".into()));
    }
    Ok(max_with_grad(s, margin, false).0)
}

pub fn loss_hal(s: &Tensor2D, alpha: f64, beta: f64, eps: f64) -> Result<f64> {
    if square(s, "loss_hal")? == 0 {
        return Err(Error::Contract("loss_hal needs a non-empty batch".into()));
    }
    Ok(hal_with_grad(s, alpha, beta, eps, false)?.0)
}

pub fn loss_value(s: &Tensor2D, cfg: &LossConfig) -> Result<f64> {
    Ok(loss_with_grad(s, cfg)?.0)
}

/// The configured loss and its gradient with respect to `S`.
pub fn loss_with_grad(s: &Tensor2D, cfg: &LossConfig) -> Result<(f64, Tensor2D)> {
    let n = square(s, "loss")?;
    match cfg.kind {
        LossKind::Sum => Ok(sum_with_grad(s, cfg.margin, true)),
        LossKind::Max => {
            if n < 2 {
                return Err(Error::Contract("loss_max needs at least two pairs".into()));
            }
            Ok(max_with_grad(s, cfg.margin, true))
        }
        LossKind::Hal => {
            if n == 0 {
                return Err(Error::Contract("loss_hal needs a non-empty batch".into()));
            }
            hal_with_grad(s, cfg.hal_alpha, cfg.hal_beta, cfg.hal_eps, true)
        }
    }
}

/// Smallest distance from `s` to a point where the triplet losses are not
/// differentiable: a hinge at zero, or two tied hardest negatives.
pub fn kink_distance(s: &Tensor2D, margin: f64) -> f64 {
    let n = s.rows().min(s.cols());
    let mut best = f64::INFINITY;
    for i in 0..n {
        let mut row = Vec::new();
        let mut col = Vec::new();
        for j in (0..n).filter(|&j| j != i) {
            row.push(margin - s.get(i, i) + s.get(i, j));
            col.push(margin - s.get(i, i) + s.get(j, i));
        }
        for v in [&mut row, &mut col] {
            best = v.iter().fold(best, |b, h| b.min(h.abs()));
            v.sort_by(f64::total_cmp);
            best = v.windows(2).fold(best, |b, w| b.min(w[1] - w[0]));
        }
    }
    best
}

struct LossOp {
    grad: Tensor2D,
}

impl CustomOp for LossOp {
    fn name(&self) -> &'static str {
        "loss"
    }

    fn backward(&self, _inputs: &[&Tensor2D], _output: &Tensor2D, grad_out: &Tensor2D) -> Vec<Tensor2D> {
        vec![self.grad.scaled(grad_out.get(0, 0))]
    }
}

/// Records the configured loss of the similarity node `s` as a `1×1` node.
pub fn loss_on_tape(tape: &mut Tape<'_>, s: Var, cfg: &LossConfig) -> Result<Var> {
    let (value, grad) = loss_with_grad(tape.value(s), cfg)?;
    if !value.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    Ok(tape.custom(
        Box::new(LossOp { grad }),
        &[s],
        Tensor2D::from_vec(1, 1, vec![value])?,
    ))
}

/// Re-pairs each record with probability `p` to an image id drawn
/// uniformly from the other ids in `records`. Returns the noisy copy and
/// the number of re-paired records.
pub fn inject_pair_noise<R: Rng + ?Sized>(records: &[SampleRecord], p: f64, rng: &mut R) -> Result<(Vec<SampleRecord>, usize)> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("noise fraction {p} outside [0, 1]")));
    }
    let mut ids: Vec<&str> = records.iter().map(|r| r.image_id.as_str()).collect();
    ids.sort_unstable();
    ids.dedup();
    let mut out = records.to_vec();
    let mut changed = 0;
    for r in out.iter_mut() {
        if rng.random::<f64>() >= p || ids.len() < 2 {
            continue;
        }
        let pos = ids.binary_search(&r.image_id.as_str()).expect("id collected above");
        let mut k = rng.random_range(0..ids.len() - 1);
        if k >= pos {
            k += 1;
        }
        r.image_id = ids[k].to_string();
        changed += 1;
    }
    Ok((out, changed))
}
