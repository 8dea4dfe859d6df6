//! Token-level preference loss on logit vectors.
//!
//! With `Δ_c = y[c] − y[r]` and taper `w_c = clamp((m − Δ_c)/m, 0, 1)`:
//!
//! ```text
//! L_pref      = Σ w_c·softplus(m − Δ_c) / Σ w_c          (0 when Σ w_c = 0)
//! L_target    = mean_{j∈T} max(|y[j] − y_ref[j]| − τ, 0)²  T = C ∪ {r}
//! L_nontarget = mean_{j∈N} (y[j] − y_ref[j])²             N = V \ T
//! L           = L_pref + λ_t·L_target + λ_n·L_nontarget
//! ```

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FtpoLossParams {
    /// Margin in logits.
    pub m: f64,
    pub tau_target: f64,
    pub lambda_target: f64,
    pub lambda_nontarget: f64,
    /// Treat the taper weights as constants when differentiating.
    #[serde(default)]
    pub detach_taper_weight: bool,
}

impl Default for FtpoLossParams {
    fn default() -> Self {
        Self { m: 2.0, tau_target: 0.5, lambda_target: 0.05, lambda_nontarget: 0.4, detach_taper_weight: false }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum InstanceError {
    #[error("y has {0} entries but y_ref has {1}")]
    LengthMismatch(usize, usize),
    #[error("index {0} out of range for vocabulary of {1}")]
    OutOfRange(usize, usize),
    #[error("rejected index is also chosen")]
    RejectedChosen,
    #[error("chosen set is empty")]
    NoChosen,
    #[error("chosen index {0} repeated")]
    DuplicateChosen(usize),
    #[error("vocabulary of {vocab} leaves no non-target tokens (|T| = {targets})")]
    NoNontarget { vocab: usize, targets: usize },
    #[error("invalid loss parameters: {0}")]
    Params(String),
}

impl FtpoLossParams {
    pub fn validate(&self) -> Result<(), InstanceError> {
        if !(self.m > 0.0) {
            return Err(InstanceError::Params("margin must be positive".into()));
        }
        if !(self.tau_target >= 0.0) || !(self.lambda_target >= 0.0) || !(self.lambda_nontarget >= 0.0) {
            return Err(InstanceError::Params("tau and lambdas must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FtpoInstance {
    pub y: Vec<f64>,
    pub y_ref: Vec<f64>,
    pub rejected: usize,
    pub chosen: Vec<usize>,
    is_target: Vec<bool>,
}

impl FtpoInstance {
    pub fn new(y: Vec<f64>, y_ref: Vec<f64>, rejected: usize, chosen: Vec<usize>) -> Result<Self, InstanceError> {
        let v = y.len();
        if y_ref.len() != v {
            return Err(InstanceError::LengthMismatch(v, y_ref.len()));
        }
        if chosen.is_empty() {
            return Err(InstanceError::NoChosen);
        }
        let mut is_target = vec![false; v];
        for &i in chosen.iter().chain(std::iter::once(&rejected)) {
            if i >= v {
                return Err(InstanceError::OutOfRange(i, v));
            }
        }
        is_target[rejected] = true;
        for &c in &chosen {
            if c == rejected {
                return Err(InstanceError::RejectedChosen);
            }
            if is_target[c] {
                return Err(InstanceError::DuplicateChosen(c));
            }
            is_target[c] = true;
        }
        let targets = chosen.len() + 1;
        if v < targets + 1 {
            return Err(InstanceError::NoNontarget { vocab: v, targets });
        }
        Ok(Self { y, y_ref, rejected, chosen, is_target })
    }

    pub fn vocab(&self) -> usize {
        self.y.len()
    }

    pub fn is_target(&self, j: usize) -> bool {
        self.is_target[j]
    }

    pub fn targets(&self) -> impl Iterator<Item = usize> + '_ {
        self.chosen.iter().copied().chain(std::iter::once(self.rejected))
    }

    pub fn nontargets(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.vocab()).filter(|&j| !self.is_target[j])
    }

    pub fn with_y(&self, y: Vec<f64>) -> Self {
        Self { y, ..self.clone() }
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn taper_weight(delta: f64, m: f64) -> f64 {
    ((m - delta) / m).clamp(0.0, 1.0)
}

/// Value and the per-chosen taper weights.
pub fn pref_loss(inst: &FtpoInstance, m: f64) -> (f64, Vec<f64>) {
    let yr = inst.y[inst.rejected];
    let mut num = 0.0;
    let mut den = 0.0;
    let mut w = Vec::with_capacity(inst.chosen.len());
    for &c in &inst.chosen {
        let d = inst.y[c] - yr;
        let wc = taper_weight(d, m);
        num += wc * softplus(m - d);
        den += wc;
        w.push(wc);
    }
    (if den > 0.0 { num / den } else { 0.0 }, w)
}

pub fn target_mse(inst: &FtpoInstance, tau_target: f64) -> f64 {
    let n = inst.chosen.len() + 1;
    inst.targets()
        .map(|j| ((inst.y[j] - inst.y_ref[j]).abs() - tau_target).max(0.0).powi(2))
        .sum::<f64>()
        / n as f64
}

pub fn nontarget_mse(inst: &FtpoInstance) -> f64 {
    let mut n = 0usize;
    let mut s = 0.0;
    for j in inst.nontargets() {
        s += (inst.y[j] - inst.y_ref[j]).powi(2);
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub pref: f64,
    pub target: f64,
    pub nontarget: f64,
}

pub fn total_loss(inst: &FtpoInstance, p: &FtpoLossParams) -> (f64, LossComponents) {
    let c = LossComponents {
        pref: pref_loss(inst, p.m).0,
        target: target_mse(inst, p.tau_target),
        nontarget: nontarget_mse(inst),
    };
    (c.pref + p.lambda_target * c.target + p.lambda_nontarget * c.nontarget, c)
}

/// `∂L/∂y`. The clamp and the dead zone contribute subgradient 0 at their
/// kinks.
pub fn grad_total(inst: &FtpoInstance, p: &FtpoLossParams) -> Vec<f64> {
    let mut g = vec![0.0; inst.vocab()];
    let (lp, w) = pref_loss(inst, p.m);
    let wsum: f64 = w.iter().sum();
    if wsum > 0.0 {
        let yr = inst.y[inst.rejected];
        for (&c, &wc) in inst.chosen.iter().zip(&w) {
            let d = inst.y[c] - yr;
            let dw = if !p.detach_taper_weight && d > 0.0 && d < p.m { -1.0 / p.m } else { 0.0 };
            let dd = (dw * (softplus(p.m - d) - lp) - wc * sigmoid(p.m - d)) / wsum;
            g[c] += dd;
            g[inst.rejected] -= dd;
        }
    }
    let nt = (inst.chosen.len() + 1) as f64;
    for j in inst.targets() {
        let d = inst.y[j] - inst.y_ref[j];
        let excess = d.abs() - p.tau_target;
        if excess > 0.0 {
            g[j] += p.lambda_target * 2.0 * excess * d.signum() / nt;
        }
    }
    let nn = (inst.vocab() - inst.chosen.len() - 1) as f64;
    for j in inst.nontargets() {
        g[j] += p.lambda_nontarget * 2.0 * (inst.y[j] - inst.y_ref[j]) / nn;
    }
    g
}
