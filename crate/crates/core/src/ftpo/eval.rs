//! Loss and preference accuracy over a dataset.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::FtpoSample;
use super::loss::{total_loss, FtpoInstance, FtpoLossParams, LossComponents};
use crate::backend::{MockModel, Token};

/// Logits of a policy and a reference model at the last position of a prompt.
pub trait LogitProvider: Sync {
    fn index_of(&self, token: &Token) -> Option<usize>;
    /// `(y, y_ref)` over the same vocabulary.
    fn logits(&self, prompt_text: &str) -> Result<(Vec<f64>, Vec<f64>), String>;
}

/// Table models for both sides; log-probabilities serve as logits and
/// tokens outside the active distribution get `floor`.
#[derive(Debug, Clone)]
pub struct MockLogitProvider {
    pub policy: MockModel,
    pub reference: MockModel,
    pub floor: f64,
}

pub const DEFAULT_FLOOR_LOGIT: f64 = -20.0;

impl MockLogitProvider {
    pub fn new(policy: MockModel, reference: MockModel) -> Result<Self, String> {
        if policy.spec().vocabulary != reference.spec().vocabulary {
            return Err("policy and reference vocabularies differ".into());
        }
        Ok(Self { policy, reference, floor: DEFAULT_FLOOR_LOGIT })
    }
}

impl LogitProvider for MockLogitProvider {
    fn index_of(&self, token: &Token) -> Option<usize> {
        self.reference.token_id(&token.text).map(|i| i as usize)
    }

    fn logits(&self, prompt_text: &str) -> Result<(Vec<f64>, Vec<f64>), String> {
        Ok((self.policy.logits(prompt_text, self.floor), self.reference.logits(prompt_text, self.floor)))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchReport {
    pub n_samples: usize,
    pub n_evaluated: usize,
    pub n_skipped: usize,
    pub mean_loss: f64,
    pub components: LossComponents,
    /// Fraction of samples with some chosen logit above the rejected one.
    pub pref_accuracy: f64,
    /// Mean signed `y − y_ref` over chosen, rejected and other tokens.
    pub delta_chosen: f64,
    pub delta_rejected: f64,
    pub delta_other: f64,
}

struct Row {
    loss: f64,
    comp: LossComponents,
    win: bool,
    dc: f64,
    dr: f64,
    d_other: f64,
}

fn eval_one<P: LogitProvider + ?Sized>(s: &FtpoSample, provider: &P, params: &FtpoLossParams) -> Option<Row> {
    let r = provider.index_of(&s.rejected)?;
    let chosen: Option<Vec<usize>> = s.chosen.iter().map(|c| provider.index_of(c)).collect();
    let (y, y_ref) = provider.logits(&s.prompt_text).ok()?;
    let inst = FtpoInstance::new(y, y_ref, r, chosen?).ok()?;
    let (loss, comp) = total_loss(&inst, params);
    let dev = |j: usize| inst.y[j] - inst.y_ref[j];
    let win = inst.chosen.iter().any(|&c| inst.y[c] > inst.y[r]);
    let dc = inst.chosen.iter().map(|&c| dev(c)).sum::<f64>() / inst.chosen.len() as f64;
    let others: Vec<f64> = inst.nontargets().map(dev).collect();
    let d_other = others.iter().sum::<f64>() / others.len() as f64;
    Some(Row { loss, comp, win, dc, dr: dev(r), d_other })
}

/// Samples whose tokens the provider cannot resolve are skipped and counted.
pub fn batch_eval<P: LogitProvider + ?Sized>(
    dataset: &[FtpoSample],
    provider: &P,
    params: &FtpoLossParams,
) -> BatchReport {
    let rows: Vec<Option<Row>> = dataset.par_iter().map(|s| eval_one(s, provider, params)).collect();
    let mut rep = BatchReport { n_samples: dataset.len(), ..Default::default() };
    let mut wins = 0usize;
    for row in rows.iter().flatten() {
        rep.n_evaluated += 1;
        rep.mean_loss += row.loss;
        rep.components.pref += row.comp.pref;
        rep.components.target += row.comp.target;
        rep.components.nontarget += row.comp.nontarget;
        rep.delta_chosen += row.dc;
        rep.delta_rejected += row.dr;
        rep.delta_other += row.d_other;
        wins += usize::from(row.win);
    }
    rep.n_skipped = rep.n_samples - rep.n_evaluated;
    if rep.n_evaluated > 0 {
        let n = rep.n_evaluated as f64;
        rep.mean_loss /= n;
        rep.components.pref /= n;
        rep.components.target /= n;
        rep.components.nontarget /= n;
        rep.delta_chosen /= n;
        rep.delta_rejected /= n;
        rep.delta_other /= n;
        rep.pref_accuracy = wins as f64 / n;
    }
    rep
}
