//! Pair learning module: the losses coupling the two branches and the
//! routing that decides which branch each loss may update.
//!
//! Roles are fixed by position: the first branch (`cnn`) is the one the KL
//! objective trains, the second (`trans`) the one the contrastive objective
//! trains. Either role may host any backbone kind.

use std::fmt;
use std::str::FromStr;

use crate::backbones::BranchOutput;
use crate::error::{Error, Result};
use crate::schedule::StageLosses;
use crate::tensor::{Tape, Tensor, Var};

/// Added to masked logits; exp of it underflows to exactly zero.
const MASKED: f32 = -1.0e30;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Routing {
    /// Contrastive gradients reach only the second branch, KL gradients only
    /// the first.
    Restricted,
    /// Both losses reach both branches.
    Bidirectional,
}

impl fmt::Display for Routing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Routing::Restricted => "restricted",
            Routing::Bidirectional => "bidirectional",
        })
    }
}

impl FromStr for Routing {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "restricted" => Ok(Routing::Restricted),
            "bidirectional" => Ok(Routing::Bidirectional),
            other => Err(format!("expected `restricted` or `bidirectional`, got `{other}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlmConfig {
    /// Contrastive temperature.
    pub tau: f32,
    /// KL temperature.
    pub rho: f32,
    pub routing: Routing,
}

impl Default for PlmConfig {
    fn default() -> Self {
        PlmConfig {
            tau: 0.1,
            rho: 1.0,
            routing: Routing::Restricted,
        }
    }
}

impl PlmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config("plm.tau", format!("must be positive, got {}", self.tau)));
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::config("plm.rho", format!("must be positive, got {}", self.rho)));
        }
        Ok(())
    }
}

/// Scalar loss components of one step. Absent components were inactive.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub ce_cnn: Option<f64>,
    pub ce_trans: Option<f64>,
    pub cl: Option<f64>,
    pub kl: Option<f64>,
    pub total: f64,
}

impl LossReport {
    pub fn component_sum(&self) -> f64 {
        [self.ce_cnn, self.ce_trans, self.cl, self.kl]
            .iter()
            .flatten()
            .sum()
    }
}

impl fmt::Display for LossReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let show = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.6}"));
        write!(
            f,
            "ce_cnn={} ce_trans={} cl={} kl={} total={:.6}",
            show(self.ce_cnn),
            show(self.ce_trans),
            show(self.cl),
            show(self.kl),
            self.total
        )
    }
}

/// Validate one-hot rows and return the class index of each.
pub fn one_hot_labels(labels: &Tensor) -> Result<Vec<usize>> {
    let s = labels.shape();
    if s.len() != 2 {
        return Err(Error::contract(format!("labels must be N×C one-hot, got shape {s:?}")));
    }
    (0..s[0])
        .map(|i| {
            let row = labels.row(i);
            let hot: Vec<usize> = row.iter().enumerate().filter(|(_, &v)| v != 0.0).map(|(j, _)| j).collect();
            match hot[..] {
                [j] if row[j] == 1.0 => Ok(j),
                _ => Err(Error::contract(format!("label row {i} is not one-hot: {row:?}"))),
            }
        })
        .collect()
}

/// Mean over the batch of `-log softmax(Z)` at the true class.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &Tensor) -> Result<Var> {
    one_hot_labels(labels)?;
    if tape.shape(logits) != labels.shape() {
        return Err(Error::shape("cross_entropy", tape.shape(logits), labels.shape()));
    }
    let n = labels.shape()[0];
    let logp = tape.log_softmax(logits, 1)?;
    let y = tape.constant(labels.clone());
    let picked = tape.mul(logp, y)?;
    let s = tape.sum(picked)?;
    tape.scale(s, -1.0 / n as f32)
}

/// Log-probability of each anchor's matched partner among `2N−1` candidates:
/// all `N` partner-branch embeddings plus the other `N−1` same-branch ones.
fn matched_log_prob(tape: &mut Tape, anchors: Var, partners: Var, tau: f32) -> Result<Var> {
    let n = tape.shape(anchors)[0];
    let partners_t = tape.transpose(partners)?;
    let cross = tape.matmul(anchors, partners_t)?;
    let anchors_t = tape.transpose(anchors)?;
    let within = tape.matmul(anchors, anchors_t)?;
    let logits = tape.concat(&[cross, within], 1)?;
    let logits = tape.scale(logits, 1.0 / tau)?;
    let mut mask = Tensor::zeros(vec![n, 2 * n]);
    let mut select = Tensor::zeros(vec![n, 2 * n]);
    for i in 0..n {
        mask.data_mut()[i * 2 * n + n + i] = MASKED;
        select.data_mut()[i * 2 * n + i] = 1.0;
    }
    let mask = tape.constant(mask);
    let logits = tape.add(logits, mask)?;
    let logp = tape.log_softmax(logits, 1)?;
    let select = tape.constant(select);
    let picked = tape.mul(logp, select)?;
    tape.sum(picked)
}

/// Symmetric `(2N−1)`-way contrastive loss over raw dot-product similarity.
pub fn contrastive_loss(tape: &mut Tape, h_cnn: Var, h_trans: Var, tau: f32) -> Result<Var> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::config("plm.tau", format!("must be positive, got {tau}")));
    }
    let (sc, st) = (tape.shape(h_cnn).to_vec(), tape.shape(h_trans).to_vec());
    if sc.len() != 2 || sc != st {
        return Err(Error::shape("contrastive_loss", &sc, &st));
    }
    let n = sc[0];
    let from_cnn = matched_log_prob(tape, h_cnn, h_trans, tau)?;
    let from_trans = matched_log_prob(tape, h_trans, h_cnn, tau)?;
    let both = tape.add(from_cnn, from_trans)?;
    tape.scale(both, -1.0 / (2 * n) as f32)
}

/// `(1/N)·Σ KL(softmax(Z_t/ρ) ‖ softmax(Z_c/ρ))`, no temperature rescaling.
pub fn kl_loss(tape: &mut Tape, z_teacher: Var, z_student: Var, rho: f32) -> Result<Var> {
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(Error::config("plm.rho", format!("must be positive, got {rho}")));
    }
    let (st, sc) = (tape.shape(z_teacher).to_vec(), tape.shape(z_student).to_vec());
    if st.len() != 2 || st != sc {
        return Err(Error::shape("kl_loss", &st, &sc));
    }
    let n = st[0];
    let zt = tape.scale(z_teacher, 1.0 / rho)?;
    let zc = tape.scale(z_student, 1.0 / rho)?;
    let log_pt = tape.log_softmax(zt, 1)?;
    let log_pc = tape.log_softmax(zc, 1)?;
    let pt = tape.exp(log_pt)?;
    let diff = tape.sub(log_pt, log_pc)?;
    let terms = tape.mul(pt, diff)?;
    let s = tape.sum(terms)?;
    tape.scale(s, 1.0 / n as f32)
}

/// Pair losses of one step, already routed.
#[derive(Clone, Copy, Debug, Default)]
pub struct PairTerms {
    pub cl: Option<Var>,
    pub kl: Option<Var>,
}

/// Build the active pair losses. In restricted mode the contrastive term sees
/// a detached first-branch embedding and the KL term a detached
/// second-branch distribution.
pub fn route(
    tape: &mut Tape,
    cnn: &BranchOutput,
    trans: &BranchOutput,
    config: &PlmConfig,
    active: StageLosses,
) -> Result<PairTerms> {
    config.validate()?;
    let restricted = config.routing == Routing::Restricted;
    let cl = if active.cl {
        let hc = if restricted { tape.detach(cnn.embedding) } else { cnn.embedding };
        Some(contrastive_loss(tape, hc, trans.embedding, config.tau)?)
    } else {
        None
    };
    let kl = if active.kl {
        let zt = if restricted { tape.detach(trans.logits) } else { trans.logits };
        Some(kl_loss(tape, zt, cnn.logits, config.rho)?)
    } else {
        None
    };
    Ok(PairTerms { cl, kl })
}

/// Unit-weight sum of whichever components are present.
pub fn total_loss(tape: &mut Tape, parts: &[Option<Var>]) -> Result<Var> {
    let mut present = parts.iter().flatten().copied();
    let first = present
        .next()
        .ok_or_else(|| Error::contract("no active loss component"))?;
    present.try_fold(first, |acc, v| tape.add(acc, v))
}

/// Full objective of one joint step: both cross-entropies plus the routed
/// pair losses active in this stage.
pub fn vpl_objective(
    tape: &mut Tape,
    cnn: &BranchOutput,
    trans: &BranchOutput,
    labels: &Tensor,
    config: &PlmConfig,
    active: StageLosses,
) -> Result<(Var, LossReport)> {
    let ce_cnn = cross_entropy(tape, cnn.logits, labels)?;
    let ce_trans = cross_entropy(tape, trans.logits, labels)?;
    let pair = route(tape, cnn, trans, config, active)?;
    let total = total_loss(tape, &[Some(ce_cnn), Some(ce_trans), pair.cl, pair.kl])?;
    let read = |tape: &Tape, v: Option<Var>| v.map(|v| tape.value(v).data()[0] as f64);
    let report = LossReport {
        ce_cnn: read(tape, Some(ce_cnn)),
        ce_trans: read(tape, Some(ce_trans)),
        cl: read(tape, pair.cl),
        kl: read(tape, pair.kl),
        total: tape.value(total).data()[0] as f64,
    };
    Ok((total, report))
}
