//! Loss terms and their assembly into the objective variants.
//!
//! Reconstruction is Bernoulli cross-entropy on `[0, 1]`-normalized
//! targets. Group KLs against the unit-Gaussian prior are closed-form.
//! Aggregate-posterior quantities (index-code mutual information, the
//! inferred-prior penalty, group- and variable-wise total correlations)
//! are estimated with minibatch-weighted sampling:
//! `log q(z_i) ~= log sum_j q(z_i | G_j) - log(B * N_data)`.
//!
//! The marginal-graph KL term is intractable and constant for per-batch
//! optimization, so it is never computed; it stays in [`LossBreakdown`] as
//! an explicitly null field.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{LatentGroup, ModelKind};
use crate::tape::{Tape, VarId};
use crate::tensor::{Scalar, Tensor};

pub const BCE_CLAMP: f64 = 1e-7;
const LN_2PI: f64 = 1.8378770664093453;

#[derive(Error, Debug)]
pub enum ObjectiveError {
    #[error("minibatch-weighted sampling requires a batch of at least 2, got {0}")]
    BatchTooSmall(usize),
    #[error("loss assembly for {variant} is missing term {term}")]
    MissingTerm {
        variant: &'static str,
        term: &'static str,
    },
    #[error("invalid objective: {0}")]
    Invalid(String),
}

/// The objective variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "NED-VAE")]
    NedVae,
    #[serde(rename = "NED-IPVAE-I")]
    NedIpvaeI,
    #[serde(rename = "NED-IPVAE-II")]
    NedIpvaeII,
    #[serde(rename = "NED-HCVAE")]
    NedHcvae,
    #[serde(rename = "NED-TCVAE")]
    NedTcvae,
    #[serde(rename = "NED-VTCVAE")]
    NedVtcvae,
    #[serde(rename = "NED-AnchorVAE")]
    NedAnchorVae,
    #[serde(rename = "GDVAE-baseline")]
    GdvaeBaseline,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::NedVae,
        Variant::NedIpvaeI,
        Variant::NedIpvaeII,
        Variant::NedHcvae,
        Variant::NedTcvae,
        Variant::NedVtcvae,
        Variant::NedAnchorVae,
        Variant::GdvaeBaseline,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::NedVae => "NED-VAE",
            Variant::NedIpvaeI => "NED-IPVAE-I",
            Variant::NedIpvaeII => "NED-IPVAE-II",
            Variant::NedHcvae => "NED-HCVAE",
            Variant::NedTcvae => "NED-TCVAE",
            Variant::NedVtcvae => "NED-VTCVAE",
            Variant::NedAnchorVae => "NED-AnchorVAE",
            Variant::GdvaeBaseline => "GDVAE-baseline",
        }
    }

    pub fn parse(s: &str) -> Result<Variant, ObjectiveError> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
                ObjectiveError::Invalid(format!(
                    "unknown variant {s:?}; expected one of {}",
                    names.join(", ")
                ))
            })
    }

    /// Model architecture this objective trains.
    pub fn model_kind(&self) -> ModelKind {
        match self {
            Variant::GdvaeBaseline => ModelKind::Gdvae,
            _ => ModelKind::NedVae,
        }
    }

    /// Whether the variant needs the minibatch-weighted density estimates.
    pub fn needs_mws(&self) -> bool {
        !matches!(self, Variant::NedVae | Variant::GdvaeBaseline)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn default_weight() -> f64 {
    10.0
}
fn default_anchor() -> LatentGroup {
    LatentGroup::E
}
fn default_n_data() -> usize {
    1
}

/// Variant choice plus its weights. `n_data` is the training-set size used
/// in the minibatch-weighted-sampling correction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveSpec {
    pub variant: Variant,
    #[serde(default = "default_weight")]
    pub beta: f64,
    #[serde(default = "default_weight")]
    pub lambda: f64,
    #[serde(default = "default_weight")]
    pub gamma: f64,
    #[serde(default = "default_weight")]
    pub gamma1: f64,
    #[serde(default = "default_weight")]
    pub gamma2: f64,
    #[serde(default = "default_weight")]
    pub gamma3: f64,
    #[serde(default = "default_anchor")]
    pub anchor: LatentGroup,
    #[serde(default = "default_n_data")]
    pub n_data: usize,
}

impl ObjectiveSpec {
    pub fn new(variant: Variant) -> Self {
        ObjectiveSpec {
            variant,
            beta: default_weight(),
            lambda: default_weight(),
            gamma: default_weight(),
            gamma1: default_weight(),
            gamma2: default_weight(),
            gamma3: default_weight(),
            anchor: default_anchor(),
            n_data: default_n_data(),
        }
    }

    pub fn with_n_data(mut self, n_data: usize) -> Self {
        self.n_data = n_data;
        self
    }

    pub fn validate(&self) -> Result<(), ObjectiveError> {
        for (name, w) in [
            ("beta", self.beta),
            ("lambda", self.lambda),
            ("gamma", self.gamma),
            ("gamma1", self.gamma1),
            ("gamma2", self.gamma2),
            ("gamma3", self.gamma3),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(ObjectiveError::Invalid(format!(
                    "weight {name} must be finite and non-negative, got {w}"
                )));
            }
        }
        if self.n_data == 0 {
            return Err(ObjectiveError::Invalid("n_data must be positive".into()));
        }
        Ok(())
    }
}

/// Every component of one evaluated loss. Fields hold values only when the
/// variant's assembly uses them; `total` equals the variant's weighted sum
/// of the populated components. `marginal_graph_kl` is always null.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub recon_edge: f64,
    pub recon_node: f64,
    pub kl_e: Option<f64>,
    pub kl_f: Option<f64>,
    pub kl_g: Option<f64>,
    pub mi_total: Option<f64>,
    pub ip: Option<f64>,
    pub tc_groups: Option<f64>,
    pub dim_kl_groups: Option<f64>,
    pub tc_dims_e: Option<f64>,
    pub tc_dims_f: Option<f64>,
    pub tc_dims_g: Option<f64>,
    pub anchor_mi: Option<f64>,
    pub marginal_graph_kl: Option<f64>,
}

impl LossBreakdown {
    /// Recompute the total from the populated components.
    pub fn recombine(&self, spec: &ObjectiveSpec) -> f64 {
        let recon = self.recon_node + self.recon_edge;
        let kl_sum = self.kl_e.unwrap_or(0.0) + self.kl_f.unwrap_or(0.0) + self.kl_g.unwrap_or(0.0);
        match spec.variant {
            Variant::NedVae | Variant::GdvaeBaseline => recon + spec.beta * kl_sum,
            Variant::NedIpvaeI => recon + self.mi_total.unwrap_or(0.0) + spec.lambda * self.ip.unwrap_or(0.0),
            Variant::NedIpvaeII => recon + spec.lambda * self.ip.unwrap_or(0.0),
            Variant::NedHcvae => {
                recon + self.mi_total.unwrap_or(0.0) + spec.gamma * self.tc_groups.unwrap_or(0.0)
            }
            Variant::NedTcvae => {
                recon
                    + self.mi_total.unwrap_or(0.0)
                    + self.dim_kl_groups.unwrap_or(0.0)
                    + spec.beta * self.tc_groups.unwrap_or(0.0)
            }
            Variant::NedVtcvae => {
                recon
                    + self.mi_total.unwrap_or(0.0)
                    + self.dim_kl_groups.unwrap_or(0.0)
                    + spec.beta * self.tc_groups.unwrap_or(0.0)
                    + spec.gamma1 * self.tc_dims_f.unwrap_or(0.0)
                    + spec.gamma2 * self.tc_dims_e.unwrap_or(0.0)
                    + spec.gamma3 * self.tc_dims_g.unwrap_or(0.0)
            }
            Variant::NedAnchorVae => {
                recon + self.mi_total.unwrap_or(0.0) + self.ip.unwrap_or(0.0)
                    - spec.lambda * self.anchor_mi.unwrap_or(0.0)
            }
        }
    }
}

// ---- reconstruction ---------------------------------------------------------

/// Bernoulli cross-entropy summed over all entries:
/// `-sum x ln x_hat + (1 - x) ln(1 - x_hat)`, with predictions clamped to
/// `[1e-7, 1 - 1e-7]`. `mask` multiplies entries before summing.
fn bce_sum<T: Scalar>(
    tape: &mut Tape<T>,
    pred: VarId,
    target: &Tensor<T>,
    mask: Option<&Tensor<T>>,
) -> VarId {
    let lo = T::from_f64(BCE_CLAMP);
    let hi = T::from_f64(1.0 - BCE_CLAMP);
    let p = tape.clamp(pred, lo, hi);
    let ln_p = tape.ln(p);
    let neg_p = tape.scale(p, -T::ONE);
    let one_minus_p = tape.add_scalar(neg_p, T::ONE);
    let ln_1p = tape.ln(one_minus_p);
    let x = tape.constant(target.clone());
    let one_minus_x = tape.constant(target.map(|v| T::ONE - v));
    let a = tape.mul(x, ln_p);
    let b = tape.mul(one_minus_x, ln_1p);
    let mut s = tape.add(a, b);
    if let Some(m) = mask {
        let m = tape.constant(m.clone());
        s = tape.mul(s, m);
    }
    let total = tape.sum_all(s);
    tape.scale(total, -T::ONE)
}

/// Node reconstruction loss for one graph, summed over `N x D` entries.
pub fn recon_bce_node<T: Scalar>(tape: &mut Tape<T>, fhat: VarId, target: &Tensor<T>) -> VarId {
    assert_eq!(tape.shape(fhat), target.shape(), "recon_bce_node: shape mismatch");
    bce_sum(tape, fhat, target, None)
}

/// Edge reconstruction loss for one graph. Only off-diagonal entries count;
/// by symmetry this equals twice the `i < j` sum.
pub fn recon_bce_edge<T: Scalar>(tape: &mut Tape<T>, ehat: VarId, target: &Tensor<T>) -> VarId {
    assert_eq!(tape.shape(ehat), target.shape(), "recon_bce_edge: shape mismatch");
    let shape = target.shape();
    let mask = crate::model::offdiag_mask::<T>(shape[0], shape[2]);
    bce_sum(tape, ehat, target, Some(&mask))
}

// ---- closed-form KL ---------------------------------------------------------

/// Closed-form KL of diagonal Gaussians against the unit prior,
/// `sum_d (mu_d^2 + sigma_d^2 - 1 - log sigma_d^2) / 2`, averaged over the
/// batch. Input shape `[B, L_g]`.
pub fn kl_gaussian_group<T: Scalar>(tape: &mut Tape<T>, mu: VarId, logvar: VarId) -> VarId {
    let shape = tape.shape(mu).to_vec();
    assert_eq!(shape.len(), 2, "kl_gaussian_group: [B, L] input required");
    let b = shape[0];
    let sq = tape.square(mu);
    let var = tape.exp(logvar);
    let t = tape.add(sq, var);
    let t = tape.add_scalar(t, -T::ONE);
    let t = tape.sub(t, logvar);
    let s = tape.sum_all(t);
    tape.scale(s, T::from_f64(0.5 / b as f64))
}

// ---- minibatch-weighted sampling -------------------------------------------

/// Aggregate-posterior log-density estimates for one batch.
#[derive(Debug)]
pub struct MwsEstimates {
    pub batch_size: usize,
    pub latent_dim: usize,
    pub groups: Vec<Range<usize>>,
    /// `log q(Z_i)`, shape `[B]`.
    pub log_q_joint: VarId,
    /// `log q(z_g,i)` per group, each `[B]`.
    pub log_q_group: Vec<VarId>,
    /// `log q(z^d_i)` per latent dimension, each `[B]`.
    pub log_q_dim: Vec<VarId>,
    /// `log q(z_g,i | G_i)` per group, each `[B]` (no correction).
    pub log_q_cond_group: Vec<VarId>,
}

/// Estimate aggregate-posterior log densities from a minibatch.
/// `z`, `mu`, `logvar` all have shape `[B, L]`; `groups` are the latent
/// column ranges of `z_e`, `z_f`, `z_g`.
pub fn mws_log_q<T: Scalar>(
    tape: &mut Tape<T>,
    z: VarId,
    mu: VarId,
    logvar: VarId,
    groups: &[Range<usize>],
    n_data: usize,
) -> Result<MwsEstimates, ObjectiveError> {
    let shape = tape.shape(z).to_vec();
    let (b, l) = (shape[0], shape[1]);
    if b < 2 {
        return Err(ObjectiveError::BatchTooSmall(b));
    }
    let corr = T::from_f64(-((b * n_data) as f64).ln());
    let ll = tape.pairwise_gauss_ll(z, mu, logvar);
    let joint_bb = tape.sum_last_range(ll, 0, l);
    let lse = tape.logsumexp_cols(joint_bb);
    let log_q_joint = tape.add_scalar(lse, corr);
    let mut log_q_group = Vec::with_capacity(groups.len());
    let mut log_q_cond_group = Vec::with_capacity(groups.len());
    for g in groups {
        let bb = tape.sum_last_range(ll, g.start, g.end);
        let lse = tape.logsumexp_cols(bb);
        log_q_group.push(tape.add_scalar(lse, corr));
        log_q_cond_group.push(tape.diag(bb));
    }
    let mut log_q_dim = Vec::with_capacity(l);
    for d in 0..l {
        let bb = tape.sum_last_range(ll, d, d + 1);
        let lse = tape.logsumexp_cols(bb);
        log_q_dim.push(tape.add_scalar(lse, corr));
    }
    Ok(MwsEstimates {
        batch_size: b,
        latent_dim: l,
        groups: groups.to_vec(),
        log_q_joint,
        log_q_group,
        log_q_dim,
        log_q_cond_group,
    })
}

fn batch_mean<T: Scalar>(tape: &mut Tape<T>, v: VarId) -> VarId {
    let b = tape.shape(v)[0];
    let s = tape.sum_all(v);
    tape.scale(s, T::from_f64(1.0 / b as f64))
}

/// Standard-normal log density of each batch row: `[B, L] -> [B]` over the
/// column range `[s, e)`.
fn log_prior_rows<T: Scalar>(tape: &mut Tape<T>, z: VarId, s: usize, e: usize) -> VarId {
    let cols = tape.slice_cols(z, s, e);
    let sq = tape.square(cols);
    let row_sums = tape.sum_cols(sq);
    let shifted = tape.add_scalar(row_sums, T::from_f64((e - s) as f64 * LN_2PI));
    tape.scale(shifted, T::from_f64(-0.5))
}

/// Index-code mutual information: total over groups and the per-group parts,
/// `mi_g = mean_i [log q(z_g,i | G_i) - log q(z_g,i)]`.
pub fn term_mi<T: Scalar>(tape: &mut Tape<T>, est: &MwsEstimates) -> (VarId, Vec<VarId>) {
    let mut per_group = Vec::with_capacity(est.groups.len());
    for (cond, marg) in est.log_q_cond_group.iter().zip(&est.log_q_group) {
        let diff = tape.sub(*cond, *marg);
        per_group.push(batch_mean(tape, diff));
    }
    (tape.add_n(&per_group), per_group)
}

/// Inferred-prior penalty: `mean_i [log q(Z_i) - log p(Z_i)]`.
pub fn term_ip<T: Scalar>(tape: &mut Tape<T>, est: &MwsEstimates, z: VarId) -> VarId {
    let logp = log_prior_rows(tape, z, 0, est.latent_dim);
    let diff = tape.sub(est.log_q_joint, logp);
    batch_mean(tape, diff)
}

/// Group-wise total correlation:
/// `mean_i [log q(Z_i) - sum_g log q(z_g,i)]`.
pub fn term_tc_groups<T: Scalar>(tape: &mut Tape<T>, est: &MwsEstimates) -> VarId {
    let marg_sum = tape.add_n(&est.log_q_group);
    let diff = tape.sub(est.log_q_joint, marg_sum);
    batch_mean(tape, diff)
}

/// Dimension-wise KL to the prior summed over all latent dimensions, plus
/// the within-group total correlations
/// `tc_g = mean_i [log q(z_g,i) - sum_{d in g} log q(z^d_i)]`.
pub fn term_dim_kl<T: Scalar>(
    tape: &mut Tape<T>,
    est: &MwsEstimates,
    z: VarId,
) -> (VarId, Vec<VarId>) {
    let mut dim_terms = Vec::with_capacity(est.latent_dim);
    for d in 0..est.latent_dim {
        let logp_d = log_prior_rows(tape, z, d, d + 1);
        let diff = tape.sub(est.log_q_dim[d], logp_d);
        dim_terms.push(batch_mean(tape, diff));
    }
    let dim_kl = tape.add_n(&dim_terms);
    let mut tc_dims = Vec::with_capacity(est.groups.len());
    for (g, log_q_g) in est.groups.iter().zip(&est.log_q_group) {
        let dims: Vec<VarId> = (g.start..g.end).map(|d| est.log_q_dim[d]).collect();
        let dims_sum = tape.add_n(&dims);
        let diff = tape.sub(*log_q_g, dims_sum);
        tc_dims.push(batch_mean(tape, diff));
    }
    (dim_kl, tc_dims)
}

// ---- assembly ---------------------------------------------------------------

/// Scalar term nodes available to the assembler. Group-indexed vectors
/// follow the `[e, f, g]` order.
#[derive(Default, Clone)]
pub struct TermVars {
    pub recon_node: Option<VarId>,
    pub recon_edge: Option<VarId>,
    pub kl_groups: Option<Vec<VarId>>,
    pub mi_total: Option<VarId>,
    pub mi_groups: Option<Vec<VarId>>,
    pub ip: Option<VarId>,
    pub tc_groups: Option<VarId>,
    pub dim_kl: Option<VarId>,
    pub tc_dims: Option<Vec<VarId>>,
}

fn require(
    v: Option<VarId>,
    variant: &'static str,
    term: &'static str,
) -> Result<VarId, ObjectiveError> {
    v.ok_or(ObjectiveError::MissingTerm { variant, term })
}

fn group_index(group: LatentGroup) -> usize {
    match group {
        LatentGroup::E => 0,
        LatentGroup::F => 1,
        LatentGroup::G => 2,
    }
}

/// Weighted sum of the variant's terms; the loss to minimize.
pub fn assemble_loss<T: Scalar>(
    tape: &mut Tape<T>,
    spec: &ObjectiveSpec,
    terms: &TermVars,
) -> Result<VarId, ObjectiveError> {
    spec.validate()?;
    let name = spec.variant.name();
    let recon_node = require(terms.recon_node, name, "recon_node")?;
    let recon_edge = require(terms.recon_edge, name, "recon_edge")?;
    let mut parts = vec![recon_node, recon_edge];
    let w = |tape: &mut Tape<T>, v: VarId, weight: f64| tape.scale(v, T::from_f64(weight));
    match spec.variant {
        Variant::NedVae | Variant::GdvaeBaseline => {
            let kls = terms.kl_groups.clone().ok_or(ObjectiveError::MissingTerm {
                variant: name,
                term: "kl_groups",
            })?;
            let kl_sum = tape.add_n(&kls);
            parts.push(w(tape, kl_sum, spec.beta));
        }
        Variant::NedIpvaeI => {
            let mi = require(terms.mi_total, name, "mi_total")?;
            let ip = require(terms.ip, name, "ip")?;
            parts.push(mi);
            parts.push(w(tape, ip, spec.lambda));
        }
        Variant::NedIpvaeII => {
            let ip = require(terms.ip, name, "ip")?;
            parts.push(w(tape, ip, spec.lambda));
        }
        Variant::NedHcvae => {
            let mi = require(terms.mi_total, name, "mi_total")?;
            let tc = require(terms.tc_groups, name, "tc_groups")?;
            parts.push(mi);
            parts.push(w(tape, tc, spec.gamma));
        }
        Variant::NedTcvae => {
            let mi = require(terms.mi_total, name, "mi_total")?;
            let dim_kl = require(terms.dim_kl, name, "dim_kl_groups")?;
            let tc = require(terms.tc_groups, name, "tc_groups")?;
            parts.push(mi);
            parts.push(dim_kl);
            parts.push(w(tape, tc, spec.beta));
        }
        Variant::NedVtcvae => {
            let mi = require(terms.mi_total, name, "mi_total")?;
            let dim_kl = require(terms.dim_kl, name, "dim_kl_groups")?;
            let tc = require(terms.tc_groups, name, "tc_groups")?;
            let tcd = terms.tc_dims.clone().ok_or(ObjectiveError::MissingTerm {
                variant: name,
                term: "tc_dims",
            })?;
            parts.push(mi);
            parts.push(dim_kl);
            parts.push(w(tape, tc, spec.beta));
            parts.push(w(tape, tcd[group_index(LatentGroup::F)], spec.gamma1));
            parts.push(w(tape, tcd[group_index(LatentGroup::E)], spec.gamma2));
            parts.push(w(tape, tcd[group_index(LatentGroup::G)], spec.gamma3));
        }
        Variant::NedAnchorVae => {
            let mi = require(terms.mi_total, name, "mi_total")?;
            let ip = require(terms.ip, name, "ip")?;
            let mi_groups = terms.mi_groups.clone().ok_or(ObjectiveError::MissingTerm {
                variant: name,
                term: "mi_groups",
            })?;
            let anchor = mi_groups[group_index(spec.anchor)];
            parts.push(mi);
            parts.push(ip);
            parts.push(w(tape, anchor, -spec.lambda));
        }
    }
    Ok(tape.add_n(&parts))
}

/// Batch-level inputs to the objective: per-sample reconstruction sums plus
/// the stacked posterior parameters and latent draws.
pub struct BatchInputs {
    pub recon_node: Vec<VarId>,
    pub recon_edge: Vec<VarId>,
    /// `[B, L]` stacked posterior means.
    pub mu: VarId,
    /// `[B, L]` stacked log-variances.
    pub logvar: VarId,
    /// `[B, L]` stacked reparameterized draws.
    pub z: VarId,
}

/// Assembled batch loss with every term var the variant populated.
pub struct BatchLoss {
    pub total: VarId,
    pub terms: TermVars,
}

/// Build the full objective for a batch: means the reconstruction terms,
/// computes closed-form KLs, runs the density estimators the variant needs,
/// and assembles the weighted total.
pub fn build_batch_objective<T: Scalar>(
    tape: &mut Tape<T>,
    spec: &ObjectiveSpec,
    groups: &[Range<usize>],
    batch: &BatchInputs,
) -> Result<BatchLoss, ObjectiveError> {
    spec.validate()?;
    let b = batch.recon_node.len();
    assert_eq!(b, batch.recon_edge.len(), "reconstruction term count mismatch");
    assert_eq!(b, tape.shape(batch.mu)[0], "posterior stack size mismatch");
    let inv_b = T::from_f64(1.0 / b as f64);
    let rn_sum = tape.add_n(&batch.recon_node);
    let recon_node = tape.scale(rn_sum, inv_b);
    let re_sum = tape.add_n(&batch.recon_edge);
    let recon_edge = tape.scale(re_sum, inv_b);

    let mut kls = Vec::with_capacity(groups.len());
    for g in groups {
        let mu_g = tape.slice_cols(batch.mu, g.start, g.end);
        let lv_g = tape.slice_cols(batch.logvar, g.start, g.end);
        kls.push(kl_gaussian_group(tape, mu_g, lv_g));
    }

    let mut terms = TermVars {
        recon_node: Some(recon_node),
        recon_edge: Some(recon_edge),
        kl_groups: Some(kls),
        ..TermVars::default()
    };

    if spec.variant.needs_mws() {
        let est = mws_log_q(tape, batch.z, batch.mu, batch.logvar, groups, spec.n_data)?;
        let (mi_total, mi_groups) = term_mi(tape, &est);
        let ip = term_ip(tape, &est, batch.z);
        let tc = term_tc_groups(tape, &est);
        let (dim_kl, tc_dims) = term_dim_kl(tape, &est, batch.z);
        terms.mi_total = Some(mi_total);
        terms.mi_groups = Some(mi_groups);
        terms.ip = Some(ip);
        terms.tc_groups = Some(tc);
        terms.dim_kl = Some(dim_kl);
        terms.tc_dims = Some(tc_dims);
    }

    let total = assemble_loss(tape, spec, &terms)?;
    Ok(BatchLoss { total, terms })
}

/// Read the evaluated term values into a [`LossBreakdown`], populating only
/// the components the variant's assembly uses.
pub fn extract_breakdown<T: Scalar>(
    tape: &Tape<T>,
    spec: &ObjectiveSpec,
    loss: &BatchLoss,
) -> LossBreakdown {
    let item = |v: VarId| tape.value(v).item().to_f64();
    let opt = |v: Option<VarId>| v.map(item);
    let terms = &loss.terms;
    let kl = |i: usize| terms.kl_groups.as_ref().map(|k| item(k[i]));
    let tc_dim = |i: usize| terms.tc_dims.as_ref().map(|t| item(t[i]));
    let uses_kl = matches!(spec.variant, Variant::NedVae | Variant::GdvaeBaseline);
    let uses_tc_dims = matches!(spec.variant, Variant::NedVtcvae);
    let uses_dim_kl = matches!(spec.variant, Variant::NedTcvae | Variant::NedVtcvae);
    let uses_tc = matches!(
        spec.variant,
        Variant::NedHcvae | Variant::NedTcvae | Variant::NedVtcvae
    );
    let uses_ip = matches!(
        spec.variant,
        Variant::NedIpvaeI | Variant::NedIpvaeII | Variant::NedAnchorVae
    );
    let uses_mi = matches!(
        spec.variant,
        Variant::NedIpvaeI | Variant::NedHcvae | Variant::NedTcvae | Variant::NedVtcvae
            | Variant::NedAnchorVae
    );
    LossBreakdown {
        total: item(loss.total),
        recon_node: terms.recon_node.map(item).unwrap_or(f64::NAN),
        recon_edge: terms.recon_edge.map(item).unwrap_or(f64::NAN),
        kl_e: if uses_kl { kl(0) } else { None },
        kl_f: if uses_kl { kl(1) } else { None },
        kl_g: if uses_kl { kl(2) } else { None },
        mi_total: if uses_mi { opt(terms.mi_total) } else { None },
        ip: if uses_ip { opt(terms.ip) } else { None },
        tc_groups: if uses_tc { opt(terms.tc_groups) } else { None },
        dim_kl_groups: if uses_dim_kl { opt(terms.dim_kl) } else { None },
        tc_dims_e: if uses_tc_dims { tc_dim(0) } else { None },
        tc_dims_f: if uses_tc_dims { tc_dim(1) } else { None },
        tc_dims_g: if uses_tc_dims { tc_dim(2) } else { None },
        anchor_mi: if matches!(spec.variant, Variant::NedAnchorVae) {
            terms
                .mi_groups
                .as_ref()
                .map(|g| item(g[group_index(spec.anchor)]))
        } else {
            None
        },
        marginal_graph_kl: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::Distribution;

    fn three_groups() -> Vec<Range<usize>> {
        vec![0..3, 3..6, 6..9]
    }

    /// Evaluate all estimator terms on a synthetic batch.
    struct TermValues {
        mi: f64,
        mi_groups: Vec<f64>,
        ip: f64,
        tc: f64,
        dim_kl: f64,
        tc_dims: Vec<f64>,
        kl_closed: f64,
    }

    fn eval_terms(
        mu: &Tensor<f64>,
        logvar: &Tensor<f64>,
        z: &Tensor<f64>,
        groups: &[Range<usize>],
        n_data: usize,
    ) -> TermValues {
        let mut tape = Tape::<f64>::new();
        let mu_v = tape.constant(mu.clone());
        let lv_v = tape.constant(logvar.clone());
        let z_v = tape.constant(z.clone());
        let est = mws_log_q(&mut tape, z_v, mu_v, lv_v, groups, n_data).unwrap();
        let (mi, mi_groups) = term_mi(&mut tape, &est);
        let ip = term_ip(&mut tape, &est, z_v);
        let tc = term_tc_groups(&mut tape, &est);
        let (dim_kl, tc_dims) = term_dim_kl(&mut tape, &est, z_v);
        let mut kl_closed = 0.0;
        for g in groups {
            let mu_g = tape.slice_cols(mu_v, g.start, g.end);
            let lv_g = tape.slice_cols(lv_v, g.start, g.end);
            let kl = kl_gaussian_group(&mut tape, mu_g, lv_g);
            kl_closed += tape.value(kl).item();
        }
        let item = |v: VarId| tape.value(v).item();
        TermValues {
            mi: item(mi),
            mi_groups: mi_groups.iter().map(|&v| item(v)).collect(),
            ip: item(ip),
            tc: item(tc),
            dim_kl: item(dim_kl),
            tc_dims: tc_dims.iter().map(|&v| item(v)).collect(),
            kl_closed,
        }
    }

    fn stdn(rng: &mut ChaCha8Rng) -> f64 {
        rand_distr::StandardNormal.sample(rng)
    }

    fn random_batch(
        seed: u64,
        b: usize,
        l: usize,
        mu_std: f64,
        lv_range: (f64, f64),
    ) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mu = vec![0.0; b * l];
        let mut lv = vec![0.0; b * l];
        let mut z = vec![0.0; b * l];
        for i in 0..b * l {
            mu[i] = mu_std * stdn(&mut rng);
            lv[i] = rng.random_range(lv_range.0..lv_range.1);
            z[i] = mu[i] + (0.5 * lv[i]).exp() * stdn(&mut rng);
        }
        (
            Tensor::new(vec![b, l], mu),
            Tensor::new(vec![b, l], lv),
            Tensor::new(vec![b, l], z),
        )
    }

    #[test]
    fn kl_closed_form_examples() {
        let mut tape = Tape::<f64>::new();
        // mu = 0, sigma = 1 -> 0
        let mu = tape.constant(Tensor::new(vec![1, 1], vec![0.0]));
        let lv = tape.constant(Tensor::new(vec![1, 1], vec![0.0]));
        let kl = kl_gaussian_group(&mut tape, mu, lv);
        assert!(tape.value(kl).item().abs() < 1e-12);
        // mu = 1, sigma = 1 -> 0.5
        let mu = tape.constant(Tensor::new(vec![1, 1], vec![1.0]));
        let lv = tape.constant(Tensor::new(vec![1, 1], vec![0.0]));
        let kl = kl_gaussian_group(&mut tape, mu, lv);
        assert!((tape.value(kl).item() - 0.5).abs() < 1e-12);
        // mu = 0, sigma = 0.5 -> (0.25 - 1 - ln 0.25) / 2
        let mu = tape.constant(Tensor::new(vec![1, 1], vec![0.0]));
        let lv = tape.constant(Tensor::new(vec![1, 1], vec![0.25f64.ln()]));
        let kl = kl_gaussian_group(&mut tape, mu, lv);
        let expect = 0.5 * (0.25 - 1.0 - 0.25f64.ln());
        assert!((tape.value(kl).item() - expect).abs() < 1e-12);
        assert!((expect - 0.3181).abs() < 1e-4);
    }

    #[test]
    fn kl_closed_form_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (mu, sigma) = (0.8, 0.6);
        let lv = (sigma * sigma as f64).ln();
        let draws = 100_000;
        let mut acc = 0.0;
        for _ in 0..draws {
            let z: f64 = mu + sigma * stdn(&mut rng);
            let log_q = -0.5 * ((z - mu) * (z - mu) / (sigma * sigma) + lv + LN_2PI);
            let log_p = -0.5 * (z * z + LN_2PI);
            acc += log_q - log_p;
        }
        let mc = acc / draws as f64;
        let closed = 0.5 * (mu * mu + sigma * sigma - 1.0 - lv);
        assert!(
            (mc - closed).abs() / closed.abs() < 0.02,
            "mc {mc} vs closed {closed}"
        );
    }

    #[test]
    fn bce_perfect_prediction_is_almost_zero() {
        let mut tape = Tape::<f64>::new();
        let target = Tensor::new(vec![2, 2, 1], vec![0.0, 1.0, 1.0, 0.0]);
        let pred = tape.constant(target.clone());
        let loss = recon_bce_edge(&mut tape, pred, &target);
        assert!(tape.value(loss).item().abs() < 1e-5);
    }

    #[test]
    fn bce_uniform_half_is_ln2_per_entry() {
        let mut tape = Tape::<f64>::new();
        let target = Tensor::new(vec![3, 2], vec![0.0, 1.0, 1.0, 0.0, 1.0, 1.0]);
        let pred = tape.constant(Tensor::filled(vec![3, 2], 0.5));
        let loss = recon_bce_node(&mut tape, pred, &target);
        let expect = 6.0 * std::f64::consts::LN_2;
        assert!((tape.value(loss).item() - expect).abs() < 1e-10);
    }

    #[test]
    fn bce_edge_counts_only_off_diagonal() {
        let mut tape = Tape::<f64>::new();
        let n = 3;
        let target = Tensor::<f64>::zeros(vec![n, n, 1]);
        let pred = tape.constant(Tensor::filled(vec![n, n, 1], 0.5));
        let loss = recon_bce_edge(&mut tape, pred, &target);
        let expect = (n * n - n) as f64 * std::f64::consts::LN_2;
        assert!((tape.value(loss).item() - expect).abs() < 1e-10);
    }

    #[test]
    fn mws_rejects_single_sample_batches() {
        let mut tape = Tape::<f64>::new();
        let t = Tensor::new(vec![1, 9], vec![0.0; 9]);
        let z = tape.constant(t.clone());
        let mu = tape.constant(t.clone());
        let lv = tape.constant(t);
        let err = mws_log_q(&mut tape, z, mu, lv, &three_groups(), 1).unwrap_err();
        assert!(matches!(err, ObjectiveError::BatchTooSmall(1)));
    }

    #[test]
    fn mws_identical_delta_posteriors_match_analytic_density() {
        // All posteriors identical and delta-like; z at the shared mean.
        // The estimate must equal the single-Gaussian log density minus
        // log n_data.
        let (b, l, n_data) = (64, 4, 100);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mu0: Vec<f64> = (0..l).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut mu = Vec::new();
        for _ in 0..b {
            mu.extend_from_slice(&mu0);
        }
        let mu = Tensor::new(vec![b, l], mu);
        let lv = Tensor::filled(vec![b, l], -10.0);
        let z = mu.clone();
        let mut tape = Tape::<f64>::new();
        let zv = tape.constant(z);
        let muv = tape.constant(mu);
        let lvv = tape.constant(lv);
        let est = mws_log_q(&mut tape, zv, muv, lvv, &[0..l], n_data).unwrap();
        let analytic: f64 = (0..l).map(|_| -0.5 * (-10.0 + LN_2PI)).sum::<f64>()
            - (n_data as f64).ln();
        let got = tape.value(est.log_q_joint).data()[0];
        assert!(
            (got - analytic).abs() < 1e-3,
            "mws {got} vs analytic {analytic}"
        );
    }

    #[test]
    fn ip_vanishes_for_standard_normal_posteriors() {
        let b = 256;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let z: Vec<f64> = (0..b * 9).map(|_| stdn(&mut rng)).collect();
        let mu = Tensor::<f64>::zeros(vec![b, 9]);
        let lv = Tensor::<f64>::zeros(vec![b, 9]);
        let z = Tensor::new(vec![b, 9], z);
        let t = eval_terms(&mu, &lv, &z, &three_groups(), 1);
        assert!(t.ip.abs() < 0.05, "ip {}", t.ip);
    }

    #[test]
    fn ip_large_for_shifted_posteriors() {
        let b = 256;
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let mu = Tensor::<f64>::filled(vec![b, 9], 5.0);
        let lv = Tensor::<f64>::zeros(vec![b, 9]);
        let z: Vec<f64> = (0..b * 9)
            .map(|i| 5.0 + stdn(&mut rng) + (i as f64) * 0.0)
            .collect();
        let z = Tensor::new(vec![b, 9], z);
        let t = eval_terms(&mu, &lv, &z, &three_groups(), 1);
        assert!(t.ip > 5.0, "ip {}", t.ip);
    }

    #[test]
    fn mi_and_ip_nonnegative_up_to_estimator_noise() {
        for seed in 0..5 {
            let (mu, lv, z) = random_batch(seed, 256, 9, 0.5, (-1.5, -0.5));
            let t = eval_terms(&mu, &lv, &z, &three_groups(), 1);
            assert!(t.mi >= -0.1, "mi {}", t.mi);
            assert!(t.ip >= -0.1, "ip {}", t.ip);
        }
    }

    #[test]
    fn mi_is_zero_on_duplicated_data() {
        // Identical posteriors for every sample: the log(1/B) corrections
        // cancel and per-group MI collapses to log n_data = 0 at n_data = 1.
        let (b, l) = (128, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mu0: Vec<f64> = (0..l).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut mu = Vec::new();
        for _ in 0..b {
            mu.extend_from_slice(&mu0);
        }
        let mu = Tensor::new(vec![b, l], mu);
        let lv = Tensor::filled(vec![b, l], (0.25f64).ln());
        let z: Vec<f64> = mu
            .data()
            .iter()
            .map(|&m| m + 0.5 * stdn(&mut rng))
            .collect();
        let z = Tensor::new(vec![b, l], z);
        let t = eval_terms(&mu, &lv, &z, &three_groups(), 1);
        assert!(t.mi.abs() < 1e-9, "mi {}", t.mi);
    }

    #[test]
    fn mi_recovers_log_b_for_distinct_delta_codes() {
        // B distinct near-delta posteriors = a discrete code over B graphs;
        // per-group MI approaches log B.
        let (b, l) = (128, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let mu: Vec<f64> = (0..b * l)
            .map(|_| 5.0 * stdn(&mut rng))
            .collect();
        let mu = Tensor::new(vec![b, l], mu);
        let lv = Tensor::filled(vec![b, l], -10.0);
        let z: Vec<f64> = mu
            .data()
            .iter()
            .map(|&m| m + (-5.0f64).exp() * stdn(&mut rng))
            .collect();
        let z = Tensor::new(vec![b, l], z);
        let t = eval_terms(&mu, &lv, &z, &three_groups(), 1);
        let log_b = (b as f64).ln();
        for mi_g in &t.mi_groups {
            assert!(
                (mi_g - log_b).abs() < 0.1,
                "per-group mi {mi_g} vs log B {log_b}"
            );
        }
    }

    #[test]
    fn tc_factorized_aggregate_is_near_zero() {
        // Population aggregate factorizes across groups when posterior means
        // are independent; sigma^2 = 0.1 keeps the estimator bias small.
        let reps = 10;
        let mut acc = 0.0;
        for seed in 0..reps {
            let b = 256;
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let s2: f64 = 0.1;
            let mu: Vec<f64> = (0..b * 2).map(|_| stdn(&mut rng)).collect();
            let mu = Tensor::new(vec![b, 2], mu);
            let lv = Tensor::filled(vec![b, 2], s2.ln());
            let z: Vec<f64> = mu
                .data()
                .iter()
                .map(|&m| m + s2.sqrt() * stdn(&mut rng))
                .collect();
            let z = Tensor::new(vec![b, 2], z);
            let t = eval_terms(&mu, &lv, &z, &[0..1, 1..2], 1);
            acc += t.tc;
        }
        let mean = acc / reps as f64;
        assert!(mean.abs() < 0.05, "factorized tc {mean}");
    }

    #[test]
    fn tc_estimator_is_group_permutation_symmetric() {
        let (mu, lv, z) = random_batch(55, 128, 9, 0.8, (-1.5, -0.5));
        let t1 = eval_terms(&mu, &lv, &z, &[0..3, 3..6, 6..9], 1);
        let t2 = eval_terms(&mu, &lv, &z, &[6..9, 0..3, 3..6], 1);
        assert!((t1.tc - t2.tc).abs() < 1e-10);
    }

    #[test]
    fn decomposition_identities_hold_on_random_batches() {
        // mean over batches of (mi + ip - closed KL) and per-batch
        // (tc + dim_kl - ip + sum tc_dims) stay within estimator tolerance.
        let reps = 10;
        let mut r1 = 0.0;
        for seed in 0..reps {
            let (mu, lv, z) = random_batch(200 + seed, 256, 9, 0.3, (-1.0, -0.4));
            let t = eval_terms(&mu, &lv, &z, &three_groups(), 1);
            r1 += t.mi + t.ip - t.kl_closed;
            let r2 = t.tc + t.dim_kl - t.ip + t.tc_dims.iter().sum::<f64>();
            assert!(r2.abs() < 1e-9, "exact estimator identity violated: {r2}");
        }
        assert!(
            (r1 / reps as f64).abs() < 0.1,
            "mi+ip vs closed KL residual {}",
            r1 / reps as f64
        );
    }

    #[test]
    fn assemble_matches_recombined_breakdown_for_all_variants() {
        let (mu, lv, z) = random_batch(77, 64, 9, 0.5, (-1.5, -0.5));
        for variant in Variant::ALL {
            let mut tape = Tape::<f64>::new();
            let muv = tape.constant(mu.clone());
            let lvv = tape.constant(lv.clone());
            let zv = tape.constant(z.clone());
            let rn: Vec<VarId> = (0..64)
                .map(|i| tape.constant(Tensor::scalar(10.0 + i as f64 * 0.01)))
                .collect();
            let re: Vec<VarId> = (0..64)
                .map(|i| tape.constant(Tensor::scalar(20.0 + i as f64 * 0.02)))
                .collect();
            let spec = ObjectiveSpec::new(variant);
            let batch = BatchInputs {
                recon_node: rn,
                recon_edge: re,
                mu: muv,
                logvar: lvv,
                z: zv,
            };
            let loss = build_batch_objective(&mut tape, &spec, &three_groups(), &batch).unwrap();
            let breakdown = extract_breakdown(&tape, &spec, &loss);
            let recombined = breakdown.recombine(&spec);
            let rel = (breakdown.total - recombined).abs() / breakdown.total.abs().max(1.0);
            assert!(
                rel < 1e-6,
                "{variant}: total {} vs recombined {recombined}",
                breakdown.total
            );
        }
    }

    #[test]
    fn ned_vae_at_beta_one_is_classic_elbo() {
        let (mu, lv, z) = random_batch(78, 32, 9, 0.5, (-1.5, -0.5));
        let mut tape = Tape::<f64>::new();
        let muv = tape.constant(mu);
        let lvv = tape.constant(lv);
        let zv = tape.constant(z);
        let rn: Vec<VarId> = (0..32).map(|_| tape.constant(Tensor::scalar(5.0))).collect();
        let re: Vec<VarId> = (0..32).map(|_| tape.constant(Tensor::scalar(7.0))).collect();
        let mut spec = ObjectiveSpec::new(Variant::NedVae);
        spec.beta = 1.0;
        let batch = BatchInputs {
            recon_node: rn,
            recon_edge: re,
            mu: muv,
            logvar: lvv,
            z: zv,
        };
        let loss = build_batch_objective(&mut tape, &spec, &three_groups(), &batch).unwrap();
        let breakdown = extract_breakdown(&tape, &spec, &loss);
        let elbo = 12.0
            + breakdown.kl_e.unwrap()
            + breakdown.kl_f.unwrap()
            + breakdown.kl_g.unwrap();
        assert!((breakdown.total - elbo).abs() < 1e-9);
    }

    #[test]
    fn zero_weights_reduce_total_to_reconstruction() {
        let (mu, lv, z) = random_batch(79, 16, 9, 0.5, (-1.5, -0.5));
        let mut tape = Tape::<f64>::new();
        let muv = tape.constant(mu);
        let lvv = tape.constant(lv);
        let zv = tape.constant(z);
        let rn: Vec<VarId> = (0..16).map(|_| tape.constant(Tensor::scalar(3.0))).collect();
        let re: Vec<VarId> = (0..16).map(|_| tape.constant(Tensor::scalar(4.0))).collect();
        let mut spec = ObjectiveSpec::new(Variant::NedVae);
        spec.beta = 0.0;
        let batch = BatchInputs {
            recon_node: rn,
            recon_edge: re,
            mu: muv,
            logvar: lvv,
            z: zv,
        };
        let loss = build_batch_objective(&mut tape, &spec, &three_groups(), &batch).unwrap();
        assert!((tape.value(loss.total).item() - 7.0).abs() < 1e-12);
    }

    #[test]
    fn missing_term_error_names_the_term() {
        let mut tape = Tape::<f64>::new();
        let rn = tape.constant(Tensor::scalar(1.0));
        let re = tape.constant(Tensor::scalar(1.0));
        let terms = TermVars {
            recon_node: Some(rn),
            recon_edge: Some(re),
            ..TermVars::default()
        };
        let spec = ObjectiveSpec::new(Variant::NedTcvae);
        let err = assemble_loss(&mut tape, &spec, &terms).unwrap_err();
        match err {
            ObjectiveError::MissingTerm { term, .. } => assert_eq!(term, "mi_total"),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn variant_names_parse_and_roundtrip() {
        for v in Variant::ALL {
            assert_eq!(Variant::parse(v.name()).unwrap(), v);
        }
        let err = Variant::parse("NED-FOO").unwrap_err();
        let msg = err.to_string();
        for v in Variant::ALL {
            assert!(msg.contains(v.name()), "error should list {}", v.name());
        }
    }

    #[test]
    fn negative_weights_are_rejected() {
        let mut spec = ObjectiveSpec::new(Variant::NedVae);
        spec.beta = -1.0;
        assert!(spec.validate().is_err());
    }
}
