//! Group-relative policy optimization with similarity-aware reweighting.
//!
//! For a group of `G` rollouts of one prompt:
//!
//! 1. rewards are normalized within the group into advantages `A_i`;
//! 2. at each position `t`, `Sim(i,t)` averages the cosine between the
//!    codebook embedding of rollout `i`'s token and those of every rollout
//!    `j` with `A_i * A_j <= 0`;
//! 3. the mask `M = (1 - Sim) / 2` scales the advantage token-wise,
//!    `A~_{i,t} = M_{i,t} A_i`, cancelling updates on content shared with
//!    opposite-advantage samples;
//! 4. the KL coefficient becomes `beta'_{i,t} = (a + b clip(Sim + 1)) beta`
//!    with `a = b = 0.5`, penalizing drift more where samples agree;
//! 5. the clipped surrogate with the token-weighted exact KL is maximized.

use serde::{Deserialize, Serialize};

use crate::codebook::{dot, Codebook};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::policy::model::{ParamVars, PolicyParams};
use crate::policy::prompt::PromptSpec;
use crate::policy::rollout::{teacher_forced, Rollout};
use crate::rewards::RewardVector;

/// Reward standard deviation below which a group carries no signal.
pub const ZERO_STD: f64 = 1e-8;
/// Exponent clamp for the importance ratio.
pub const LOG_RATIO_CLAMP: f64 = 30.0;
/// Probability floor for the reference distribution inside the KL.
pub const KL_FLOOR: f64 = 1e-12;

/// Group-normalized advantages.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupAdvantages {
    /// `(R_i - mean) / std`; all zero when the group is skipped.
    pub values: Vec<f64>,
    /// Reward std fell below [`ZERO_STD`]; the group is skipped.
    pub zero_std: bool,
}

/// Normalizes rewards with the population standard deviation.
pub fn normalize_advantages(rewards: &[f64]) -> Result<GroupAdvantages> {
    let g = rewards.len();
    if g < 2 {
        return Err(Error::arg(format!("group of {g} cannot be normalized")));
    }
    let mean = rewards.iter().sum::<f64>() / g as f64;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / g as f64;
    let std = var.sqrt();
    if !std.is_finite() {
        return Err(Error::Numerical("non-finite reward in group".into()));
    }
    if std < ZERO_STD {
        return Ok(GroupAdvantages {
            values: vec![0.0; g],
            zero_std: true,
        });
    }
    Ok(GroupAdvantages {
        values: rewards.iter().map(|r| (r - mean) / std).collect(),
        zero_std: false,
    })
}

pub fn token_cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::arg("embedding dimensions differ"));
    }
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::arg("cosine of a zero vector"));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// `Sim(i,t)`: mean cosine between rollout `i`'s embedding at `t` and
/// those of all rollouts `j` with `A_i * A_j <= 0`.
pub fn opposite_sign_similarity(adv: &GroupAdvantages, tokens: &[&[usize]], cb: &Codebook) -> Result<Tensor> {
    if adv.zero_std {
        return Err(Error::Contract("similarity requested for a zero-variance group".into()));
    }
    let g = adv.values.len();
    if tokens.len() != g {
        return Err(Error::arg(format!("{} token rows for {g} advantages", tokens.len())));
    }
    let t_len = tokens[0].len();
    if tokens.iter().any(|r| r.len() != t_len) {
        return Err(Error::arg("rollouts of unequal length"));
    }
    let embedded = tokens.iter().map(|r| cb.embed(r)).collect::<Result<Vec<_>>>()?;
    let mut sim = Tensor::zeros(&[g, t_len]);
    for i in 0..g {
        let partners: Vec<usize> = (0..g).filter(|&j| adv.values[i] * adv.values[j] <= 0.0).collect();
        if partners.is_empty() {
            return Err(Error::Contract(format!("rollout {i} has no opposite-sign partner")));
        }
        let row = sim.row_mut(i);
        for (t, out) in row.iter_mut().enumerate() {
            let mut s = 0.0;
            for &j in &partners {
                // Same token: exactly 1, so shared tokens cancel exactly.
                s += if tokens[i][t] == tokens[j][t] {
                    1.0
                } else {
                    token_cosine(embedded[i][t], embedded[j][t])?
                };
            }
            *out = s / partners.len() as f64;
        }
    }
    Ok(sim)
}

/// `M = (1 - Sim) / 2`, mapping `Sim in [-1, 1]` onto `[0, 1]`.
pub fn similarity_mask(sim: &Tensor) -> Tensor {
    sim.map(|s| (1.0 - s) / 2.0)
}

/// `A~_{i,t} = M_{i,t} * A_i`.
pub fn reweight_advantages(adv: &[f64], mask: &Tensor) -> Result<Tensor> {
    if mask.shape().len() != 2 || mask.shape()[0] != adv.len() {
        return Err(Error::arg(format!("mask {:?} vs {} advantages", mask.shape(), adv.len())));
    }
    let mut out = mask.clone();
    for (i, &a) in adv.iter().enumerate() {
        out.row_mut(i).iter_mut().for_each(|m| *m *= a);
    }
    Ok(out)
}

/// `A_i` repeated along each row: the unweighted advantage.
pub fn broadcast_advantages(adv: &[f64], t_len: usize) -> Tensor {
    let data = adv.iter().flat_map(|&a| std::iter::repeat_n(a, t_len)).collect();
    Tensor::matrix(adv.len(), t_len, data).expect("shape matches")
}

/// Clip bounds applied to `Sim + 1` in the KL weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlClip {
    pub lo: f64,
    pub hi: f64,
}

impl Default for KlClip {
    fn default() -> Self {
        Self { lo: 0.0, hi: 2.0 }
    }
}

/// `beta'_{i,t} = (0.5 + 0.5 * clip(Sim + 1, lo, hi)) * beta`.
pub fn kl_weights(sim: &Tensor, beta: f64, clip: KlClip) -> Result<Tensor> {
    if !(beta >= 0.0) {
        return Err(Error::arg(format!("beta must be non-negative, got {beta}")));
    }
    if !(clip.lo <= clip.hi) {
        return Err(Error::arg("KL clip bounds reversed"));
    }
    Ok(sim.map(|s| (0.5 + 0.5 * (s + 1.0).clamp(clip.lo, clip.hi)) * beta))
}

/// `exp(logp_new - logp_old)` on the tape, the exponent clamped to
/// `±LOG_RATIO_CLAMP`. Returns the ratio and how many entries hit the clamp.
pub fn importance_ratio(tape: &mut Tape, logp_new: Var, logp_old: &[f64]) -> (Var, usize) {
    let old = tape.constant_vec(logp_old.to_vec());
    let diff = tape.sub(logp_new, old);
    let clamped = tape.value(diff).iter().filter(|d| d.abs() > LOG_RATIO_CLAMP).count();
    let diff = tape.clip(diff, -LOG_RATIO_CLAMP, LOG_RATIO_CLAMP);
    (tape.exp(diff), clamped)
}

/// Plain-value ratio, for inspection.
pub fn importance_ratio_values(logp_new: &[f64], logp_old: &[f64]) -> Vec<f64> {
    logp_new
        .iter()
        .zip(logp_old)
        .map(|(n, o)| (n - o).clamp(-LOG_RATIO_CLAMP, LOG_RATIO_CLAMP).exp())
        .collect()
}

/// Exact per-position `KL(pi_theta || pi_ref)` from log-probability rows.
///
/// `rows[t]` holds `log pi_theta(. | o_<t)` on the tape and `ref_log[t]`
/// the reference row. Returns the `[T]` KL vector and the number of
/// reference entries raised to the floor.
pub fn kl_on_tape(tape: &mut Tape, rows: &[Var], ref_log: &[Vec<f64>]) -> Result<(Var, usize)> {
    if rows.len() != ref_log.len() {
        return Err(Error::arg("policy and reference lengths differ"));
    }
    let floor = KL_FLOOR.ln();
    let mut floored = 0;
    let mut terms = Vec::with_capacity(rows.len());
    for (&row, q) in rows.iter().zip(ref_log) {
        if q.len() != tape.value(row).len() {
            return Err(Error::arg("policy and reference vocabularies differ"));
        }
        let qf: Vec<f64> = q
            .iter()
            .map(|&x| {
                if x < floor {
                    floored += 1;
                    floor
                } else {
                    x
                }
            })
            .collect();
        let qv = tape.constant_vec(qf);
        let p = tape.exp(row);
        let d = tape.sub(row, qv);
        terms.push(tape.dot(p, d));
    }
    Ok((tape.concat(&terms), floored))
}

/// Exact per-position KL between two policies along a rollout.
pub fn exact_kl(theta: &PolicyParams, reference: &PolicyParams, r: &Rollout) -> Result<Vec<f64>> {
    if theta.dims().vocab != reference.dims().vocab {
        return Err(Error::arg("policies have different vocabularies"));
    }
    let q = teacher_forced(reference, &r.prompt, &r.tokens)?;
    let mut tape = Tape::new();
    let pv = theta.record(&mut tape, false);
    let cond = theta.dims().encoder().encode(&r.prompt)?;
    let rows = pv.sequence_log_probs(&mut tape, &cond, &r.tokens)?;
    let (kl, _) = kl_on_tape(&mut tape, &rows, &q.log_dists)?;
    Ok(tape.value(kl).to_vec())
}

/// Mean per-position entropy `H(o) = (1/T) sum_t -sum_x p log p` on the tape.
pub fn sequence_entropy_on_tape(tape: &mut Tape, rows: &[Var]) -> Var {
    let hs: Vec<Var> = rows
        .iter()
        .map(|&row| {
            let p = tape.exp(row);
            let plogp = tape.dot(p, row);
            tape.neg(plogp)
        })
        .collect();
    let all = tape.concat(&hs);
    tape.mean(all)
}

/// Statistics of one objective evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveStats {
    /// Sum over tokens of the clipped surrogate.
    pub surrogate_sum: f64,
    /// Sum over tokens of the (unweighted) KL.
    pub kl_sum: f64,
    /// Tokens where the clipped branch was strictly smaller.
    pub clipped: usize,
    pub ratio_clamped: usize,
    /// Reference probabilities raised to the KL floor.
    pub kl_floored: usize,
    pub tokens: usize,
}

impl ObjectiveStats {
    pub fn merge(&mut self, o: &ObjectiveStats) {
        self.surrogate_sum += o.surrogate_sum;
        self.kl_sum += o.kl_sum;
        self.clipped += o.clipped;
        self.ratio_clamped += o.ratio_clamped;
        self.kl_floored += o.kl_floored;
        self.tokens += o.tokens;
    }

    pub fn clip_fraction(&self) -> f64 {
        if self.tokens == 0 {
            0.0
        } else {
            self.clipped as f64 / self.tokens as f64
        }
    }
}

/// `(1/T) sum_t [ min(r A~, clip(r, 1-eps, 1+eps) A~) - beta' KL ]` for one
/// rollout.
pub fn rollout_objective(
    tape: &mut Tape,
    logp_new: Var,
    logp_old: &[f64],
    adv: &[f64],
    kl_weight: &[f64],
    kl: Var,
    eps: f64,
) -> Result<(Var, ObjectiveStats)> {
    let t_len = logp_old.len();
    if tape.value(logp_new).len() != t_len || adv.len() != t_len || kl_weight.len() != t_len || tape.value(kl).len() != t_len {
        return Err(Error::arg("objective inputs have mismatched lengths"));
    }
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::arg(format!("clip epsilon {eps} outside (0, 1)")));
    }
    let (ratio, ratio_clamped) = importance_ratio(tape, logp_new, logp_old);
    let a = tape.constant_vec(adv.to_vec());
    let unclipped = tape.mul(ratio, a);
    let rc = tape.clip(ratio, 1.0 - eps, 1.0 + eps);
    let clipped = tape.mul(rc, a);
    let clipped_count = tape
        .value(clipped)
        .iter()
        .zip(tape.value(unclipped))
        .filter(|(c, u)| c < u)
        .count();
    let surr = tape.minimum(unclipped, clipped);
    let w = tape.constant_vec(kl_weight.to_vec());
    let pen = tape.mul(w, kl);
    let per_token = tape.sub(surr, pen);
    let total = tape.sum(per_token);
    let j = tape.scale(total, 1.0 / t_len as f64);
    let stats = ObjectiveStats {
        surrogate_sum: tape.value(surr).iter().sum(),
        kl_sum: tape.value(kl).iter().sum(),
        clipped: clipped_count,
        ratio_clamped,
        kl_floored: 0,
        tokens: t_len,
    };
    Ok((j, stats))
}

/// The group objective `J = (1/G) sum_i J_i` on a single tape.
///
/// `logp_new[i]` and `kl[i]` are `[T]` tape values; `adv` and `kl_weight`
/// are `G x T`.
pub fn grpo_objective(
    tape: &mut Tape,
    logp_new: &[Var],
    logp_old: &[&[f64]],
    adv: &Tensor,
    kl_weight: &Tensor,
    kl: &[Var],
    eps: f64,
) -> Result<(Var, ObjectiveStats)> {
    let g = logp_new.len();
    if g == 0 || logp_old.len() != g || kl.len() != g || adv.shape().first() != Some(&g) || kl_weight.shape() != adv.shape() {
        return Err(Error::arg("objective inputs have mismatched group sizes"));
    }
    let mut stats = ObjectiveStats::default();
    let mut parts = Vec::with_capacity(g);
    for i in 0..g {
        let (j, s) = rollout_objective(tape, logp_new[i], logp_old[i], adv.row(i), kl_weight.row(i), kl[i], eps)?;
        stats.merge(&s);
        parts.push(j);
    }
    let all = tape.concat(&parts);
    Ok((tape.mean(all), stats))
}

/// Reweighting switches and coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReweightConfig {
    pub reweight_advantage: bool,
    pub reweight_kl: bool,
    pub beta: f64,
    pub kl_clip: KlClip,
    pub drop_kl_on_zero_std: bool,
}

/// One prompt's rollouts with every per-token weight the objective needs.
#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    pub prompt: PromptSpec,
    pub rollouts: Vec<Rollout>,
    pub rewards: RewardVector,
    pub advantages: GroupAdvantages,
    /// `None` when the group is skipped or no reweighting is enabled.
    pub similarity: Option<Tensor>,
    pub mask: Tensor,
    pub reweighted: Tensor,
    pub kl_weights: Tensor,
}

impl Group {
    /// Normalizes `rewards.combined` and derives masks and KL weights.
    pub fn prepare(rollouts: Vec<Rollout>, rewards: RewardVector, cb: &Codebook, cfg: &ReweightConfig) -> Result<Self> {
        let g = rollouts.len();
        if g < 2 {
            return Err(Error::arg("a group needs at least two rollouts"));
        }
        if rewards.combined.len() != g {
            return Err(Error::arg("reward count does not match group size"));
        }
        let t_len = rollouts[0].len();
        let advantages = normalize_advantages(&rewards.combined)?;

        let (similarity, mask, reweighted, kl_weights) = if advantages.zero_std {
            let beta = if cfg.drop_kl_on_zero_std { 0.0 } else { cfg.beta };
            (
                None,
                Tensor::full(&[g, t_len], 1.0),
                Tensor::zeros(&[g, t_len]),
                Tensor::full(&[g, t_len], beta),
            )
        } else {
            let sim = if cfg.reweight_advantage || cfg.reweight_kl {
                let toks: Vec<&[usize]> = rollouts.iter().map(|r| r.tokens.as_slice()).collect();
                Some(opposite_sign_similarity(&advantages, &toks, cb)?)
            } else {
                None
            };
            let (mask, adv) = match (&sim, cfg.reweight_advantage) {
                (Some(s), true) => {
                    let m = similarity_mask(s);
                    let a = reweight_advantages(&advantages.values, &m)?;
                    (m, a)
                }
                _ => (Tensor::full(&[g, t_len], 1.0), broadcast_advantages(&advantages.values, t_len)),
            };
            let klw = match (&sim, cfg.reweight_kl) {
                (Some(s), true) => kl_weights(s, cfg.beta, cfg.kl_clip)?,
                _ => Tensor::full(&[g, t_len], cfg.beta),
            };
            (sim, mask, adv, klw)
        };
        Ok(Self {
            prompt: rollouts[0].prompt.clone(),
            rollouts,
            rewards,
            advantages,
            similarity,
            mask,
            reweighted,
            kl_weights,
        })
    }

    pub fn size(&self) -> usize {
        self.rollouts.len()
    }

    pub fn skipped(&self) -> bool {
        self.advantages.zero_std
    }
}

/// Per-rollout contribution to the minimized loss, recorded on `tape`.
///
/// `loss_i = -(J_i / G) + [entropy ablation] lambda / G * (H_ref - H_theta)^2`,
/// further scaled by `scale` (e.g. `1 / batch_size`).
#[allow(clippy::too_many_arguments)]
pub fn rollout_loss(
    tape: &mut Tape,
    pv: &ParamVars,
    group: &Group,
    i: usize,
    ref_log: &[Vec<f64>],
    ref_entropy: f64,
    entropy_loss_lambda: Option<f64>,
    eps: f64,
    scale: f64,
) -> Result<(Var, ObjectiveStats, f64)> {
    let r = &group.rollouts[i];
    let cond = pv.dims().encoder().encode(&r.prompt)?;
    let rows = pv.sequence_log_probs(tape, &cond, &r.tokens)?;
    let picked: Vec<Var> = rows.iter().zip(&r.tokens).map(|(&row, &t)| tape.gather(row, vec![t])).collect();
    let logp_new = tape.concat(&picked);
    let (kl, floored) = kl_on_tape(tape, &rows, ref_log)?;
    let (j, mut stats) = rollout_objective(
        tape,
        logp_new,
        &r.logp_old,
        group.reweighted.row(i),
        group.kl_weights.row(i),
        kl,
        eps,
    )?;
    stats.kl_floored = floored;
    let g = group.size() as f64;
    let mut loss = tape.scale(j, -1.0 / g);
    let h_theta = sequence_entropy_on_tape(tape, &rows);
    let h_value = tape.item(h_theta);
    if let Some(lambda) = entropy_loss_lambda {
        let h_ref = tape.scalar(ref_entropy);
        let dh = tape.sub(h_ref, h_theta);
        let sq = tape.square(dh);
        let pen = tape.scale(sq, lambda / g);
        loss = tape.add(loss, pen);
    }
    let loss = tape.scale(loss, scale);
    Ok((loss, stats, h_value))
}
