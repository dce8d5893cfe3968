use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::tensor::check_temperature;
use crate::numerics::{entropy_from_log_probs, log_softmax, softmax, Rng, Tape};

use super::model::PolicyParams;
use super::prompt::PromptSpec;

/// How tokens are drawn from the per-step distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingOptions {
    pub temperature: f64,
    /// Argmax decoding (the zero-temperature limit).
    pub greedy: bool,
    /// Classifier-free guidance scale applied to sampling logits only:
    /// `u + s (c - u)` with `u` the logits under an all-zero prompt.
    pub cfg_scale: Option<f64>,
}

impl SamplingOptions {
    pub fn at(temperature: f64) -> Self {
        Self {
            temperature,
            greedy: false,
            cfg_scale: None,
        }
    }

    pub fn greedy() -> Self {
        Self {
            temperature: 1.0,
            greedy: true,
            cfg_scale: None,
        }
    }
}

impl Default for SamplingOptions {
    fn default() -> Self {
        Self::at(1.0)
    }
}

/// A sampled token grid with per-token statistics of the policy snapshot
/// that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub prompt: PromptSpec,
    pub tokens: Vec<usize>,
    /// `log pi_old(o_t | o_<t; c)` from the temperature-1 distribution.
    pub logp_old: Vec<f64>,
    /// Entropy of the temperature-1 distribution at each position.
    pub entropy_old: Vec<f64>,
    /// Entropy of the distribution actually sampled from.
    pub sampling_entropy: Vec<f64>,
    pub temperature: f64,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Draws `T` tokens autoregressively from `params`.
pub fn sample_rollout(params: &PolicyParams, prompt: &PromptSpec, opts: &SamplingOptions, rng: &mut Rng) -> Result<Rollout> {
    if !opts.greedy {
        check_temperature(opts.temperature)?;
    }
    let dims = params.dims();
    let cond = dims.encoder().encode(prompt)?;
    let t_len = dims.seq_len();

    let mut tape = Tape::new();
    let pv = params.record(&mut tape, false);
    let mut cur = pv.start(&mut tape, &cond);
    let mut uncond = opts.cfg_scale.map(|_| {
        let zero = vec![0.0; cond.len()];
        pv.start(&mut tape, &zero)
    });

    let mut out = Rollout {
        prompt: prompt.clone(),
        tokens: Vec::with_capacity(t_len),
        logp_old: Vec::with_capacity(t_len),
        entropy_old: Vec::with_capacity(t_len),
        sampling_entropy: Vec::with_capacity(t_len),
        temperature: if opts.greedy { 0.0 } else { opts.temperature },
    };
    let mut prev = None;
    for t in 0..t_len {
        let logits_var = pv.step(&mut tape, &mut cur, prev)?;
        let logits = tape.value(logits_var).to_vec();
        if logits.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical(format!("non-finite logits at position {t}")));
        }
        let lp = tape.log_softmax(logits_var);
        let lp = tape.value(lp).to_vec();

        let sample_logits = match (opts.cfg_scale, uncond.as_mut()) {
            (Some(s), Some(u)) => {
                let ul = pv.step(&mut tape, u, prev)?;
                tape.value(ul).iter().zip(&logits).map(|(&u, &c)| u + s * (c - u)).collect()
            }
            _ => logits,
        };

        let (tok, h_sample) = if opts.greedy {
            let tok = argmax(&sample_logits);
            (tok, 0.0)
        } else {
            let probs = softmax(&sample_logits, opts.temperature)?;
            let tok = rng.categorical(&probs);
            let h = if opts.temperature == 1.0 && opts.cfg_scale.is_none() {
                entropy_from_log_probs(&lp)
            } else {
                entropy_from_log_probs(&log_softmax(&sample_logits.iter().map(|x| x / opts.temperature).collect::<Vec<_>>()))
            };
            (tok, h)
        };
        out.tokens.push(tok);
        out.logp_old.push(lp[tok]);
        out.entropy_old.push(entropy_from_log_probs(&lp));
        out.sampling_entropy.push(h_sample);
        prev = Some(tok);
    }
    Ok(out)
}

fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

/// Full teacher-forced distributions of `params` along a token sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherForced {
    /// `log pi(o_t | o_<t; c)`.
    pub logp: Vec<f64>,
    pub entropy: Vec<f64>,
    /// Log-probabilities over the whole vocabulary, one row per position.
    pub log_dists: Vec<Vec<f64>>,
}

impl TeacherForced {
    pub fn mean_entropy(&self) -> f64 {
        mean(&self.entropy)
    }
}

pub fn teacher_forced(params: &PolicyParams, prompt: &PromptSpec, tokens: &[usize]) -> Result<TeacherForced> {
    let dims = params.dims();
    if tokens.len() != dims.seq_len() {
        return Err(Error::arg(format!("{} tokens, expected T={}", tokens.len(), dims.seq_len())));
    }
    let cond = dims.encoder().encode(prompt)?;
    let mut tape = Tape::new();
    let pv = params.record(&mut tape, false);
    let rows = pv.sequence_log_probs(&mut tape, &cond, tokens)?;
    let log_dists: Vec<Vec<f64>> = rows.iter().map(|&r| tape.value(r).to_vec()).collect();
    Ok(TeacherForced {
        logp: log_dists.iter().zip(tokens).map(|(d, &t)| d[t]).collect(),
        entropy: log_dists.iter().map(|d| entropy_from_log_probs(d)).collect(),
        log_dists,
    })
}

/// `log pi_theta(o_t | o_<t; c)` for every position of `r`.
pub fn teacher_forced_logprobs(params: &PolicyParams, r: &Rollout) -> Result<Vec<f64>> {
    Ok(teacher_forced(params, &r.prompt, &r.tokens)?.logp)
}

/// Per-position entropy of the temperature-1 distribution along `r`.
pub fn token_entropies(params: &PolicyParams, r: &Rollout) -> Result<Vec<f64>> {
    Ok(teacher_forced(params, &r.prompt, &r.tokens)?.entropy)
}

/// Mean of [`token_entropies`].
pub fn sequence_entropy(params: &PolicyParams, r: &Rollout) -> Result<f64> {
    Ok(mean(&token_entropies(params, r)?))
}

pub(crate) fn mean(x: &[f64]) -> f64 {
    if x.is_empty() {
        0.0
    } else {
        x.iter().sum::<f64>() / x.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::GridShape;
    use crate::numerics::Tensor;
    use crate::policy::model::{PolicyDims, PARAM_NAMES};

    fn policy(seed: u64) -> PolicyParams {
        PolicyParams::init(PolicyDims::new(64, 8, GridShape::default()), seed).unwrap()
    }

    /// Output layer zeroed: every step is uniform over V.
    fn uniform_policy() -> PolicyParams {
        let p = policy(0);
        let tensors = p
            .tensors()
            .iter()
            .enumerate()
            .map(|(i, t)| if PARAM_NAMES[i].starts_with("out_") { Tensor::zeros(t.shape()) } else { t.clone() })
            .collect();
        PolicyParams::from_tensors(*p.dims(), tensors).unwrap()
    }

    fn prompt() -> PromptSpec {
        PromptSpec::Counting { category: 3, count: 5 }
    }

    #[test]
    fn same_seed_same_rollout() {
        let p = policy(1);
        let a = sample_rollout(&p, &prompt(), &SamplingOptions::default(), &mut Rng::new(9)).unwrap();
        let b = sample_rollout(&p, &prompt(), &SamplingOptions::default(), &mut Rng::new(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 64);
        assert!(a.logp_old.iter().all(|&l| l <= 0.0));
    }

    #[test]
    fn greedy_ignores_rng() {
        let p = policy(1);
        let a = sample_rollout(&p, &prompt(), &SamplingOptions::greedy(), &mut Rng::new(1)).unwrap();
        let b = sample_rollout(&p, &prompt(), &SamplingOptions::greedy(), &mut Rng::new(2)).unwrap();
        assert_eq!(a.tokens, b.tokens);
    }

    #[test]
    fn teacher_forcing_reproduces_sampling_log_probs() {
        let p = policy(2);
        for temp in [0.5, 1.0, 1.7] {
            let r = sample_rollout(&p, &prompt(), &SamplingOptions::at(temp), &mut Rng::new(4)).unwrap();
            let lp = teacher_forced_logprobs(&p, &r).unwrap();
            for (a, b) in lp.iter().zip(&r.logp_old) {
                assert!((a - b).abs() <= 1e-12);
            }
            let tf = teacher_forced(&p, &r.prompt, &r.tokens).unwrap();
            for d in &tf.log_dists {
                let s: f64 = d.iter().map(|x| x.exp()).sum();
                assert!((s - 1.0).abs() < 1e-10);
            }
            assert!(lp.iter().all(|&l| l.exp() > 0.0 && l.exp() <= 1.0));
        }
    }

    #[test]
    fn uniform_policy_values() {
        let p = uniform_policy();
        let r = sample_rollout(&p, &prompt(), &SamplingOptions::default(), &mut Rng::new(3)).unwrap();
        let ln_v = 64f64.ln();
        for l in teacher_forced_logprobs(&p, &r).unwrap() {
            assert!((l + ln_v).abs() < 1e-12);
        }
        for h in token_entropies(&p, &r).unwrap() {
            assert!((h - 4.158_883_083_359_672).abs() < 1e-12);
        }
        assert!((sequence_entropy(&p, &r).unwrap() - ln_v).abs() < 1e-12);
    }

    #[test]
    fn entropy_bounds_and_mean() {
        let p = policy(5);
        let r = sample_rollout(&p, &prompt(), &SamplingOptions::default(), &mut Rng::new(8)).unwrap();
        let h = token_entropies(&p, &r).unwrap();
        assert!(h.iter().all(|&x| (0.0..=64f64.ln() + 1e-12).contains(&x)));
        let oracle = h.iter().sum::<f64>() / h.len() as f64;
        assert!((sequence_entropy(&p, &r).unwrap() - oracle).abs() < 1e-12);
        assert_eq!(r.entropy_old, h);
    }

    #[test]
    fn rejects_bad_temperature() {
        let p = policy(1);
        assert!(sample_rollout(&p, &prompt(), &SamplingOptions::at(0.0), &mut Rng::new(1)).is_err());
    }

    #[test]
    fn cfg_changes_only_sampling_distribution() {
        let p = policy(6);
        let opts = SamplingOptions {
            cfg_scale: Some(5.0),
            ..Default::default()
        };
        let r = sample_rollout(&p, &prompt(), &opts, &mut Rng::new(2)).unwrap();
        let lp = teacher_forced_logprobs(&p, &r).unwrap();
        assert_eq!(lp, r.logp_old);
    }
}
