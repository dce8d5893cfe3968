//! Supervised maximum-likelihood training that produces the reference policy.

use crate::error::{Error, Result};
use crate::numerics::{Adam, Tape, Var};

use super::model::PolicyParams;
use super::prompt::PromptSpec;

/// Mean per-token negative log-likelihood of `target` and its gradient.
pub fn nll_and_grad(params: &PolicyParams, prompt: &PromptSpec, target: &[usize]) -> Result<(f64, Vec<Vec<f64>>)> {
    let dims = params.dims();
    if target.len() != dims.seq_len() {
        return Err(Error::arg(format!("target has {} tokens, expected {}", target.len(), dims.seq_len())));
    }
    let cond = dims.encoder().encode(prompt)?;
    let mut tape = Tape::new();
    let pv = params.record(&mut tape, true);
    let rows = pv.sequence_log_probs(&mut tape, &cond, target)?;
    let picked: Vec<Var> = rows.iter().zip(target).map(|(&r, &t)| tape.gather(r, vec![t])).collect();
    let all = tape.concat(&picked);
    let mean = tape.mean(all);
    let loss = tape.neg(mean);
    let value = tape.item(loss);
    let g = tape.backward(loss)?;
    Ok((value, pv.vars().iter().map(|&v| g.get(v)).collect()))
}

/// One Adam step on the mean NLL of `batch`. Returns the pre-step loss.
pub fn pretrain_step(params: &mut PolicyParams, adam: &mut Adam, batch: &[(PromptSpec, Vec<usize>)]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::arg("empty pretraining batch"));
    }
    let mut total = 0.0;
    let mut grads: Vec<Vec<f64>> = params.sizes().iter().map(|&n| vec![0.0; n]).collect();
    let k = 1.0 / batch.len() as f64;
    for (prompt, target) in batch {
        let (loss, g) = nll_and_grad(params, prompt, target)?;
        total += loss;
        for (acc, gi) in grads.iter_mut().zip(g) {
            acc.iter_mut().zip(gi).for_each(|(a, b)| *a += k * b);
        }
    }
    let loss = total * k;
    if !loss.is_finite() {
        return Err(Error::Numerical(format!("pretraining loss {loss}")));
    }
    adam.step(&mut params.buffers_mut(), &grads);
    Ok(loss)
}
