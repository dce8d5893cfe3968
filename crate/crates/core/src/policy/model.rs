//! Gated recurrent autoregressive policy over grid tokens.
//!
//! ```text
//! p      = tanh(W_c c + b_c)                      prompt encoding, once per sequence
//! x_t    = [p ; E[o_{t-1}] ; pos(t)]               E[o_{-1}] is absent at t = 0
//! gates  = W_x x_t + b_x ,  rec = U h + b_h        (3D each: update | reset | candidate)
//! z, r   = sigmoid(gates_z + rec_z), sigmoid(gates_r + rec_r)
//! n      = tanh(gates_n + r * rec_n)
//! h'     = n + z * (h - n)                         h starts at the learned h0
//! logits = W_o h' + b_o
//! ```
//!
//! `W_x` is stored split by input block so the prompt term is computed once
//! per sequence.

use serde::{Deserialize, Serialize};

use crate::codebook::GridShape;
use crate::error::{Error, Result};
use crate::numerics::{Rng, Tape, Tensor, Var};

use super::prompt::PromptEncoder;

/// Architecture sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyDims {
    pub vocab: usize,
    pub categories: usize,
    pub grid: GridShape,
    pub hidden: usize,
    pub token_dim: usize,
    pub pos_dim: usize,
}

impl PolicyDims {
    pub fn new(vocab: usize, categories: usize, grid: GridShape) -> Self {
        Self {
            vocab,
            categories,
            grid,
            hidden: 64,
            token_dim: 16,
            pos_dim: 8,
        }
    }

    pub fn seq_len(&self) -> usize {
        self.grid.len()
    }

    pub fn encoder(&self) -> PromptEncoder {
        PromptEncoder::new(self.categories, self.grid)
    }

    pub fn feature_dim(&self) -> usize {
        self.encoder().width()
    }
}

/// Parameter tensors in checkpoint order.
pub const PARAM_NAMES: [&str; 12] = [
    "prompt_w", "prompt_b", "token_emb", "h0", "in_prompt_w", "in_token_w", "in_pos_w", "in_b", "rec_w", "rec_b",
    "out_w", "out_b",
];

const PROMPT_W: usize = 0;
const PROMPT_B: usize = 1;
const TOKEN_EMB: usize = 2;
const H0: usize = 3;
const IN_PROMPT_W: usize = 4;
const IN_TOKEN_W: usize = 5;
const IN_POS_W: usize = 6;
const IN_B: usize = 7;
const REC_W: usize = 8;
const REC_B: usize = 9;
const OUT_W: usize = 10;
const OUT_B: usize = 11;

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    dims: PolicyDims,
    tensors: Vec<Tensor>,
}

impl PolicyParams {
    pub fn shapes(d: &PolicyDims) -> Vec<Vec<usize>> {
        let (h, f, e, p, v) = (d.hidden, d.feature_dim(), d.token_dim, d.pos_dim, d.vocab);
        vec![
            vec![h, f],
            vec![h],
            vec![v, e],
            vec![h],
            vec![3 * h, h],
            vec![3 * h, e],
            vec![3 * h, p],
            vec![3 * h],
            vec![3 * h, h],
            vec![3 * h],
            vec![v, h],
            vec![v],
        ]
    }

    /// Seeded initialization: weights `N(0, 1/fan_in)`, biases zero.
    pub fn init(dims: PolicyDims, seed: u64) -> Result<Self> {
        if !dims.pos_dim.is_multiple_of(2) {
            return Err(Error::arg("pos_dim must be even"));
        }
        if dims.vocab == 0 || dims.hidden == 0 || dims.grid.is_empty() {
            return Err(Error::arg("policy dimensions must be positive"));
        }
        let mut rng = Rng::derive(seed, &[0x1417]);
        let tensors = Self::shapes(&dims)
            .into_iter()
            .map(|shape| {
                let n: usize = shape.iter().product();
                let data = if shape.len() == 2 {
                    let scale = 1.0 / (shape[1] as f64).sqrt();
                    (0..n).map(|_| scale * rng.normal()).collect()
                } else {
                    vec![0.0; n]
                };
                Tensor::new(shape, data).expect("shape matches")
            })
            .collect();
        Ok(Self { dims, tensors })
    }

    /// Assembles parameters from tensors in [`PARAM_NAMES`] order.
    pub fn from_tensors(dims: PolicyDims, tensors: Vec<Tensor>) -> Result<Self> {
        let shapes = Self::shapes(&dims);
        if tensors.len() != shapes.len() {
            return Err(Error::Format(format!("expected {} tensors, got {}", shapes.len(), tensors.len())));
        }
        for (i, (t, s)) in tensors.iter().zip(&shapes).enumerate() {
            if t.shape() != s.as_slice() {
                return Err(Error::Format(format!("{}: shape {:?}, expected {s:?}", PARAM_NAMES[i], t.shape())));
            }
            if !t.is_finite() {
                return Err(Error::Numerical(format!("{} has non-finite entries", PARAM_NAMES[i])));
            }
        }
        Ok(Self { dims, tensors })
    }

    pub fn dims(&self) -> &PolicyDims {
        &self.dims
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.tensors.iter().map(Tensor::len).collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut [f64]> {
        self.tensors.iter_mut().map(|t| t.data_mut()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// All parameters concatenated in checkpoint order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn from_flat(dims: PolicyDims, flat: &[f64]) -> Result<Self> {
        let mut off = 0;
        let mut tensors = Vec::new();
        for shape in Self::shapes(&dims) {
            let n: usize = shape.iter().product();
            let chunk = flat
                .get(off..off + n)
                .ok_or_else(|| Error::arg("flat parameter vector too short"))?;
            tensors.push(Tensor::new(shape, chunk.to_vec())?);
            off += n;
        }
        if off != flat.len() {
            return Err(Error::arg("flat parameter vector too long"));
        }
        Self::from_tensors(dims, tensors)
    }

    /// Records every tensor on `tape`, trainable iff `trainable`.
    pub fn record(&self, tape: &mut Tape, trainable: bool) -> ParamVars {
        let vars = self
            .tensors
            .iter()
            .map(|t| if trainable { tape.param(t) } else { tape.leaf(t) })
            .collect();
        ParamVars { dims: self.dims, vars }
    }

    /// Carves the parameter tensors out of one flat tape value (used by
    /// gradient checks over the whole parameter vector).
    pub fn record_from_flat(dims: PolicyDims, tape: &mut Tape, flat: Var) -> ParamVars {
        let mut off = 0;
        let vars = Self::shapes(&dims)
            .into_iter()
            .map(|shape| {
                let n: usize = shape.iter().product();
                let s = tape.slice(flat, off, n);
                off += n;
                if shape.len() == 2 {
                    tape.reshape(s, shape)
                } else {
                    s
                }
            })
            .collect();
        ParamVars { dims, vars }
    }
}

/// Sinusoidal position code with geometric periods `T, T/2, T/4, ...`.
pub fn position_code(t: usize, seq_len: usize, pos_dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(pos_dim);
    for i in 0..pos_dim / 2 {
        let period = seq_len as f64 / (1u64 << i) as f64;
        let angle = std::f64::consts::TAU * t as f64 / period;
        out.push(angle.sin());
        out.push(angle.cos());
    }
    out
}

/// Parameters as recorded on a particular tape.
#[derive(Debug, Clone)]
pub struct ParamVars {
    dims: PolicyDims,
    vars: Vec<Var>,
}

impl ParamVars {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn dims(&self) -> &PolicyDims {
        &self.dims
    }

    /// Starts a sequence for conditioning vector `cond`.
    pub fn start(&self, tape: &mut Tape, cond: &[f64]) -> Cursor {
        let v = &self.vars;
        let c = tape.constant_vec(cond.to_vec());
        let pc = tape.matmul(v[PROMPT_W], c);
        let pc = tape.add(pc, v[PROMPT_B]);
        let pe = tape.tanh(pc);
        let gx = tape.matmul(v[IN_PROMPT_W], pe);
        let gx = tape.add(gx, v[IN_B]);
        Cursor {
            hidden: v[H0],
            prompt_gates: gx,
            pos: 0,
        }
    }

    /// Consumes the previous token (none at the first position) and returns
    /// the logits for the token at the cursor's position.
    pub fn step(&self, tape: &mut Tape, cur: &mut Cursor, prev: Option<usize>) -> Result<Var> {
        let d = &self.dims;
        let t_len = d.seq_len();
        if cur.pos >= t_len {
            return Err(Error::arg(format!("prefix of length {} leaves no position in T={t_len}", cur.pos)));
        }
        let v = &self.vars;
        let hd = d.hidden;

        let mut gates = cur.prompt_gates;
        if let Some(tok) = prev {
            if tok >= d.vocab {
                return Err(Error::arg(format!("token {tok} outside vocab {}", d.vocab)));
            }
            let e = tape.row(v[TOKEN_EMB], tok);
            let ge = tape.matmul(v[IN_TOKEN_W], e);
            gates = tape.add(gates, ge);
        }
        let pos = tape.constant_vec(position_code(cur.pos, t_len, d.pos_dim));
        let gp = tape.matmul(v[IN_POS_W], pos);
        gates = tape.add(gates, gp);

        let rec = tape.matmul(v[REC_W], cur.hidden);
        let rec = tape.add(rec, v[REC_B]);

        let gz = tape.slice(gates, 0, hd);
        let rz = tape.slice(rec, 0, hd);
        let z = tape.add(gz, rz);
        let z = tape.sigmoid(z);

        let gr = tape.slice(gates, hd, hd);
        let rr = tape.slice(rec, hd, hd);
        let r = tape.add(gr, rr);
        let r = tape.sigmoid(r);

        let gn = tape.slice(gates, 2 * hd, hd);
        let rn = tape.slice(rec, 2 * hd, hd);
        let rn = tape.mul(r, rn);
        let n = tape.add(gn, rn);
        let n = tape.tanh(n);

        let diff = tape.sub(cur.hidden, n);
        let zd = tape.mul(z, diff);
        let h = tape.add(n, zd);

        let logits = tape.matmul(v[OUT_W], h);
        let logits = tape.add(logits, v[OUT_B]);
        cur.hidden = h;
        cur.pos += 1;
        Ok(logits)
    }

    /// Per-position log-softmax rows for a teacher-forced token sequence.
    pub fn sequence_log_probs(&self, tape: &mut Tape, cond: &[f64], tokens: &[usize]) -> Result<Vec<Var>> {
        let mut cur = self.start(tape, cond);
        let mut out = Vec::with_capacity(tokens.len());
        let mut prev = None;
        for &tok in tokens {
            let logits = self.step(tape, &mut cur, prev)?;
            out.push(tape.log_softmax(logits));
            prev = Some(tok);
        }
        Ok(out)
    }
}

/// Recurrent state between [`ParamVars::step`] calls.
#[derive(Debug, Clone, Copy)]
pub struct Cursor {
    hidden: Var,
    prompt_gates: Var,
    pos: usize,
}

impl Cursor {
    pub fn position(&self) -> usize {
        self.pos
    }
}

/// Logits for the next token after `prefix` under conditioning `cond`.
pub fn forward_logits(params: &PolicyParams, cond: &[f64], prefix: &[usize]) -> Result<Vec<f64>> {
    let d = params.dims();
    if prefix.len() >= d.seq_len() {
        return Err(Error::arg(format!("prefix length {} must be below T={}", prefix.len(), d.seq_len())));
    }
    if cond.len() != d.feature_dim() {
        return Err(Error::arg(format!("conditioning width {} != {}", cond.len(), d.feature_dim())));
    }
    let mut tape = Tape::new();
    let pv = params.record(&mut tape, false);
    let mut cur = pv.start(&mut tape, cond);
    let mut prev = None;
    for &tok in prefix {
        pv.step(&mut tape, &mut cur, prev)?;
        prev = Some(tok);
    }
    let logits = pv.step(&mut tape, &mut cur, prev)?;
    Ok(tape.value(logits).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_check;
    use crate::policy::prompt::PromptSpec;

    fn small() -> PolicyDims {
        PolicyDims {
            hidden: 6,
            token_dim: 3,
            pos_dim: 4,
            ..PolicyDims::new(8, 2, GridShape::new(2, 3))
        }
    }

    fn cond(d: &PolicyDims) -> Vec<f64> {
        d.encoder().encode(&PromptSpec::Counting { category: 1, count: 2 }).unwrap()
    }

    #[test]
    fn empty_prefix_and_determinism() {
        let d = small();
        let p = PolicyParams::init(d, 1).unwrap();
        let a = forward_logits(&p, &cond(&d), &[]).unwrap();
        assert_eq!(a.len(), 8);
        assert!(a.iter().all(|x| x.is_finite()));
        assert_eq!(a, forward_logits(&p, &cond(&d), &[]).unwrap());
        assert_eq!(
            forward_logits(&p, &cond(&d), &[1, 2]).unwrap(),
            forward_logits(&p, &cond(&d), &[1, 2]).unwrap()
        );
    }

    #[test]
    fn prefix_too_long() {
        let d = small();
        let p = PolicyParams::init(d, 1).unwrap();
        assert!(forward_logits(&p, &cond(&d), &[0; 5]).is_ok());
        assert!(matches!(forward_logits(&p, &cond(&d), &[0; 6]), Err(Error::Argument(_))));
    }

    #[test]
    fn logits_ignore_future_tokens() {
        let d = small();
        let p = PolicyParams::init(d, 2).unwrap();
        let mut tape = Tape::new();
        let pv = p.record(&mut tape, false);
        let a = pv.sequence_log_probs(&mut tape, &cond(&d), &[1, 2, 3, 4, 5, 6]).unwrap();
        let b = pv.sequence_log_probs(&mut tape, &cond(&d), &[1, 2, 3, 7, 0, 0]).unwrap();
        // Positions 0..=3 see only tokens before them.
        for t in 0..4 {
            assert_eq!(tape.value(a[t]), tape.value(b[t]));
        }
        assert_ne!(tape.value(a[4]), tape.value(b[4]));
    }

    #[test]
    fn flat_round_trip() {
        let d = small();
        let p = PolicyParams::init(d, 3).unwrap();
        let q = PolicyParams::from_flat(d, &p.flatten()).unwrap();
        assert_eq!(p, q);
        assert!(PolicyParams::from_flat(d, &p.flatten()[1..]).is_err());
    }

    #[test]
    fn param_count_is_deterministic() {
        let d = PolicyDims::new(64, 8, GridShape::default());
        let p = PolicyParams::init(d, 0).unwrap();
        let (h, f) = (64, 99);
        let expected = h * f + h + 64 * 16 + h + 3 * h * h + 3 * h * 16 + 3 * h * 8 + 3 * h + 3 * h * h + 3 * h + 64 * h + 64;
        assert_eq!(p.num_params(), expected);
    }

    #[test]
    fn nll_gradient_matches_finite_differences() {
        let d = small();
        let p = PolicyParams::init(d, 4).unwrap();
        let c = cond(&d);
        let tokens = [3usize, 0, 7, 7, 1, 2];
        let x = Tensor::vector(p.flatten());
        let err = finite_diff_check(
            |tape, flat| {
                let pv = PolicyParams::record_from_flat(d, tape, flat);
                let rows = pv.sequence_log_probs(tape, &c, &tokens)?;
                let picked: Vec<Var> = rows.iter().zip(&tokens).map(|(&r, &t)| tape.gather(r, vec![t])).collect();
                let all = tape.concat(&picked);
                let s = tape.mean(all);
                Ok(tape.neg(s))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "max rel err {err}");
    }
}
