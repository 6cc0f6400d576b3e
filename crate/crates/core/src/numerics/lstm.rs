//! Single-layer bidirectional LSTM built from graph operations.
//!
//! Gate layout in the fused `4h` columns is `[input, forget, cell, output]`.

use rand::Rng;

use super::graph::{Graph, Var};
use super::init;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams {
    /// `e × 4h`
    pub w_input: Tensor,
    /// `h × 4h`
    pub w_hidden: Tensor,
    /// `4h`
    pub bias: Tensor,
}

impl LstmParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w_input: Tensor::zeros(&[input, 4 * hidden]),
            w_hidden: Tensor::zeros(&[hidden, 4 * hidden]),
            bias: Tensor::zeros(&[4 * hidden]),
        }
    }

    /// Uniform(±1/√h) weights; forget-gate bias starts at 1.
    pub fn init(input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut bias = Tensor::zeros(&[4 * hidden]);
        bias.values_mut()[hidden..2 * hidden].fill(1.0);
        Self {
            w_input: init::uniform(&[input, 4 * hidden], bound, rng),
            w_hidden: init::uniform(&[hidden, 4 * hidden], bound, rng),
            bias,
        }
    }

    pub fn input_size(&self) -> usize {
        self.w_input.shape()[0]
    }

    pub fn hidden_size(&self) -> usize {
        self.w_hidden.shape()[0]
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundLstm {
        let bind = |g: &mut Graph, t: &Tensor| if trainable { g.param(t) } else { g.constant(t) };
        BoundLstm {
            w_input: bind(g, &self.w_input),
            w_hidden: bind(g, &self.w_hidden),
            bias: bind(g, &self.bias),
            hidden: self.hidden_size(),
        }
    }

    pub fn collect_grads(&mut self, g: &Graph, b: &BoundLstm) {
        for (t, v) in [
            (&mut self.w_input, b.w_input),
            (&mut self.w_hidden, b.w_hidden),
            (&mut self.bias, b.bias),
        ] {
            if let Some(gr) = g.grad(v) {
                t.accumulate_grad(gr);
            }
        }
    }

    pub fn tensors(&self) -> [&Tensor; 3] {
        [&self.w_input, &self.w_hidden, &self.bias]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 3] {
        [&mut self.w_input, &mut self.w_hidden, &mut self.bias]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLstm {
    pub w_input: Var,
    pub w_hidden: Var,
    pub bias: Var,
    pub hidden: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BiLstmParams {
    pub forward: LstmParams,
    pub backward: LstmParams,
}

impl BiLstmParams {
    pub fn output_size(&self) -> usize {
        2 * self.forward.hidden_size()
    }
}

/// One direction over time-major inputs `xs[t]: B×e`; returns `B×h` states.
pub fn unroll(g: &mut Graph, p: &BoundLstm, xs: &[Var]) -> Result<Vec<Var>> {
    let h = p.hidden;
    let mut state: Option<(Var, Var)> = None;
    let mut out = Vec::with_capacity(xs.len());
    for &x in xs {
        let mut z = g.matmul(x, p.w_input)?;
        if let Some((hp, _)) = state {
            let zh = g.matmul(hp, p.w_hidden)?;
            z = g.add(z, zh)?;
        }
        let z = g.add_bias(z, p.bias)?;
        let i = g.slice_cols(z, 0, h)?;
        let i = g.sigmoid(i);
        let cand = g.slice_cols(z, 2 * h, 3 * h)?;
        let cand = g.tanh(cand);
        let o = g.slice_cols(z, 3 * h, 4 * h)?;
        let o = g.sigmoid(o);
        let mut c = g.mul(i, cand)?;
        if let Some((_, cp)) = state {
            let f = g.slice_cols(z, h, 2 * h)?;
            let f = g.sigmoid(f);
            let keep = g.mul(f, cp)?;
            c = g.add(keep, c)?;
        }
        let tc = g.tanh(c);
        let hn = g.mul(o, tc)?;
        out.push(hn);
        state = Some((hn, c));
    }
    Ok(out)
}

/// Bidirectional encoding of one `T×e` sequence into `T×2h`: row `t` is the
/// forward state after step `t` next to the backward state after reading
/// positions `T-1 ..= t`.
pub fn recurrent_encode(g: &mut Graph, seq: Var, fwd: &BoundLstm, bwd: &BoundLstm) -> Result<Var> {
    let shape = g.shape(seq).to_vec();
    if shape.len() != 2 {
        return Err(Error::dim("recurrent_encode", &shape, &[0, 0]));
    }
    let steps = shape[0];
    if steps == 0 {
        return Err(Error::Input("empty sequence".into()));
    }
    let xs = (0..steps)
        .map(|t| g.gather_rows(seq, &[Some(t)]))
        .collect::<Result<Vec<_>>>()?;
    let rev: Vec<Var> = xs.iter().rev().copied().collect();
    let hf = unroll(g, fwd, &xs)?;
    let mut hb = unroll(g, bwd, &rev)?;
    hb.reverse();
    let hf = g.concat_rows(&hf)?;
    let hb = g.concat_rows(&hb)?;
    g.concat_cols(&[hf, hb])
}

/// Batched bidirectional encoding of token sequences through an embedding
/// table. Returns the `N×2h` state rows ordered by sequence then position,
/// together with each row's sequence index.
pub fn encode_token_batch(
    g: &mut Graph,
    embedding: Var,
    seqs: &[&[usize]],
    fwd: &BoundLstm,
    bwd: &BoundLstm,
) -> Result<(Var, Vec<usize>)> {
    let batch = seqs.len();
    let steps = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
    if batch == 0 || seqs.iter().any(|s| s.is_empty()) {
        return Err(Error::Input("empty sequence".into()));
    }
    let mut xf = Vec::with_capacity(steps);
    let mut xb = Vec::with_capacity(steps);
    for t in 0..steps {
        let idf: Vec<Option<usize>> = seqs.iter().map(|s| s.get(t).copied()).collect();
        let idb: Vec<Option<usize>> = seqs
            .iter()
            .map(|s| (t < s.len()).then(|| s[s.len() - 1 - t]))
            .collect();
        xf.push(g.gather_rows(embedding, &idf)?);
        xb.push(g.gather_rows(embedding, &idb)?);
    }
    let hf = unroll(g, fwd, &xf)?;
    let hb = unroll(g, bwd, &xb)?;
    let hf = g.concat_rows(&hf)?;
    let hb = g.concat_rows(&hb)?;
    let mut rf = Vec::new();
    let mut rb = Vec::new();
    let mut seg = Vec::new();
    for (b, s) in seqs.iter().enumerate() {
        let len = s.len();
        for p in 0..len {
            rf.push(Some(p * batch + b));
            rb.push(Some((len - 1 - p) * batch + b));
            seg.push(b);
        }
    }
    let of = g.gather_rows(hf, &rf)?;
    let ob = g.gather_rows(hb, &rb)?;
    Ok((g.concat_cols(&[of, ob])?, seg))
}
