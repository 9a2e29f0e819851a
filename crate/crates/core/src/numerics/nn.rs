//! Linear, MLP and LSTM building blocks on top of the tape.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{glorot, Bound, ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// `y = x W + b` with `W: in x out`, `b: 1 x out`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), glorot(rng, in_dim, out_dim))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[1, out_dim]))?;
        Ok(Self { weight, bias, in_dim, out_dim })
    }

    /// A layer whose weight and bias start at exactly zero.
    pub fn zeroed(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros(&[in_dim, out_dim]))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[1, out_dim]))?;
        Ok(Self { weight, bias, in_dim, out_dim })
    }

    pub fn forward(&self, p: &Bound<'_>, x: Var) -> Result<Var> {
        let t = p.tape;
        let xw = t.matmul(x, p.p(self.weight))?;
        t.add_row(xw, p.p(self.bias))
    }
}

/// Two-layer perceptron `W2 tanh(W1 x + b1) + b2`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            hidden: Linear::new(store, &format!("{name}.0"), in_dim, hidden, rng)?,
            out: Linear::new(store, &format!("{name}.1"), hidden, out_dim, rng)?,
        })
    }

    /// Random first layer, zero output layer: the map starts at exactly zero
    /// but still receives gradients.
    pub fn zero_output<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            hidden: Linear::new(store, &format!("{name}.0"), in_dim, hidden, rng)?,
            out: Linear::zeroed(store, &format!("{name}.1"), hidden, out_dim)?,
        })
    }

    pub fn forward(&self, p: &Bound<'_>, x: Var) -> Result<Var> {
        let h = self.hidden.forward(p, x)?;
        let h = p.tape.tanh(h)?;
        self.out.forward(p, h)
    }

    pub fn in_dim(&self) -> usize {
        self.hidden.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out.out_dim
    }
}

/// LSTM cell parameters.
///
/// Weights are stored input-major (`w_ih: in x 4h`, `w_hh: h x 4h`) so a batch
/// of row vectors multiplies from the left. The `4h` gate columns are laid out
/// as input | forget | cell | output.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LstmCellParams {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub hidden: usize,
}

impl LstmCellParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w_ih = store.add(format!("{name}.w_ih"), glorot(rng, in_dim, 4 * hidden))?;
        let w_hh = store.add(format!("{name}.w_hh"), glorot(rng, hidden, 4 * hidden))?;
        let mut b = Tensor::zeros(&[1, 4 * hidden]);
        // forget gate starts open
        for v in &mut b.data_mut()[hidden..2 * hidden] {
            *v = 1.0;
        }
        let bias = store.add(format!("{name}.bias"), b)?;
        Ok(Self { w_ih, w_hh, bias, in_dim, hidden })
    }
}

/// One LSTM step for a batch of rows: `x: N x in`, `h, c: N x hidden`.
pub fn lstm_cell(p: &Bound<'_>, cell: &LstmCellParams, x: Var, h_prev: Var, c_prev: Var) -> Result<(Var, Var)> {
    let t = p.tape;
    let (n, in_dim) = t.shape(x);
    if in_dim != cell.in_dim || t.shape(h_prev) != (n, cell.hidden) || t.shape(c_prev) != (n, cell.hidden) {
        return Err(Error::shape(
            "lstm_cell",
            format!(
                "x {:?}, h {:?}, c {:?} for cell {}->{}",
                t.shape(x),
                t.shape(h_prev),
                t.shape(c_prev),
                cell.in_dim,
                cell.hidden
            ),
        ));
    }
    let hd = cell.hidden;
    let xi = t.matmul(x, p.p(cell.w_ih))?;
    let hh = t.matmul(h_prev, p.p(cell.w_hh))?;
    let pre = t.add(xi, hh)?;
    let pre = t.add_row(pre, p.p(cell.bias))?;
    let i = t.sigmoid(t.slice_cols(pre, 0, hd)?)?;
    let f = t.sigmoid(t.slice_cols(pre, hd, hd)?)?;
    let g = t.tanh(t.slice_cols(pre, 2 * hd, hd)?)?;
    let o = t.sigmoid(t.slice_cols(pre, 3 * hd, hd)?)?;
    let c = t.add(t.mul(f, c_prev)?, t.mul(i, g)?)?;
    let h = t.mul(o, t.tanh(c)?)?;
    Ok((h, c))
}

/// Unrolls a cell over `steps` (each `N x in`), starting from zero state.
/// Returns the hidden state after every step.
pub fn lstm_unroll(p: &Bound<'_>, cell: &LstmCellParams, steps: &[Var]) -> Result<Vec<Var>> {
    let t = p.tape;
    let first = steps.first().ok_or_else(|| Error::invalid("empty sequence"))?;
    let n = t.shape(*first).0;
    let mut h = t.constant(Tensor::zeros(&[n, cell.hidden]));
    let mut c = t.constant(Tensor::zeros(&[n, cell.hidden]));
    let mut out = Vec::with_capacity(steps.len());
    for &x in steps {
        let (h2, c2) = lstm_cell(p, cell, x, h, c)?;
        h = h2;
        c = c2;
        out.push(h);
    }
    Ok(out)
}

/// Output of a bidirectional pass over a batch of sequences.
pub struct BiLstmOutput {
    /// `[h_fwd_t | h_bwd_t]` per step, each `N x 2h`.
    pub per_step: Vec<Var>,
    /// Final forward state (after step T), `N x h`.
    pub last_fwd: Var,
    /// Final backward state (after consuming step 1), `N x h`.
    pub last_bwd: Var,
}

/// Bidirectional LSTM over `steps` (each `N x in`).
pub fn bilstm_forward(
    p: &Bound<'_>,
    fwd: &LstmCellParams,
    bwd: &LstmCellParams,
    steps: &[Var],
) -> Result<BiLstmOutput> {
    if steps.is_empty() {
        return Err(Error::invalid("bilstm over an empty sequence"));
    }
    let t = p.tape;
    let hf = lstm_unroll(p, fwd, steps)?;
    let reversed: Vec<Var> = steps.iter().rev().copied().collect();
    let mut hb = lstm_unroll(p, bwd, &reversed)?;
    hb.reverse();
    let per_step = hf
        .iter()
        .zip(&hb)
        .map(|(&a, &b)| t.hcat(&[a, b]))
        .collect::<Result<Vec<_>>>()?;
    Ok(BiLstmOutput { per_step, last_fwd: *hf.last().unwrap(), last_bwd: hb[0] })
}

/// Bidirectional LSTM over a single `T x in` sequence, returning `T x 2h`.
pub fn bilstm_sequence(p: &Bound<'_>, fwd: &LstmCellParams, bwd: &LstmCellParams, seq: Var) -> Result<Var> {
    let t = p.tape;
    let (len, _) = t.shape(seq);
    if len == 0 {
        return Err(Error::invalid("bilstm over an empty sequence"));
    }
    let steps = (0..len).map(|i| t.select_rows(seq, &[i])).collect::<Result<Vec<_>>>()?;
    let out = bilstm_forward(p, fwd, bwd, &steps)?;
    t.vcat(&out.per_step)
}

/// Rows of `a` scaled to unit Euclidean norm. A zero row is an error naming its index.
pub fn l2_normalize_rows(t: &Tape, a: Var, op: &'static str) -> Result<Var> {
    let sq = t.sum_cols(t.square(a)?)?;
    if let Some(row) = t.value(sq).data().iter().position(|&v| v == 0.0) {
        return Err(Error::ZeroNorm { op, row });
    }
    let inv = t.recip(t.sqrt(sq)?)?;
    t.mul_col(a, inv)
}

/// `out[i][j] = cos(a_i, b_j)`.
pub fn cosine_matrix(t: &Tape, a: Var, b: Var, op: &'static str) -> Result<Var> {
    let an = l2_normalize_rows(t, a, op)?;
    let bn = if a == b { an } else { l2_normalize_rows(t, b, op)? };
    t.matmul(an, t.transpose(bn)?)
}

/// Row-wise cosine `out[i] = cos(a_i, b_i)` as an `N x 1` column.
pub fn cosine_rows(t: &Tape, a: Var, b: Var, op: &'static str) -> Result<Var> {
    let an = l2_normalize_rows(t, a, op)?;
    let bn = l2_normalize_rows(t, b, op)?;
    t.sum_cols(t.mul(an, bn)?)
}
