//! Batched forward and backward passes through the assembly.
//!
//! Activations are row-major `(batch, features)` matrices so every layer is a
//! single GEMM per time step. Gate blocks of both LSTMs are ordered
//! `[input, forget, candidate, output]`.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array3, ArrayBase, Axis, Data, Ix2};

use super::params::{AssemblyParams, Tensor};

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `a · b` into a fresh row-major matrix.
fn matmul<S1, S2>(a: &ArrayBase<S1, Ix2>, b: &ArrayBase<S2, Ix2>) -> Array2<f64>
where
    S1: Data<Elem = f64>,
    S2: Data<Elem = f64>,
{
    let mut out = Array2::zeros((a.nrows(), b.ncols()));
    general_mat_mul(1.0, a, b, 0.0, &mut out);
    out
}

/// `acc += a^T · b`
fn add_at_b<S1, S2>(acc: &mut Array2<f64>, a: &ArrayBase<S1, Ix2>, b: &ArrayBase<S2, Ix2>)
where
    S1: Data<Elem = f64>,
    S2: Data<Elem = f64>,
{
    general_mat_mul(1.0, &a.t(), b, 1.0, acc);
}

fn add_row_sums(acc: &mut Array2<f64>, m: &Array2<f64>) {
    let sums = m.sum_axis(Axis(0));
    acc.row_mut(0).scaled_add(1.0, &sums);
}

fn gather_rows(table: &Array2<f64>, idx: impl Iterator<Item = usize>) -> Array2<f64> {
    let rows: Vec<_> = idx.collect();
    let mut out = Array2::zeros((rows.len(), table.ncols()));
    for (mut dst, &r) in out.outer_iter_mut().zip(&rows) {
        dst.assign(&table.row(r));
    }
    out
}

fn scatter_rows<S: Data<Elem = f64>>(
    table: &mut Array2<f64>,
    idx: impl Iterator<Item = usize>,
    rows: &ArrayBase<S, Ix2>,
) {
    for (r, src) in idx.zip(rows.outer_iter()) {
        table.row_mut(r).scaled_add(1.0, &src);
    }
}

struct LstmCache {
    u: Array2<f64>,
    /// activated gates, `(batch, 4 * hidden)`
    gates: Array2<f64>,
    c_prev: Array2<f64>,
    tanh_c: Array2<f64>,
}

/// One LSTM step on the concatenated input `u = [x | h_prev]`.
/// Returns the cache, the new hidden state and the new cell state.
fn lstm_step(
    u: Array2<f64>,
    w: &Array2<f64>,
    b: &Array2<f64>,
    c_prev: Array2<f64>,
) -> (LstmCache, Array2<f64>, Array2<f64>) {
    let hidden = c_prev.ncols();
    let mut gates = matmul(&u, w);
    gates += b;
    let mut c = Array2::zeros(c_prev.raw_dim());
    let mut tanh_c = Array2::zeros(c_prev.raw_dim());
    let mut h = Array2::zeros(c_prev.raw_dim());
    for r in 0..gates.nrows() {
        let g = gates.row_mut(r).into_slice().unwrap();
        let cp = c_prev.row(r);
        let cr = c.row_mut(r).into_slice().unwrap();
        let tr = tanh_c.row_mut(r).into_slice().unwrap();
        let hr = h.row_mut(r).into_slice().unwrap();
        for k in 0..hidden {
            let i = sigmoid(g[k]);
            let f = sigmoid(g[hidden + k]);
            let cand = g[2 * hidden + k].tanh();
            let o = sigmoid(g[3 * hidden + k]);
            g[k] = i;
            g[hidden + k] = f;
            g[2 * hidden + k] = cand;
            g[3 * hidden + k] = o;
            cr[k] = f * cp[k] + i * cand;
            tr[k] = cr[k].tanh();
            hr[k] = o * tr[k];
        }
    }
    (
        LstmCache {
            u,
            gates,
            c_prev,
            tanh_c,
        },
        h,
        c,
    )
}

/// Backward through one LSTM step. `dc` holds the cell gradient flowing in
/// from the next step and is replaced by the gradient w.r.t. `c_prev`.
/// Returns the gradient w.r.t. the concatenated input `u`.
fn lstm_step_backward(
    cache: &LstmCache,
    dh: &Array2<f64>,
    dc: &mut Array2<f64>,
    w: &Array2<f64>,
    dw: &mut Array2<f64>,
    db: &mut Array2<f64>,
) -> Array2<f64> {
    let hidden = dh.ncols();
    let mut dz = Array2::zeros(cache.gates.raw_dim());
    for r in 0..dz.nrows() {
        let g = cache.gates.row(r);
        let g = g.as_slice().unwrap();
        let tc = cache.tanh_c.row(r);
        let cp = cache.c_prev.row(r);
        let dhr = dh.row(r);
        let dcr = dc.row_mut(r).into_slice().unwrap();
        let dzr = dz.row_mut(r).into_slice().unwrap();
        for k in 0..hidden {
            let (i, f, cand, o) = (g[k], g[hidden + k], g[2 * hidden + k], g[3 * hidden + k]);
            let d_o = dhr[k] * tc[k];
            let dct = dcr[k] + dhr[k] * o * (1.0 - tc[k] * tc[k]);
            dzr[k] = dct * cand * i * (1.0 - i);
            dzr[hidden + k] = dct * cp[k] * f * (1.0 - f);
            dzr[2 * hidden + k] = dct * i * (1.0 - cand * cand);
            dzr[3 * hidden + k] = d_o * o * (1.0 - o);
            dcr[k] = dct * f;
        }
    }
    add_at_b(dw, &cache.u, &dz);
    add_row_sums(db, &dz);
    matmul(&dz, &w.t())
}

/// Encoder output for a batch: unit-normalized hidden states plus what the
/// backward pass needs.
pub(crate) struct EncoderTrace {
    /// `(batch, t, d_enc)`, every `[b, t, ..]` row unit-norm
    pub hidden: Array3<f64>,
    norms: Array2<f64>,
    steps: Vec<LstmCache>,
}

pub(crate) fn encode_batch(params: &AssemblyParams, tokens: &[&[usize]], keep: bool) -> EncoderTrace {
    let d = params.dims();
    let (batch, t_len, h_dim, e_dim) = (tokens.len(), d.t, d.d_enc, d.token_dim);
    let w = &params[Tensor::EncoderWeights];
    let b = &params[Tensor::EncoderBias];
    let emb = &params[Tensor::TokenEmbedding];

    let mut hidden = Array3::zeros((batch, t_len, h_dim));
    let mut norms = Array2::zeros((batch, t_len));
    let mut steps = Vec::with_capacity(if keep { t_len } else { 0 });
    let mut h = Array2::zeros((batch, h_dim));
    let mut c = Array2::zeros((batch, h_dim));
    for t in 0..t_len {
        let mut u = Array2::zeros((batch, e_dim + h_dim));
        u.slice_mut(s![.., ..e_dim])
            .assign(&gather_rows(emb, tokens.iter().map(|seq| seq[t])));
        u.slice_mut(s![.., e_dim..]).assign(&h);
        let (cache, h_new, c_new) = lstm_step(u, w, b, c);
        for r in 0..batch {
            let row = h_new.row(r);
            let n = row.dot(&row).sqrt().max(1e-12);
            norms[[r, t]] = n;
            hidden.slice_mut(s![r, t, ..]).assign(&(&row / n));
        }
        if keep {
            steps.push(cache);
        }
        h = h_new;
        c = c_new;
    }
    EncoderTrace { hidden, norms, steps }
}

/// Mean-pooled embedding and predicted accuracy for each batch member.
pub(crate) fn predict_batch(params: &AssemblyParams, hidden: &Array3<f64>) -> (Array2<f64>, Array1<f64>) {
    let pooled = hidden.mean_axis(Axis(1)).expect("non-empty sequence");
    let z = matmul(&pooled, &params[Tensor::PredictorWeights]);
    let bias = params[Tensor::PredictorBias][[0, 0]];
    let y = z.column(0).mapv(|v| sigmoid(v + bias));
    (pooled, y)
}

/// Dot-product attention of each query over that batch member's embedding.
/// Returns the attention weights `(batch, t)` and contexts `(batch, d_enc)`.
fn attend(hidden: &Array3<f64>, q: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let (batch, t_len, h_dim) = hidden.dim();
    let mut alpha = Array2::zeros((batch, t_len));
    let mut ctx = Array2::zeros((batch, h_dim));
    for r in 0..batch {
        let keys = hidden.index_axis(Axis(0), r);
        let scores = keys.dot(&q.row(r));
        let m = scores.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        let e = scores.mapv(|v| (v - m).exp());
        let a = &e / e.sum();
        ctx.row_mut(r).assign(&keys.t().dot(&a));
        alpha.row_mut(r).assign(&a);
    }
    (alpha, ctx)
}

fn decoder_initial_state(params: &AssemblyParams, hidden: &Array3<f64>) -> (Array2<f64>, Array2<f64>) {
    let last = hidden.index_axis(Axis(1), hidden.dim().1 - 1);
    let mut s0 = matmul(&last, &params[Tensor::InitWeights]);
    s0 += &params[Tensor::InitBias];
    s0.mapv_inplace(f64::tanh);
    (last.to_owned(), s0)
}

fn decoder_input(
    params: &AssemblyParams,
    hidden: &Array3<f64>,
    prev_tokens: impl Iterator<Item = usize>,
    state: &Array2<f64>,
) -> (Array2<f64>, Option<(Array2<f64>, Array2<f64>)>) {
    let d = params.dims();
    let (e_dim, c_dim) = (d.token_dim, d.context_dim());
    let mut u = Array2::zeros((state.nrows(), d.dec_input()));
    u.slice_mut(s![.., ..e_dim])
        .assign(&gather_rows(&params[Tensor::TokenEmbedding], prev_tokens));
    let attn = if d.attention {
        let q = matmul(state, &params[Tensor::QueryWeights]);
        let (alpha, ctx) = attend(hidden, &q);
        u.slice_mut(s![.., e_dim..e_dim + c_dim]).assign(&ctx);
        Some((q, alpha))
    } else {
        None
    };
    u.slice_mut(s![.., e_dim + c_dim..]).assign(state);
    (u, attn)
}

fn output_logits(params: &AssemblyParams, state: &Array2<f64>) -> Array2<f64> {
    let mut logits = matmul(state, &params[Tensor::OutputWeights]);
    logits += &params[Tensor::OutputBias];
    logits
}

/// Softmax over the tokens not yet used; used tokens get probability 0.
fn masked_softmax(logits: &[f64], used: &[bool], out: &mut [f64]) {
    let m = logits
        .iter()
        .zip(used)
        .filter(|(_, &u)| !u)
        .fold(f64::NEG_INFINITY, |a, (&v, _)| a.max(v));
    let mut total = 0.0;
    for ((o, &l), &u) in out.iter_mut().zip(logits).zip(used) {
        *o = if u { 0.0 } else { (l - m).exp() };
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Greedy masked decoding of a batch of embeddings. Every output is a
/// permutation because each emitted token is removed from the candidate set.
pub(crate) fn greedy_decode(params: &AssemblyParams, hidden: &Array3<f64>) -> Vec<Vec<usize>> {
    let d = params.dims();
    let (batch, t_len) = (hidden.dim().0, d.t);
    let (_, mut state) = decoder_initial_state(params, hidden);
    let mut cell = Array2::zeros(state.raw_dim());
    let mut used = vec![vec![false; t_len]; batch];
    let mut out = vec![Vec::with_capacity(t_len); batch];
    let mut prev = vec![d.sos(); batch];
    for _ in 0..t_len {
        let (u, _) = decoder_input(params, hidden, prev.iter().copied(), &state);
        let (_, s_new, c_new) = lstm_step(u, &params[Tensor::DecoderWeights], &params[Tensor::DecoderBias], cell);
        let logits = output_logits(params, &s_new);
        for r in 0..batch {
            let row = logits.row(r);
            let mut best = None;
            for (k, &v) in row.iter().enumerate() {
                if used[r][k] {
                    continue;
                }
                // NaN logits still yield a valid (lowest free) index
                match best {
                    Some((_, bv)) if !(v > bv) => {}
                    _ => best = Some((k, v)),
                }
            }
            let (k, _) = best.expect("at least one unused token remains");
            used[r][k] = true;
            out[r].push(k);
            prev[r] = k;
        }
        state = s_new;
        cell = c_new;
    }
    out
}

/// Components of the assembly loss summed over a batch.
#[derive(Clone, Debug, Default)]
pub(crate) struct LossParts {
    /// sum of squared regression errors
    pub regression: f64,
    /// sum of teacher-forced negative log-likelihoods
    pub reconstruction: f64,
    pub predictions: Vec<f64>,
    pub nll: Vec<f64>,
}

impl LossParts {
    pub fn total(&self, k: f64) -> f64 {
        k * self.regression + (1.0 - k) * self.reconstruction
    }
}

struct DecoderStep {
    lstm: LstmCache,
    /// query and attention weights, when attention is on
    attn: Option<(Array2<f64>, Array2<f64>)>,
    state: Array2<f64>,
    probs: Array2<f64>,
}

/// Loss `k * L1 + (1 - k) * L2` of a labeled batch; when `grad` is given, the
/// parameter gradient is added into it.
pub(crate) fn loss_and_grad(
    params: &AssemblyParams,
    tokens: &[&[usize]],
    labels: &[f64],
    k: f64,
    grad: Option<&mut AssemblyParams>,
) -> LossParts {
    let d = *params.dims();
    let keep = grad.is_some();
    let (batch, t_len) = (tokens.len(), d.t);
    let enc = encode_batch(params, tokens, keep);
    let (pooled, y) = predict_batch(params, &enc.hidden);
    let regression: f64 = y.iter().zip(labels).map(|(p, l)| (p - l) * (p - l)).sum();

    let (last_hidden, s0) = decoder_initial_state(params, &enc.hidden);
    let mut state = s0.clone();
    let mut cell = Array2::zeros(state.raw_dim());
    let mut used = vec![vec![false; t_len]; batch];
    let mut nll = vec![0.0; batch];
    let mut steps = Vec::with_capacity(if keep { t_len } else { 0 });
    for j in 0..t_len {
        let prev = tokens.iter().map(|seq| if j == 0 { d.sos() } else { seq[j - 1] });
        let (u, attn) = decoder_input(params, &enc.hidden, prev, &state);
        let (lstm, s_new, c_new) = lstm_step(u, &params[Tensor::DecoderWeights], &params[Tensor::DecoderBias], cell);
        let logits = output_logits(params, &s_new);
        let mut probs = Array2::zeros(logits.raw_dim());
        for r in 0..batch {
            let target = tokens[r][j];
            let pr = probs.row_mut(r).into_slice().unwrap();
            masked_softmax(logits.row(r).as_slice().unwrap(), &used[r], pr);
            nll[r] -= pr[target].ln();
            used[r][target] = true;
        }
        if keep {
            steps.push(DecoderStep {
                lstm,
                attn,
                state: s_new.clone(),
                probs,
            });
        }
        state = s_new;
        cell = c_new;
    }
    let parts = LossParts {
        regression,
        reconstruction: nll.iter().sum(),
        predictions: y.to_vec(),
        nll,
    };
    let Some(grad) = grad else {
        return parts;
    };

    let (e_dim, c_dim, h_dim) = (d.token_dim, d.context_dim(), d.d_enc);
    let mut d_hidden = Array3::<f64>::zeros(enc.hidden.raw_dim());
    let mut ds = Array2::<f64>::zeros((batch, d.d_dec));
    let mut dc = Array2::<f64>::zeros((batch, d.d_dec));
    for (j, step) in steps.iter().enumerate().rev() {
        let mut dlogits = step.probs.clone();
        for r in 0..batch {
            dlogits[[r, tokens[r][j]]] -= 1.0;
        }
        dlogits *= 1.0 - k;
        add_at_b(&mut grad[Tensor::OutputWeights], &step.state, &dlogits);
        add_row_sums(&mut grad[Tensor::OutputBias], &dlogits);
        general_mat_mul(1.0, &dlogits, &params[Tensor::OutputWeights].t(), 1.0, &mut ds);

        let (dw, db) = (Tensor::DecoderWeights, Tensor::DecoderBias);
        let mut dwm = std::mem::take(&mut grad[dw]);
        let mut dbm = std::mem::take(&mut grad[db]);
        let du = lstm_step_backward(&step.lstm, &ds, &mut dc, &params[dw], &mut dwm, &mut dbm);
        grad[dw] = dwm;
        grad[db] = dbm;

        let prev = tokens.iter().map(|seq| if j == 0 { d.sos() } else { seq[j - 1] });
        scatter_rows(&mut grad[Tensor::TokenEmbedding], prev, &du.slice(s![.., ..e_dim]));
        ds = du.slice(s![.., e_dim + c_dim..]).to_owned();

        if let Some((q, alpha)) = &step.attn {
            let dctx = du.slice(s![.., e_dim..e_dim + c_dim]);
            let mut dq = Array2::zeros((batch, h_dim));
            for r in 0..batch {
                let keys = enc.hidden.index_axis(Axis(0), r);
                let a = alpha.row(r);
                let dctx_r = dctx.row(r);
                let da_raw = keys.dot(&dctx_r);
                let mix = a.dot(&da_raw);
                let da = Array1::from_shape_fn(t_len, |t| a[t] * (da_raw[t] - mix));
                dq.row_mut(r).assign(&keys.t().dot(&da));
                let mut dk = d_hidden.index_axis_mut(Axis(0), r);
                let qr = q.row(r);
                for t in 0..t_len {
                    let mut row = dk.row_mut(t);
                    row.scaled_add(a[t], &dctx_r);
                    row.scaled_add(da[t], &qr);
                }
            }
            let s_prev = step.lstm.u.slice(s![.., e_dim + c_dim..]);
            add_at_b(&mut grad[Tensor::QueryWeights], &s_prev, &dq);
            general_mat_mul(1.0, &dq, &params[Tensor::QueryWeights].t(), 1.0, &mut ds);
        }
    }

    // initial decoder state
    let dpre = &ds * &s0.mapv(|v| 1.0 - v * v);
    add_at_b(&mut grad[Tensor::InitWeights], &last_hidden, &dpre);
    add_row_sums(&mut grad[Tensor::InitBias], &dpre);
    let d_last = matmul(&dpre, &params[Tensor::InitWeights].t());
    d_hidden.index_axis_mut(Axis(1), t_len - 1).scaled_add(1.0, &d_last);

    // predictor
    let dz = Array2::from_shape_fn((batch, 1), |(r, _)| k * 2.0 * (y[r] - labels[r]) * y[r] * (1.0 - y[r]));
    add_at_b(&mut grad[Tensor::PredictorWeights], &pooled, &dz);
    grad[Tensor::PredictorBias][[0, 0]] += dz.sum();
    let dpooled = matmul(&dz, &params[Tensor::PredictorWeights].t()) / t_len as f64;
    for t in 0..t_len {
        d_hidden.index_axis_mut(Axis(1), t).scaled_add(1.0, &dpooled);
    }

    // unit normalization: d h = (d ĥ - ĥ (ĥ · d ĥ)) / |h|
    for r in 0..batch {
        for t in 0..t_len {
            let hn = enc.hidden.slice(s![r, t, ..]);
            let mut g = d_hidden.slice_mut(s![r, t, ..]);
            let proj = hn.dot(&g);
            g.scaled_add(-proj, &hn);
            g /= enc.norms[[r, t]];
        }
    }

    // encoder BPTT
    let (ew, eb) = (Tensor::EncoderWeights, Tensor::EncoderBias);
    let mut dwm = std::mem::take(&mut grad[ew]);
    let mut dbm = std::mem::take(&mut grad[eb]);
    let mut dh_rec = Array2::<f64>::zeros((batch, h_dim));
    let mut dc = Array2::<f64>::zeros((batch, h_dim));
    for (t, step) in enc.steps.iter().enumerate().rev() {
        let dh = &d_hidden.index_axis(Axis(1), t) + &dh_rec;
        let du = lstm_step_backward(step, &dh, &mut dc, &params[ew], &mut dwm, &mut dbm);
        scatter_rows(
            &mut grad[Tensor::TokenEmbedding],
            tokens.iter().map(|seq| seq[t]),
            &du.slice(s![.., ..e_dim]),
        );
        dh_rec = du.slice(s![.., e_dim..]).to_owned();
    }
    grad[ew] = dwm;
    grad[eb] = dbm;
    parts
}
