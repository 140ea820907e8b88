//! Embedding → BiLSTM → single-head self-attention → linear head.
//!
//! The attention matrix is `softmax(Q Kᵀ / √d_k)` row-wise. Per-token weights
//! are its column means, and the pooled representation is the weight-averaged
//! value vectors, which equals the mean of the attention output rows.

use super::tensor::{axpy, dot, sigmoid, softmax_in_place, Mat};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Parameters of one LSTM direction. Gate layout is `[input, forget, cell, output]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmParams {
    pub w: Mat,
    pub u: Mat,
    pub b: Mat,
}

impl LstmParams {
    fn init<R: Rng>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let scale = 1.0 / (hidden as f64).sqrt();
        let mut b = Mat::zeros(1, 4 * hidden);
        for v in &mut b.data[hidden..2 * hidden] {
            *v = 1.0;
        }
        LstmParams {
            w: Mat::uniform(4 * hidden, input, scale, rng),
            u: Mat::uniform(4 * hidden, hidden, scale, rng),
            b,
        }
    }

    fn zeros_like(&self) -> Self {
        LstmParams {
            w: self.w.zeros_like(),
            u: self.u.zeros_like(),
            b: self.b.zeros_like(),
        }
    }

    fn hidden(&self) -> usize {
        self.u.cols
    }
}

/// All trainable tensors. Gradients share this type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub embedding: Mat,
    pub forward: LstmParams,
    pub backward: LstmParams,
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    pub wo: Mat,
    pub bo: Mat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub vocab: usize,
    pub embed: usize,
    pub hidden: usize,
    pub key: usize,
    pub value: usize,
}

impl Params {
    pub fn init<R: Rng>(dims: Dims, rng: &mut R) -> Self {
        let both = 2 * dims.hidden;
        Params {
            embedding: Mat::uniform(dims.vocab, dims.embed, 0.1, rng),
            forward: LstmParams::init(dims.embed, dims.hidden, rng),
            backward: LstmParams::init(dims.embed, dims.hidden, rng),
            wq: Mat::xavier(both, dims.key, rng),
            wk: Mat::xavier(both, dims.key, rng),
            wv: Mat::xavier(both, dims.value, rng),
            wo: Mat::xavier(2, dims.value, rng),
            bo: Mat::zeros(1, 2),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Params {
            embedding: self.embedding.zeros_like(),
            forward: self.forward.zeros_like(),
            backward: self.backward.zeros_like(),
            wq: self.wq.zeros_like(),
            wk: self.wk.zeros_like(),
            wv: self.wv.zeros_like(),
            wo: self.wo.zeros_like(),
            bo: self.bo.zeros_like(),
        }
    }

    pub fn tensors(&self) -> [(&'static str, &Mat); 12] {
        [
            ("embedding", &self.embedding),
            ("forward.w", &self.forward.w),
            ("forward.u", &self.forward.u),
            ("forward.b", &self.forward.b),
            ("backward.w", &self.backward.w),
            ("backward.u", &self.backward.u),
            ("backward.b", &self.backward.b),
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("bo", &self.bo),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Mat); 12] {
        [
            ("embedding", &mut self.embedding),
            ("forward.w", &mut self.forward.w),
            ("forward.u", &mut self.forward.u),
            ("forward.b", &mut self.forward.b),
            ("backward.w", &mut self.backward.w),
            ("backward.u", &mut self.backward.u),
            ("backward.b", &mut self.backward.b),
            ("wq", &mut self.wq),
            ("wk", &mut self.wk),
            ("wv", &mut self.wv),
            ("wo", &mut self.wo),
            ("bo", &mut self.bo),
        ]
    }

    pub fn dims(&self) -> Dims {
        Dims {
            vocab: self.embedding.rows,
            embed: self.embedding.cols,
            hidden: self.forward.hidden(),
            key: self.wq.cols,
            value: self.wv.cols,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, m)| m.is_finite())
    }

    /// self += scale · other
    pub fn add_scaled(&mut self, other: &Params, scale: f64) {
        for ((_, dst), (_, src)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            axpy(scale, &src.data, &mut dst.data);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, m) in self.tensors_mut() {
            m.data.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn norm(&self) -> f64 {
        self.tensors()
            .iter()
            .map(|(_, m)| m.data.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

struct LstmTrace {
    /// Post-activation gates per step, `[i, f, g, o]`.
    gates: Vec<Vec<f64>>,
    cells: Vec<Vec<f64>>,
    hiddens: Vec<Vec<f64>>,
}

fn lstm_forward(p: &LstmParams, xs: &[Vec<f64>], order: impl Iterator<Item = usize>) -> LstmTrace {
    let t_len = xs.len();
    let h = p.hidden();
    let mut trace = LstmTrace {
        gates: vec![Vec::new(); t_len],
        cells: vec![Vec::new(); t_len],
        hiddens: vec![Vec::new(); t_len],
    };
    let mut h_prev = vec![0.0; h];
    let mut c_prev = vec![0.0; h];
    for t in order {
        let mut z = p.b.data.clone();
        p.w.mul_vec_add(&xs[t], &mut z);
        p.u.mul_vec_add(&h_prev, &mut z);
        for k in 0..h {
            z[k] = sigmoid(z[k]);
            z[h + k] = sigmoid(z[h + k]);
            z[2 * h + k] = z[2 * h + k].tanh();
            z[3 * h + k] = sigmoid(z[3 * h + k]);
        }
        let mut c = vec![0.0; h];
        let mut hid = vec![0.0; h];
        for k in 0..h {
            c[k] = z[h + k] * c_prev[k] + z[k] * z[2 * h + k];
            hid[k] = z[3 * h + k] * c[k].tanh();
        }
        trace.gates[t] = z;
        h_prev.clone_from(&hid);
        c_prev.clone_from(&c);
        trace.cells[t] = c;
        trace.hiddens[t] = hid;
    }
    trace
}

/// Backpropagates `dh` (gradient w.r.t. each step's hidden output) through one
/// direction, accumulating into `grad` and `dxs`.
fn lstm_backward(
    p: &LstmParams,
    trace: &LstmTrace,
    xs: &[Vec<f64>],
    dh: &[Vec<f64>],
    reverse: bool,
    grad: &mut LstmParams,
    dxs: &mut [Vec<f64>],
) {
    let t_len = xs.len();
    let h = p.hidden();
    let zero = vec![0.0; h];
    // Processing order of the forward pass; walk it backwards here.
    let order: Vec<usize> = if reverse {
        (0..t_len).rev().collect()
    } else {
        (0..t_len).collect()
    };
    let mut dh_next = vec![0.0; h];
    let mut dc_next = vec![0.0; h];
    let mut dz = vec![0.0; 4 * h];
    for (step, &t) in order.iter().enumerate().rev() {
        let g = &trace.gates[t];
        let c = &trace.cells[t];
        let (h_prev, c_prev) = if step == 0 {
            (&zero, &zero)
        } else {
            let prev = order[step - 1];
            (&trace.hiddens[prev], &trace.cells[prev])
        };
        for k in 0..h {
            let dhk = dh[t][k] + dh_next[k];
            let (i, f, gg, o) = (g[k], g[h + k], g[2 * h + k], g[3 * h + k]);
            let tc = c[k].tanh();
            let dc = dc_next[k] + dhk * o * (1.0 - tc * tc);
            dz[k] = dc * gg * i * (1.0 - i);
            dz[h + k] = dc * c_prev[k] * f * (1.0 - f);
            dz[2 * h + k] = dc * i * (1.0 - gg * gg);
            dz[3 * h + k] = dhk * tc * o * (1.0 - o);
            dc_next[k] = dc * f;
        }
        grad.w.add_outer(&dz, &xs[t]);
        grad.u.add_outer(&dz, h_prev);
        axpy(1.0, &dz, &mut grad.b.data);
        p.w.tmul_vec_add(&dz, &mut dxs[t]);
        dh_next.iter_mut().for_each(|v| *v = 0.0);
        p.u.tmul_vec_add(&dz, &mut dh_next);
    }
}

/// Everything the backward pass needs from one forward evaluation.
pub struct Forward {
    xs: Vec<Vec<f64>>,
    fwd: LstmTrace,
    bwd: LstmTrace,
    /// Concatenated BiLSTM outputs, one row per position.
    states: Vec<Vec<f64>>,
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    /// Row-softmaxed attention matrix.
    attn: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub representation: Vec<f64>,
    pub probs: [f64; 2],
}

impl Forward {
    pub fn run(p: &Params, ids: &[usize]) -> Forward {
        debug_assert!(!ids.is_empty());
        let t_len = ids.len();
        let xs: Vec<Vec<f64>> = ids.iter().map(|&i| p.embedding.row(i).to_vec()).collect();
        let fwd = lstm_forward(&p.forward, &xs, 0..t_len);
        let bwd = lstm_forward(&p.backward, &xs, (0..t_len).rev());
        let states: Vec<Vec<f64>> = (0..t_len)
            .map(|t| {
                let mut s = fwd.hiddens[t].clone();
                s.extend_from_slice(&bwd.hiddens[t]);
                s
            })
            .collect();
        let q: Vec<Vec<f64>> = states.iter().map(|s| p.wq.vec_mul(s)).collect();
        let k: Vec<Vec<f64>> = states.iter().map(|s| p.wk.vec_mul(s)).collect();
        let v: Vec<Vec<f64>> = states.iter().map(|s| p.wv.vec_mul(s)).collect();
        let scale = 1.0 / (p.wq.cols as f64).sqrt();
        let attn: Vec<Vec<f64>> = q
            .iter()
            .map(|qi| {
                let mut row: Vec<f64> = k.iter().map(|kj| dot(qi, kj) * scale).collect();
                softmax_in_place(&mut row);
                row
            })
            .collect();
        let mut weights = vec![0.0; t_len];
        for row in &attn {
            axpy(1.0, row, &mut weights);
        }
        weights.iter_mut().for_each(|w| *w /= t_len as f64);
        let mut representation = vec![0.0; p.wv.cols];
        for (w, vj) in weights.iter().zip(&v) {
            axpy(*w, vj, &mut representation);
        }
        let mut logits = p.bo.data.clone();
        p.wo.mul_vec_add(&representation, &mut logits);
        softmax_in_place(&mut logits);
        Forward {
            xs,
            fwd,
            bwd,
            states,
            q,
            k,
            v,
            attn,
            weights,
            representation,
            probs: [logits[0], logits[1]],
        }
    }

    /// Row-softmaxed attention matrix, one row per query position.
    pub fn attention(&self) -> &[Vec<f64>] {
        &self.attn
    }

    /// Cross-entropy against class `target` (0 = non-vulnerable, 1 = vulnerable).
    pub fn loss(&self, target: usize) -> f64 {
        -self.probs[target].max(f64::MIN_POSITIVE).ln()
    }

    /// Gradients of [`Forward::loss`] w.r.t. every parameter, accumulated into `grad`.
    pub fn backward(&self, p: &Params, ids: &[usize], target: usize, grad: &mut Params) {
        let t_len = ids.len();
        let dk = p.wq.cols;
        let scale = 1.0 / (dk as f64).sqrt();

        let mut dlogits = self.probs.to_vec();
        dlogits[target] -= 1.0;
        grad.wo.add_outer(&dlogits, &self.representation);
        axpy(1.0, &dlogits, &mut grad.bo.data);
        let dr = p.wo.vec_mul(&dlogits);

        // r = Σ_j a_j v_j
        let dv: Vec<Vec<f64>> = self
            .weights
            .iter()
            .map(|&a| dr.iter().map(|x| a * x).collect())
            .collect();
        let da: Vec<f64> = self.v.iter().map(|vj| dot(vj, &dr)).collect();
        // a_j = mean_i A_ij, so every row sees the same upstream gradient.
        let da_row: Vec<f64> = da.iter().map(|x| x / t_len as f64).collect();

        let mut dq = vec![vec![0.0; dk]; t_len];
        let mut dkm = vec![vec![0.0; dk]; t_len];
        for (i, row) in self.attn.iter().enumerate().take(t_len) {
            let inner = dot(row, &da_row);
            for j in 0..t_len {
                let ds = row[j] * (da_row[j] - inner) * scale;
                if ds != 0.0 {
                    axpy(ds, &self.k[j], &mut dq[i]);
                    axpy(ds, &self.q[i], &mut dkm[j]);
                }
            }
        }

        let both = self.states[0].len();
        let mut dstates = vec![vec![0.0; both]; t_len];
        for t in 0..t_len {
            grad.wq.add_outer(&self.states[t], &dq[t]);
            grad.wk.add_outer(&self.states[t], &dkm[t]);
            grad.wv.add_outer(&self.states[t], &dv[t]);
            p.wq.mul_vec_add(&dq[t], &mut dstates[t]);
            p.wk.mul_vec_add(&dkm[t], &mut dstates[t]);
            p.wv.mul_vec_add(&dv[t], &mut dstates[t]);
        }

        let h = p.forward.hidden();
        let dh_fwd: Vec<Vec<f64>> = dstates.iter().map(|d| d[..h].to_vec()).collect();
        let dh_bwd: Vec<Vec<f64>> = dstates.iter().map(|d| d[h..].to_vec()).collect();
        let mut dxs = vec![vec![0.0; p.embedding.cols]; t_len];
        lstm_backward(
            &p.forward,
            &self.fwd,
            &self.xs,
            &dh_fwd,
            false,
            &mut grad.forward,
            &mut dxs,
        );
        lstm_backward(
            &p.backward,
            &self.bwd,
            &self.xs,
            &dh_bwd,
            true,
            &mut grad.backward,
            &mut dxs,
        );
        for (&id, dx) in ids.iter().zip(&dxs) {
            axpy(1.0, dx, grad.embedding.row_mut(id));
        }
    }
}
