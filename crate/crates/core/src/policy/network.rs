//! Stacked recurrent network with a linear read-out, trained by
//! backpropagation through time. Parameters live in one flat vector so the
//! optimizers and gradient checks can treat them uniformly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    /// Update/reset gated cell.
    Gru,
    /// `h' = tanh(W x + U h + b)`.
    Tanh,
}

impl CellKind {
    fn gates(self) -> usize {
        match self {
            CellKind::Gru => 3,
            CellKind::Tanh => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkShape {
    pub cell: CellKind,
    pub inputs: usize,
    pub hidden: usize,
    pub layers: usize,
    pub outputs: usize,
}

/// Offsets of one layer's blocks inside the flat parameter vector.
#[derive(Clone, Copy, Debug)]
struct LayerLayout {
    input_size: usize,
    w_in: usize,
    w_rec: usize,
    b_in: usize,
    b_rec: usize,
}

impl NetworkShape {
    fn layer(&self, l: usize) -> LayerLayout {
        let g = self.cell.gates() * self.hidden;
        let mut offset = 0;
        for k in 0..=l {
            let input_size = if k == 0 { self.inputs } else { self.hidden };
            let layout = LayerLayout {
                input_size,
                w_in: offset,
                w_rec: offset + g * input_size,
                b_in: offset + g * input_size + g * self.hidden,
                b_rec: offset + g * input_size + g * self.hidden + g,
            };
            if k == l {
                return layout;
            }
            offset = layout.b_rec + g;
        }
        unreachable!()
    }

    fn readout_offset(&self) -> usize {
        if self.layers == 0 {
            return 0;
        }
        let last = self.layer(self.layers - 1);
        last.b_rec + self.cell.gates() * self.hidden
    }

    pub fn num_params(&self) -> usize {
        self.readout_offset() + self.outputs * self.hidden + self.outputs
    }

    fn readout_input(&self) -> usize {
        self.hidden
    }
}

/// `out += W x` for row-major `W` with `out.len()` rows.
fn gemv(w: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &w[r * cols..(r + 1) * cols];
        *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// `out += Wᵀ y`.
fn gemv_t(w: &[f64], y: &[f64], out: &mut [f64]) {
    let cols = out.len();
    for (r, &yr) in y.iter().enumerate() {
        if yr == 0.0 {
            continue;
        }
        let row = &w[r * cols..(r + 1) * cols];
        for (o, a) in out.iter_mut().zip(row) {
            *o += a * yr;
        }
    }
}

/// `G += y xᵀ`.
fn outer_add(g: &mut [f64], y: &[f64], x: &[f64]) {
    let cols = x.len();
    for (r, &yr) in y.iter().enumerate() {
        if yr == 0.0 {
            continue;
        }
        let row = &mut g[r * cols..(r + 1) * cols];
        for (gv, xv) in row.iter_mut().zip(x) {
            *gv += yr * xv;
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Per-step activations of one layer, kept for the backward pass.
#[derive(Clone, Debug, Default)]
struct StepCache {
    input: Vec<f64>,
    h_prev: Vec<f64>,
    h: Vec<f64>,
    /// Gated cell: reset, update, candidate and `U_n h + b_n`.
    r: Vec<f64>,
    z: Vec<f64>,
    n: Vec<f64>,
    rec_n: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub shape: NetworkShape,
    pub params: Vec<f64>,
}

impl Network {
    /// Uniform initialization in `±1/sqrt(hidden)`.
    pub fn init(shape: NetworkShape, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (shape.hidden as f64).sqrt();
        let params = (0..shape.num_params()).map(|_| rng.gen_range(-bound..bound)).collect();
        Network { shape, params }
    }

    fn cell_forward(&self, l: usize, input: &[f64], h_prev: &[f64]) -> StepCache {
        let s = &self.shape;
        let lay = s.layer(l);
        let h = s.hidden;
        let g = s.cell.gates() * h;
        let p = &self.params;
        let mut pre_in = p[lay.b_in..lay.b_in + g].to_vec();
        gemv(&p[lay.w_in..lay.w_in + g * lay.input_size], input, &mut pre_in);
        let mut pre_rec = p[lay.b_rec..lay.b_rec + g].to_vec();
        gemv(&p[lay.w_rec..lay.w_rec + g * h], h_prev, &mut pre_rec);
        let mut cache = StepCache { input: input.to_vec(), h_prev: h_prev.to_vec(), ..StepCache::default() };
        match s.cell {
            CellKind::Gru => {
                cache.r = (0..h).map(|k| sigmoid(pre_in[k] + pre_rec[k])).collect();
                cache.z = (0..h).map(|k| sigmoid(pre_in[h + k] + pre_rec[h + k])).collect();
                cache.rec_n = pre_rec[2 * h..].to_vec();
                cache.n = (0..h).map(|k| (pre_in[2 * h + k] + cache.r[k] * cache.rec_n[k]).tanh()).collect();
                cache.h = (0..h).map(|k| (1.0 - cache.z[k]) * cache.n[k] + cache.z[k] * h_prev[k]).collect();
            }
            CellKind::Tanh => {
                cache.h = (0..h).map(|k| (pre_in[k] + pre_rec[k]).tanh()).collect();
            }
        }
        cache
    }

    fn readout(&self, h_top: &[f64]) -> Vec<f64> {
        let s = &self.shape;
        let off = s.readout_offset();
        let w = &self.params[off..off + s.outputs * s.readout_input()];
        let mut out = self.params[off + s.outputs * s.readout_input()..].to_vec();
        gemv(w, h_top, &mut out);
        out
    }

    fn run(&self, inputs: &[Vec<f64>]) -> (Vec<Vec<StepCache>>, Vec<Vec<f64>>) {
        let s = &self.shape;
        let mut hidden = vec![vec![0.0; s.hidden]; s.layers];
        let mut caches = vec![Vec::with_capacity(inputs.len()); s.layers];
        let mut logits = Vec::with_capacity(inputs.len());
        for x in inputs {
            let mut layer_in = x.clone();
            for l in 0..s.layers {
                let c = self.cell_forward(l, &layer_in, &hidden[l]);
                hidden[l] = c.h.clone();
                layer_in = c.h.clone();
                caches[l].push(c);
            }
            logits.push(self.readout(&layer_in));
        }
        (caches, logits)
    }

    /// Logits for every step of a sequence, starting from a zero hidden state.
    pub fn forward(&self, inputs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        self.run(inputs).1
    }

    /// Summed cross-entropy over the steps of one sequence; accumulates its
    /// gradient into `grad`.
    pub fn loss_and_gradient(&self, inputs: &[Vec<f64>], labels: &[usize], grad: &mut [f64]) -> f64 {
        let s = &self.shape;
        let h = s.hidden;
        let gsize = s.cell.gates() * h;
        let (caches, logits) = self.run(inputs);
        let off = s.readout_offset();
        let w_out_len = s.outputs * s.readout_input();
        let mut loss = 0.0;
        let mut carry = vec![vec![0.0; h]; s.layers];
        for t in (0..inputs.len()).rev() {
            let probs = softmax(&logits[t]);
            loss -= probs[labels[t]].max(1e-300).ln();
            let mut dlogit = probs;
            dlogit[labels[t]] -= 1.0;
            let h_top = &caches[s.layers - 1][t].h;
            outer_add(&mut grad[off..off + w_out_len], &dlogit, h_top);
            for (g, d) in grad[off + w_out_len..].iter_mut().zip(&dlogit) {
                *g += d;
            }
            let mut from_above = vec![0.0; h];
            gemv_t(&self.params[off..off + w_out_len], &dlogit, &mut from_above);
            for l in (0..s.layers).rev() {
                let lay = s.layer(l);
                let c = &caches[l][t];
                let dh: Vec<f64> = (0..h).map(|k| carry[l][k] + from_above[k]).collect();
                let mut d_in = vec![0.0; gsize];
                let mut d_rec = vec![0.0; gsize];
                let mut dh_prev = vec![0.0; h];
                match s.cell {
                    CellKind::Gru => {
                        for k in 0..h {
                            let dn = dh[k] * (1.0 - c.z[k]);
                            let dz = dh[k] * (c.h_prev[k] - c.n[k]);
                            dh_prev[k] = dh[k] * c.z[k];
                            let dn_pre = dn * (1.0 - c.n[k] * c.n[k]);
                            let dr = dn_pre * c.rec_n[k];
                            let dr_pre = dr * c.r[k] * (1.0 - c.r[k]);
                            let dz_pre = dz * c.z[k] * (1.0 - c.z[k]);
                            d_in[k] = dr_pre;
                            d_in[h + k] = dz_pre;
                            d_in[2 * h + k] = dn_pre;
                            d_rec[k] = dr_pre;
                            d_rec[h + k] = dz_pre;
                            d_rec[2 * h + k] = dn_pre * c.r[k];
                        }
                    }
                    CellKind::Tanh => {
                        for k in 0..h {
                            let d = dh[k] * (1.0 - c.h[k] * c.h[k]);
                            d_in[k] = d;
                            d_rec[k] = d;
                        }
                    }
                }
                outer_add(&mut grad[lay.w_in..lay.w_in + gsize * lay.input_size], &d_in, &c.input);
                outer_add(&mut grad[lay.w_rec..lay.w_rec + gsize * h], &d_rec, &c.h_prev);
                for (g, d) in grad[lay.b_in..lay.b_in + gsize].iter_mut().zip(&d_in) {
                    *g += d;
                }
                for (g, d) in grad[lay.b_rec..lay.b_rec + gsize].iter_mut().zip(&d_rec) {
                    *g += d;
                }
                gemv_t(&self.params[lay.w_rec..lay.w_rec + gsize * h], &d_rec, &mut dh_prev);
                carry[l] = dh_prev;
                if l > 0 {
                    let mut dx = vec![0.0; lay.input_size];
                    gemv_t(&self.params[lay.w_in..lay.w_in + gsize * lay.input_size], &d_in, &mut dx);
                    from_above = dx;
                }
            }
        }
        loss
    }

    /// Summed cross-entropy without gradients.
    pub fn loss(&self, inputs: &[Vec<f64>], labels: &[usize]) -> f64 {
        self.forward(inputs).iter().zip(labels).map(|(z, &y)| -softmax(z)[y].max(1e-300).ln()).sum()
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(cell: CellKind, layers: usize) -> Network {
        Network::init(NetworkShape { cell, inputs: 3, hidden: 4, layers, outputs: 6 }, 5)
    }

    fn check_gradient(net: &Network) {
        let inputs: Vec<Vec<f64>> = vec![vec![0.3, -1.2, 0.5], vec![1.0, 0.1, -0.4], vec![-0.7, 0.9, 0.2]];
        let labels = [2, 5, 0];
        let mut grad = vec![0.0; net.params.len()];
        net.loss_and_gradient(&inputs, &labels, &mut grad);
        for k in 0..net.params.len() {
            let h = 1e-5;
            let mut plus = net.clone();
            plus.params[k] += h;
            let mut minus = net.clone();
            minus.params[k] -= h;
            let fd = (plus.loss(&inputs, &labels) - minus.loss(&inputs, &labels)) / (2.0 * h);
            let err = (fd - grad[k]).abs() / grad[k].abs().max(fd.abs()).max(1e-6);
            assert!(err < 1e-4, "param {k}: fd {fd} analytic {}", grad[k]);
        }
    }

    #[test]
    fn gated_gradient_matches_finite_differences() {
        check_gradient(&tiny(CellKind::Gru, 1));
        check_gradient(&tiny(CellKind::Gru, 2));
    }

    #[test]
    fn tanh_gradient_matches_finite_differences() {
        check_gradient(&tiny(CellKind::Tanh, 2));
    }

    #[test]
    fn parameter_count() {
        let net = tiny(CellKind::Gru, 2);
        // Layer 0: 12x3 + 12x4 + 12 + 12, layer 1: 12x4 + 12x4 + 24, read-out 6x4 + 6.
        assert_eq!(net.params.len(), 108 + 120 + 30);
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(&[1000.0, -1000.0, 3.0, 0.0, 0.5, 2.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
