//! MLP and recurrent-cell building blocks.
//!
//! Each net is a thin descriptor (name prefix + layer sizes); weights
//! live in a [`ParamSet`]. Every net has two forward paths that share
//! the same kernels: a taped one for training and a plain one for
//! frozen evaluation, so both produce bit-identical values.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{kernel, Graph, NodeId, ParamSet, Tensor};

pub const LEAKY_SLOPE: f64 = 0.01;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Norm {
    None,
    LayerNorm,
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect())
}

// ── MLP ─────────────────────────────────────────────────────────────

/// Fully connected net: leaky-ReLU hidden layers, linear output,
/// optional layer normalization before each hidden activation.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Mlp {
    pub prefix: String,
    pub sizes: Vec<usize>,
    pub norm: Norm,
}

impl Mlp {
    pub fn new(prefix: &str, sizes: &[usize], norm: Norm) -> Self {
        assert!(sizes.len() >= 2, "mlp needs at least input and output sizes");
        Mlp { prefix: prefix.to_string(), sizes: sizes.to_vec(), norm }
    }

    pub fn in_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    fn layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn init(&self, params: &mut ParamSet, rng: &mut ChaCha8Rng) {
        for l in 0..self.layers() {
            params.insert(&format!("{}.w{l}", self.prefix), xavier(rng, self.sizes[l], self.sizes[l + 1]));
            params.insert(&format!("{}.b{l}", self.prefix), Tensor::zeros(1, self.sizes[l + 1]));
            if self.norm == Norm::LayerNorm && l + 1 < self.layers() {
                params.insert(&format!("{}.g{l}", self.prefix), Tensor::full(1, self.sizes[l + 1], 1.0));
                params.insert(&format!("{}.n{l}", self.prefix), Tensor::zeros(1, self.sizes[l + 1]));
            }
        }
    }

    /// Taped forward. `trainable: false` loads weights as constants so
    /// no gradient flows into them (frozen pre-trained nets).
    pub fn forward(&self, g: &mut Graph, params: &ParamSet, x: NodeId, trainable: bool) -> NodeId {
        let mut h = x;
        for l in 0..self.layers() {
            let wn = format!("{}.w{l}", self.prefix);
            let bn = format!("{}.b{l}", self.prefix);
            let w = if trainable { g.param(params, &wn) } else { g.frozen(params, &wn) };
            let b = if trainable { g.param(params, &bn) } else { g.frozen(params, &bn) };
            let z = g.matmul(h, w);
            let mut z = g.add_row(z, b);
            if l + 1 < self.layers() {
                if self.norm == Norm::LayerNorm {
                    z = self.layernorm(g, params, z, l, trainable);
                }
                z = g.leaky_relu(z, LEAKY_SLOPE);
            }
            h = z;
        }
        h
    }

    fn layernorm(&self, g: &mut Graph, params: &ParamSet, z: NodeId, l: usize, trainable: bool) -> NodeId {
        let gn = format!("{}.g{l}", self.prefix);
        let nn = format!("{}.n{l}", self.prefix);
        let gamma = if trainable { g.param(params, &gn) } else { g.frozen(params, &gn) };
        let beta = if trainable { g.param(params, &nn) } else { g.frozen(params, &nn) };
        let mu = g.mean_rows(z);
        let xc = g.sub_col(z, mu);
        let sq = g.square(xc);
        let var = g.mean_rows(sq);
        // (var + eps)^(-1/2) composed as exp(-0.5 ln(var + eps))
        let veps = g.add_scalar(var, LN_EPS);
        let lv = g.ln(veps);
        let nl = g.scale(lv, -0.5);
        let inv = g.exp(nl);
        let normed = g.mul_col(xc, inv);
        let row = g.value(gamma).clone();
        debug_assert_eq!(row.rows, 1);
        let scaled = {
            // gamma broadcast: mul by row via add of logs is wrong for
            // negatives; emulate with mul against a tiled constant-free
            // path: mul_col only broadcasts columns, so tile through
            // elementwise mul after add_row(zeros).
            let zero = g.input(Tensor::zeros(g.value(normed).rows, row.cols));
            let tiled = g.add_row(zero, gamma);
            g.mul(normed, tiled)
        };
        let zerob = g.input(Tensor::zeros(g.value(scaled).rows, g.value(beta).cols));
        let tiled_b = g.add_row(zerob, beta);
        g.add(scaled, tiled_b)
    }

    /// Untaped forward over a batch; bit-identical to the taped path.
    pub fn forward_plain(&self, params: &ParamSet, x: &Tensor) -> Tensor {
        let mut h = x.clone();
        for l in 0..self.layers() {
            let w = params.get(&format!("{}.w{l}", self.prefix)).expect("mlp weight");
            let b = params.get(&format!("{}.b{l}", self.prefix)).expect("mlp bias");
            let mut z = kernel::add_row(&kernel::matmul(&h, w), b);
            if l + 1 < self.layers() {
                if self.norm == Norm::LayerNorm {
                    z = self.layernorm_plain(params, &z, l);
                }
                z = kernel::leaky_relu(&z, LEAKY_SLOPE);
            }
            h = z;
        }
        h
    }

    fn layernorm_plain(&self, params: &ParamSet, z: &Tensor, l: usize) -> Tensor {
        let gamma = params.get(&format!("{}.g{l}", self.prefix)).expect("ln gamma");
        let beta = params.get(&format!("{}.n{l}", self.prefix)).expect("ln beta");
        let mut out = z.clone();
        for r in 0..z.rows {
            let row = z.row(r);
            let mu = row.iter().sum::<f64>() / z.cols as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / z.cols as f64;
            let inv = (-0.5 * (var + LN_EPS).ln()).exp();
            for c in 0..z.cols {
                out.data[r * z.cols + c] = (row[c] - mu) * inv * gamma.data[c] + beta.data[c];
            }
        }
        out
    }
}

// ── GRU ─────────────────────────────────────────────────────────────

/// Single-layer gated recurrent cell run over a fixed-length sequence;
/// returns the final hidden state.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct GruEncoder {
    pub prefix: String,
    pub in_dim: usize,
    pub hidden: usize,
}

impl GruEncoder {
    pub fn new(prefix: &str, in_dim: usize, hidden: usize) -> Self {
        GruEncoder { prefix: prefix.to_string(), in_dim, hidden }
    }

    pub fn init(&self, params: &mut ParamSet, rng: &mut ChaCha8Rng) {
        let joint = self.in_dim + self.hidden;
        params.insert(&format!("{}.wg", self.prefix), xavier(rng, joint, 2 * self.hidden));
        params.insert(&format!("{}.bg", self.prefix), Tensor::zeros(1, 2 * self.hidden));
        params.insert(&format!("{}.wc", self.prefix), xavier(rng, joint, self.hidden));
        params.insert(&format!("{}.bc", self.prefix), Tensor::zeros(1, self.hidden));
    }

    /// Taped encode over `steps` (each `[B, in_dim]`), initial state zero.
    pub fn encode(&self, g: &mut Graph, params: &ParamSet, steps: &[NodeId], trainable: bool) -> NodeId {
        assert!(!steps.is_empty(), "empty sequence");
        let batch = g.value(steps[0]).rows;
        let load = |g: &mut Graph, n: &str| {
            if trainable {
                g.param(params, n)
            } else {
                g.frozen(params, n)
            }
        };
        let wg = load(g, &format!("{}.wg", self.prefix));
        let bg = load(g, &format!("{}.bg", self.prefix));
        let wc = load(g, &format!("{}.wc", self.prefix));
        let bc = load(g, &format!("{}.bc", self.prefix));
        let mut h = g.input(Tensor::zeros(batch, self.hidden));
        for &x in steps {
            let cat = g.concat_cols(&[x, h]);
            let gz = g.matmul(cat, wg);
            let gz = g.add_row(gz, bg);
            let gates = g.sigmoid(gz);
            let r = g.slice_cols(gates, 0, self.hidden);
            let u = g.slice_cols(gates, self.hidden, 2 * self.hidden);
            let rh = g.mul(r, h);
            let cat2 = g.concat_cols(&[x, rh]);
            let cz = g.matmul(cat2, wc);
            let cz = g.add_row(cz, bc);
            let c = g.tanh(cz);
            let d = g.sub(c, h);
            let ud = g.mul(u, d);
            h = g.add(h, ud);
        }
        h
    }

    /// Untaped encode, same arithmetic as the taped path.
    pub fn encode_plain(&self, params: &ParamSet, steps: &[Tensor]) -> Tensor {
        let wg = params.get(&format!("{}.wg", self.prefix)).unwrap();
        let bg = params.get(&format!("{}.bg", self.prefix)).unwrap();
        let wc = params.get(&format!("{}.wc", self.prefix)).unwrap();
        let bc = params.get(&format!("{}.bc", self.prefix)).unwrap();
        let batch = steps[0].rows;
        let mut h = Tensor::zeros(batch, self.hidden);
        for x in steps {
            let cat = kernel::concat_cols(&[x, &h]);
            let gates = kernel::sigmoid(&kernel::add_row(&kernel::matmul(&cat, wg), bg));
            let mut rh = Tensor::zeros(batch, self.hidden);
            for b in 0..batch {
                for j in 0..self.hidden {
                    rh.data[b * self.hidden + j] = gates.at(b, j) * h.at(b, j);
                }
            }
            let cat2 = kernel::concat_cols(&[x, &rh]);
            let c = kernel::tanh(&kernel::add_row(&kernel::matmul(&cat2, wc), bc));
            for b in 0..batch {
                for j in 0..self.hidden {
                    let u = gates.at(b, self.hidden + j);
                    let hv = h.at(b, j);
                    h.data[b * self.hidden + j] = hv + u * (c.at(b, j) - hv);
                }
            }
        }
        h
    }
}
