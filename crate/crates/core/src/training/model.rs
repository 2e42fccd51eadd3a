use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::{tag, SeededRng};
use crate::tensor::{NamedTensors, Tensor};

use super::data::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Parameter layout and loss of a task. All losses are batch means.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    /// `½‖W − T_i‖²` per sample, `T_i` a flattened row of the batch.
    Quadratic { rows: usize, cols: usize },
    /// Binary cross-entropy on `σ(w·x + b)`; parameters `w: [1, d]`, `b: [1]`.
    Logistic { dim: usize },
    /// Dense layers `widths[0] → … → widths[last]` with softmax cross-entropy.
    /// Two widths give a linear softmax classifier.
    Mlp { widths: Vec<usize>, activation: Activation },
}

pub fn weight_name(layer: usize) -> String {
    format!("fc{layer}.weight")
}

pub fn bias_name(layer: usize) -> String {
    format!("fc{layer}.bias")
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn as_matrix(t: &Tensor) -> Result<Matrix> {
    match *t.shape() {
        [r, c] => Matrix::new(r, c, t.data().to_vec()),
        [n] => Matrix::new(1, n, t.data().to_vec()),
        _ => Err(Error::Shape(format!("expected a 1-D or 2-D parameter, got {:?}", t.shape()))),
    }
}

fn param<'a>(p: &'a NamedTensors, name: &str) -> Result<&'a Tensor> {
    p.get(name).ok_or_else(|| Error::Shape(format!("missing parameter {name}")))
}

struct Forward {
    /// Inputs to each layer, `acts[0]` being the batch itself.
    acts: Vec<Matrix>,
    pre: Vec<Matrix>,
    probs: Matrix,
}

impl Model {
    pub fn mlp(input: usize, hidden: &[usize], classes: usize, activation: Activation) -> Self {
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        widths.push(classes);
        Model::Mlp { widths, activation }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Model::Quadratic { rows, cols } => rows * cols,
            Model::Logistic { dim } => *dim,
            Model::Mlp { widths, .. } => widths[0],
        }
    }

    pub fn is_classifier(&self) -> bool {
        !matches!(self, Model::Quadratic { .. })
    }

    /// Quadratic starts at zero, logistic at zero, MLP weights at
    /// `N(0, 1/fan_in)` with zero biases.
    pub fn init(&self, seed: u64) -> NamedTensors {
        let mut p = NamedTensors::new();
        match self {
            Model::Quadratic { rows, cols } => p.push("w", Tensor::zeros(vec![*rows, *cols])),
            Model::Logistic { dim } => {
                p.push("w", Tensor::zeros(vec![1, *dim]));
                p.push("b", Tensor::zeros(vec![1]));
            }
            Model::Mlp { widths, .. } => {
                for (k, pair) in widths.windows(2).enumerate() {
                    let (fan_in, fan_out) = (pair[0], pair[1]);
                    let mut rng = SeededRng::derived(seed, k as u64, tag::INIT);
                    let s = 1.0 / (fan_in as f64).sqrt();
                    let w = (0..fan_in * fan_out).map(|_| s * rng.normal()).collect();
                    p.push(weight_name(k), Tensor::new(vec![fan_out, fan_in], w).expect("positive widths"));
                    p.push(bias_name(k), Tensor::zeros(vec![fan_out]));
                }
            }
        }
        p
    }

    fn check_batch(&self, batch: &Dataset) -> Result<()> {
        if batch.dim() != self.input_dim() {
            return Err(Error::Shape(format!("batch has {} features, model expects {}", batch.dim(), self.input_dim())));
        }
        Ok(())
    }

    fn forward(&self, params: &NamedTensors, x: &Matrix) -> Result<Forward> {
        let Model::Mlp { widths, activation } = self else { unreachable!("forward is MLP-only") };
        let layers = widths.len() - 1;
        let mut acts = vec![x.clone()];
        let mut pre = Vec::with_capacity(layers);
        for k in 0..layers {
            let w = as_matrix(param(params, &weight_name(k))?)?;
            let b = param(params, &bias_name(k))?.data();
            let mut z = acts[k].matmul_t(&w)?;
            for i in 0..z.rows() {
                for (v, bj) in z.row_mut(i).iter_mut().zip(b) {
                    *v += bj;
                }
            }
            if k + 1 < layers {
                acts.push(z.map(|v| activation.apply(v)));
            }
            pre.push(z);
        }
        let logits = pre.last().expect("at least one layer");
        let mut probs = logits.clone();
        for i in 0..probs.rows() {
            let row = probs.row_mut(i);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        Ok(Forward { acts, pre, probs })
    }

    fn mlp_loss(logits: &Matrix, y: &[usize]) -> f64 {
        let mut total = 0.0;
        for (i, &c) in y.iter().enumerate() {
            let row = logits.row(i);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - row[c];
        }
        total / y.len() as f64
    }

    pub fn loss(&self, params: &NamedTensors, batch: &Dataset) -> Result<f64> {
        self.check_batch(batch)?;
        let n = batch.len() as f64;
        let loss = match self {
            Model::Quadratic { .. } => {
                let w = param(params, "w")?.data();
                let mut total = 0.0;
                for i in 0..batch.len() {
                    total += batch.x.row(i).iter().zip(w).map(|(t, w)| (w - t) * (w - t)).sum::<f64>();
                }
                0.5 * total / n
            }
            Model::Logistic { .. } => {
                let w = param(params, "w")?.data();
                let b = param(params, "b")?.data()[0];
                let mut total = 0.0;
                for i in 0..batch.len() {
                    let z = crate::linalg::dot(batch.x.row(i), w) + b;
                    total += softplus(z) - batch.y[i] as f64 * z;
                }
                total / n
            }
            Model::Mlp { .. } => {
                let f = self.forward(params, &batch.x)?;
                Self::mlp_loss(f.pre.last().expect("layers"), &batch.y)
            }
        };
        Ok(loss)
    }

    /// Batch-mean loss and its exact gradient, laid out like `params`.
    pub fn loss_and_grad(&self, params: &NamedTensors, batch: &Dataset) -> Result<(f64, NamedTensors)> {
        self.check_batch(batch)?;
        let n = batch.len() as f64;
        let mut grads = params.zeros_like();
        let loss = match self {
            Model::Quadratic { .. } => {
                let w = param(params, "w")?.data();
                let g = grads.tensor_mut(0).data_mut();
                let mut total = 0.0;
                for i in 0..batch.len() {
                    for ((gk, &wk), &t) in g.iter_mut().zip(w).zip(batch.x.row(i)) {
                        *gk += wk - t;
                        total += (wk - t) * (wk - t);
                    }
                }
                g.iter_mut().for_each(|v| *v /= n);
                0.5 * total / n
            }
            Model::Logistic { .. } => {
                let w = param(params, "w")?.data().to_vec();
                let b = param(params, "b")?.data()[0];
                let mut gw = vec![0.0; w.len()];
                let mut gb = 0.0;
                let mut total = 0.0;
                for i in 0..batch.len() {
                    let x = batch.x.row(i);
                    let y = batch.y[i] as f64;
                    let z = crate::linalg::dot(x, &w) + b;
                    total += softplus(z) - y * z;
                    let r = sigmoid(z) - y;
                    for (g, xi) in gw.iter_mut().zip(x) {
                        *g += r * xi;
                    }
                    gb += r;
                }
                gw.iter_mut().for_each(|v| *v /= n);
                grads.tensor_mut(0).data_mut().copy_from_slice(&gw);
                grads.tensor_mut(1).data_mut()[0] = gb / n;
                total / n
            }
            Model::Mlp { widths, activation } => {
                let f = self.forward(params, &batch.x)?;
                let loss = Self::mlp_loss(f.pre.last().expect("layers"), &batch.y);
                let mut delta = f.probs.clone();
                for (i, &c) in batch.y.iter().enumerate() {
                    delta.row_mut(i)[c] -= 1.0;
                }
                let mut delta = delta.map(|v| v / n);
                for k in (0..widths.len() - 1).rev() {
                    let dw = delta.t_matmul(&f.acts[k])?;
                    grads.get_mut(&weight_name(k)).expect("layout").data_mut().copy_from_slice(dw.data());
                    let db = grads.get_mut(&bias_name(k)).expect("layout").data_mut();
                    for i in 0..delta.rows() {
                        for (g, d) in db.iter_mut().zip(delta.row(i)) {
                            *g += d;
                        }
                    }
                    if k > 0 {
                        let w = as_matrix(param(params, &weight_name(k))?)?;
                        let da = delta.matmul(&w)?;
                        let (z, a) = (&f.pre[k - 1], &f.acts[k]);
                        delta = Matrix::from_fn(da.rows(), da.cols(), |i, j| {
                            da.get(i, j) * activation.derivative(z.get(i, j), a.get(i, j))
                        });
                    }
                }
                loss
            }
        };
        if !loss.is_finite() || !grads.is_finite() {
            let worst = params.flatten().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            return Err(Error::Numerical(format!(
                "non-finite loss or gradient (loss {loss}) on a batch of {}; max |param| = {worst:e}",
                batch.len()
            )));
        }
        Ok((loss, grads))
    }

    /// Most likely class per row of `x` (lowest index on ties).
    pub fn predict(&self, params: &NamedTensors, x: &Matrix) -> Result<Vec<usize>> {
        match self {
            Model::Quadratic { .. } => Err(Error::Config("the quadratic task has no predictions".into())),
            Model::Logistic { .. } => {
                let w = param(params, "w")?.data();
                let b = param(params, "b")?.data()[0];
                Ok((0..x.rows()).map(|i| usize::from(crate::linalg::dot(x.row(i), w) + b > 0.0)).collect())
            }
            Model::Mlp { .. } => {
                let f = self.forward(params, x)?;
                Ok((0..x.rows())
                    .map(|i| {
                        let row = f.probs.row(i);
                        let mut best = 0;
                        for (j, &v) in row.iter().enumerate() {
                            if v > row[best] {
                                best = j;
                            }
                        }
                        best
                    })
                    .collect())
            }
        }
    }
}
