//! Gradient inversion: recover a training image from the gradient an
//! honest-but-curious aggregator sees, by minimising
//! `1 − cos(∇_w L(f(x; w), y), observed) + λ·TV(x)` over `x ∈ [0, 1]^d`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::comm::WorkerGroup;
use crate::compress::{reshape_to_matrix, CompressorSpec, LayerShape};
use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};
use crate::rng::{derive_seed, tag, SeededRng};
use crate::tensor::NamedTensors;
use crate::training::data::Dataset;
use crate::training::model::{bias_name, weight_name};
use crate::training::{exchange_layer, Model};

/// Largest image the finite-difference (MLP) attack accepts.
pub const FD_MAX_SIDE: usize = 16;
pub const FD_STEP: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// Initial step length; backtracking adapts it.
    #[serde(default = "default_step_size")]
    pub step_size: f64,
    #[serde(default = "default_tv")]
    pub tv_weight: f64,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_side")]
    pub height: usize,
    #[serde(default = "default_side")]
    pub width: usize,
}

fn default_steps() -> usize {
    300
}
fn default_step_size() -> f64 {
    1.0
}
fn default_tv() -> f64 {
    1e-4
}
fn default_restarts() -> usize {
    3
}
fn default_side() -> usize {
    8
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            steps: default_steps(),
            step_size: default_step_size(),
            tv_weight: default_tv(),
            restarts: default_restarts(),
            seed: 0,
            height: default_side(),
            width: default_side(),
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.restarts == 0 {
            return Err(Error::Config("attack steps and restarts must be at least 1".into()));
        }
        if !(self.tv_weight.is_finite() && self.tv_weight >= 0.0) {
            return Err(Error::Config(format!("tv_weight must be >= 0, got {}", self.tv_weight)));
        }
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return Err(Error::Config("attack step_size must be positive".into()));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("image dims must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    /// `height × width`, every pixel in `[0, 1]`.
    pub reconstruction: Matrix,
    pub objective: f64,
    /// Best objective after each iteration of the winning restart.
    pub history: Vec<f64>,
}

/// Anisotropic TV: absolute horizontal plus vertical neighbour differences.
pub fn total_variation(x: &Matrix) -> f64 {
    let mut tv = 0.0;
    for i in 0..x.rows() {
        for j in 0..x.cols() {
            if j + 1 < x.cols() {
                tv += (x.get(i, j + 1) - x.get(i, j)).abs();
            }
            if i + 1 < x.rows() {
                tv += (x.get(i + 1, j) - x.get(i, j)).abs();
            }
        }
    }
    tv
}

fn tv_subgradient(x: &Matrix) -> Matrix {
    let sign = |d: f64| if d > 0.0 { 1.0 } else if d < 0.0 { -1.0 } else { 0.0 };
    let mut g = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        for j in 0..x.cols() {
            if j + 1 < x.cols() {
                let s = sign(x.get(i, j + 1) - x.get(i, j));
                g.set(i, j + 1, g.get(i, j + 1) + s);
                g.set(i, j, g.get(i, j) - s);
            }
            if i + 1 < x.rows() {
                let s = sign(x.get(i + 1, j) - x.get(i, j));
                g.set(i + 1, j, g.get(i + 1, j) + s);
                g.set(i, j, g.get(i, j) - s);
            }
        }
    }
    g
}

fn sample(x: &Matrix, y: usize, classes: usize) -> Result<Dataset> {
    Dataset::new(Matrix::new(1, x.len(), x.data().to_vec())?, vec![y], classes)
}

fn classes(model: &Model) -> Result<usize> {
    match model {
        Model::Mlp { widths, .. } => Ok(*widths.last().expect("widths")),
        _ => Err(Error::Config("the attack targets softmax classifiers (linear or MLP)".into())),
    }
}

fn check_image(x: &Matrix, model: &Model) -> Result<()> {
    if x.len() != model.input_dim() {
        return Err(Error::Shape(format!("image has {} pixels, model expects {}", x.len(), model.input_dim())));
    }
    Ok(())
}

/// `1 − cos + λ·TV`; the cosine term is taken as 0 when either gradient is zero.
pub fn inversion_objective(
    x: &Matrix,
    y: usize,
    observed: &NamedTensors,
    model: &Model,
    params: &NamedTensors,
    tv_weight: f64,
) -> Result<f64> {
    check_image(x, model)?;
    let (_, g) = model.loss_and_grad(params, &sample(x, y, classes(model)?)?)?;
    g.expect_same_layout(observed)?;
    let (g, o) = (g.flatten(), observed.flatten());
    let (ng, no) = (dot(&g, &g).sqrt(), dot(&o, &o).sqrt());
    let cos = if ng == 0.0 || no == 0.0 { 0.0 } else { dot(&g, &o) / (ng * no) };
    Ok(1.0 - cos + tv_weight * total_variation(x))
}

/// Analytic `∇_x` of the objective for a linear softmax model
/// (`z = Wx + b`, gradient `[(p − e_y) xᵀ, p − e_y]`).
fn linear_objective_grad(
    x: &Matrix,
    y: usize,
    o_w: &Matrix,
    o_b: &[f64],
    w: &Matrix,
    b: &[f64],
    tv_weight: f64,
) -> (f64, Matrix) {
    let c = w.rows();
    let xv = x.data();
    let mut p: Vec<f64> = (0..c).map(|k| dot(w.row(k), xv) + b[k]).collect();
    let m = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = p.iter_mut().map(|v| {
        *v = (*v - m).exp();
        *v
    }).sum();
    p.iter_mut().for_each(|v| *v /= s);
    let mut e = p.clone();
    e[y] -= 1.0;

    let xx = dot(xv, xv);
    let ee = dot(&e, &e);
    let ng = (ee * xx + ee).sqrt();
    let no = (dot(o_w.data(), o_w.data()) + dot(o_b, o_b)).sqrt();
    // ⟨g, o⟩ = eᵀ O_W x + eᵀ o_b.
    let owx: Vec<f64> = (0..c).map(|k| dot(o_w.row(k), xv)).collect();
    let inner = dot(&e, &owx) + dot(&e, o_b);
    let tv = total_variation(x);
    if ng == 0.0 || no == 0.0 {
        return (1.0 + tv_weight * tv, tv_subgradient(x).scale(tv_weight));
    }
    let cos = inner / (ng * no);

    // v = ∂cos/∂g = o/(‖g‖‖o‖) − cos·g/‖g‖², split as V (c × d) and v_b.
    // ∇_x cos = Vᵀe + Wᵀ(diag(p) − ppᵀ)(Vx + v_b) with V x = O_W x/(‖g‖‖o‖) − cos·e·xx/‖g‖².
    let a = 1.0 / (ng * no);
    let cg = cos / (ng * ng);
    let vx_vb: Vec<f64> = (0..c).map(|k| a * owx[k] - cg * e[k] * xx + a * o_b[k] - cg * e[k]).collect();
    let pu = dot(&p, &vx_vb);
    let jt: Vec<f64> = (0..c).map(|k| p[k] * (vx_vb[k] - pu)).collect();
    let d = xv.len();
    let mut grad = vec![0.0; d];
    for k in 0..c {
        let (ow, wk) = (o_w.row(k), w.row(k));
        for j in 0..d {
            // Vᵀe: V[k][j] = a·O_W[k][j] − cg·e_k·x_j.
            grad[j] += e[k] * (a * ow[j] - cg * e[k] * xv[j]) + wk[j] * jt[k];
        }
    }
    let tvg = tv_subgradient(x);
    let g = Matrix::from_fn(x.rows(), x.cols(), |i, j| -grad[i * x.cols() + j] + tv_weight * tvg.get(i, j));
    (1.0 - cos + tv_weight * tv, g)
}

struct Objective<'a> {
    y: usize,
    observed: &'a NamedTensors,
    model: &'a Model,
    params: &'a NamedTensors,
    tv_weight: f64,
    linear: Option<(Matrix, Vec<f64>, Matrix, Vec<f64>)>,
}

impl<'a> Objective<'a> {
    fn new(y: usize, observed: &'a NamedTensors, model: &'a Model, params: &'a NamedTensors, tv_weight: f64) -> Result<Self> {
        let linear = match model {
            Model::Mlp { widths, .. } if widths.len() == 2 => {
                let get = |p: &NamedTensors, n: &str| {
                    p.get(n).cloned().ok_or_else(|| Error::Shape(format!("missing {n}")))
                };
                let (w, b) = (get(params, &weight_name(0))?, get(params, &bias_name(0))?);
                let (ow, ob) = (get(observed, &weight_name(0))?, get(observed, &bias_name(0))?);
                let w = reshape_to_matrix(&w)?.0;
                let ow = reshape_to_matrix(&ow)?.0;
                if ow.dims() != w.dims() || ob.numel() != b.numel() {
                    return Err(Error::Shape("observed gradient layout does not match the model".into()));
                }
                Some((w, b.into_data(), ow, ob.into_data()))
            }
            _ => None,
        };
        Ok(Self { y, observed, model, params, tv_weight, linear })
    }

    fn value(&self, x: &Matrix) -> Result<f64> {
        if let Some((w, b, ow, ob)) = &self.linear {
            return Ok(linear_objective_grad(x, self.y, ow, ob, w, b, self.tv_weight).0);
        }
        inversion_objective(x, self.y, self.observed, self.model, self.params, self.tv_weight)
    }

    fn value_and_grad(&self, x: &Matrix) -> Result<(f64, Matrix)> {
        if let Some((w, b, ow, ob)) = &self.linear {
            return Ok(linear_objective_grad(x, self.y, ow, ob, w, b, self.tv_weight));
        }
        let f = self.value(x)?;
        let mut g = Matrix::zeros(x.rows(), x.cols());
        let mut probe = x.clone();
        for i in 0..x.len() {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + FD_STEP;
            let up = self.value(&probe)?;
            probe.data_mut()[i] = orig - FD_STEP;
            let down = self.value(&probe)?;
            probe.data_mut()[i] = orig;
            g.data_mut()[i] = (up - down) / (2.0 * FD_STEP);
        }
        Ok((f, g))
    }
}

fn clamp01(x: &Matrix) -> Matrix {
    x.map(|v| v.clamp(0.0, 1.0))
}

/// Projected gradient descent with backtracking, best of `restarts` random
/// starts. Only improving steps are accepted, so `history` never increases.
pub fn run_attack(
    observed: &NamedTensors,
    y: usize,
    model: &Model,
    params: &NamedTensors,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    cfg.validate()?;
    let classes = classes(model)?;
    if y >= classes {
        return Err(Error::Config(format!("label {y} out of range for {classes} classes")));
    }
    if cfg.height * cfg.width != model.input_dim() {
        return Err(Error::Config(format!(
            "{}x{} image does not fit a model with {} inputs",
            cfg.height,
            cfg.width,
            model.input_dim()
        )));
    }
    let obj = Objective::new(y, observed, model, params, cfg.tv_weight)?;
    if obj.linear.is_none() && (cfg.height > FD_MAX_SIDE || cfg.width > FD_MAX_SIDE) {
        return Err(Error::Config(format!(
            "finite-difference attack is limited to {FD_MAX_SIDE}x{FD_MAX_SIDE} images"
        )));
    }

    let mut best: Option<AttackResult> = None;
    for r in 0..cfg.restarts {
        let mut rng = SeededRng::derived(cfg.seed, r as u64, tag::ATTACK);
        let mut x = Matrix::from_fn(cfg.height, cfg.width, |_, _| rng.uniform());
        let (mut f, mut g) = obj.value_and_grad(&x)?;
        let mut t = cfg.step_size;
        let mut history = Vec::with_capacity(cfg.steps);
        for _ in 0..cfg.steps {
            let mut moved = false;
            for _ in 0..40 {
                let cand = clamp01(&x.sub(&g.scale(t))?);
                let fc = obj.value(&cand)?;
                if fc < f {
                    x = cand;
                    f = fc;
                    moved = true;
                    t *= 2.0;
                    break;
                }
                t *= 0.5;
            }
            history.push(f);
            if !moved {
                break;
            }
            g = obj.value_and_grad(&x)?.1;
        }
        if best.as_ref().map_or(true, |b| f < b.objective) {
            best = Some(AttackResult { reconstruction: x, objective: f, history });
        }
    }
    Ok(best.expect("restarts >= 1"))
}

/// Mean SSIM over all `8×8` windows (clipped to the image), stride 1,
/// uniform weights, `L = 1`.
pub fn ssim(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("ssim of {:?} and {:?} images", a.dims(), b.dims())));
    }
    const C1: f64 = 0.01 * 0.01;
    const C2: f64 = 0.03 * 0.03;
    let (wh, ww) = (a.rows().min(8), a.cols().min(8));
    let n = (wh * ww) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for i0 in 0..=a.rows() - wh {
        for j0 in 0..=a.cols() - ww {
            let (mut sa, mut sb) = (0.0, 0.0);
            for i in i0..i0 + wh {
                for j in j0..j0 + ww {
                    sa += a.get(i, j);
                    sb += b.get(i, j);
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for i in i0..i0 + wh {
                for j in j0..j0 + ww {
                    let (da, db) = (a.get(i, j) - ma, b.get(i, j) - mb);
                    va += da * da;
                    vb += db * db;
                    cov += da * db;
                }
            }
            let (va, vb, cov) = (va / n, vb / n, cov / n);
            total += ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// A smooth grayscale image: a few Gaussian bumps, rescaled to `[0, 1]`.
pub fn synthetic_image(height: usize, width: usize, rng: &mut SeededRng) -> Matrix {
    let bumps: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.uniform_range(0.0, height as f64),
                rng.uniform_range(0.0, width as f64),
                rng.uniform_range(1.0, 0.4 * height.max(width) as f64 + 1.0),
                rng.uniform_range(-1.0, 1.0),
            )
        })
        .collect();
    let raw = Matrix::from_fn(height, width, |i, j| {
        bumps
            .iter()
            .map(|&(ci, cj, s, amp)| {
                let d2 = (i as f64 - ci).powi(2) + (j as f64 - cj).powi(2);
                amp * (-d2 / (2.0 * s * s)).exp()
            })
            .sum()
    });
    let lo = raw.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo < 1e-12 {
        return Matrix::from_fn(height, width, |_, _| 0.5);
    }
    raw.map(|v| (v - lo) / (hi - lo))
}

/// Binary 8-bit PGM (P5).
pub fn write_pgm(path: &Path, img: &Matrix) -> Result<()> {
    let mut f = fs::File::create(path)?;
    write!(f, "P5\n{} {}\n255\n", img.cols(), img.rows())?;
    let bytes: Vec<u8> = img.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    f.write_all(&bytes)?;
    Ok(())
}

/// What the aggregator sees of one worker's gradient in the first step of a
/// single-worker run: the decoded wire content, layer by layer.
pub fn observe(spec: &CompressorSpec, grads: &NamedTensors, seed: u64) -> Result<NamedTensors> {
    let mut group = WorkerGroup::new(1)?;
    let label = spec.label();
    let mut out = NamedTensors::new();
    for (l, (name, t)) in grads.iter().enumerate() {
        let shape = LayerShape::of(t.shape());
        let (m, _) = reshape_to_matrix(t)?;
        let mut comps = vec![spec.build(&shape, derive_seed(seed, l as u64, tag::COMPRESSOR))?];
        let (outputs, _) = exchange_layer(&mut group, 0, name, &label, &mut comps, &[m])?;
        let update = outputs.into_iter().next().expect("one worker").update;
        out.push(name, shape.restore(update)?);
    }
    Ok(out)
}

/// Which model an attack trial runs against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackModel {
    #[default]
    Linear,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRow {
    pub compressor: String,
    pub rank: Option<usize>,
    pub bits: Option<u32>,
    pub seed: u64,
    pub ssim: f64,
    pub objective: f64,
}

/// One trial: a seeded image and model, the compressor's view of its
/// single-sample gradient, and the attack against it.
pub struct Trial {
    pub truth: Matrix,
    pub label: usize,
    pub model: Model,
    pub params: NamedTensors,
    pub result: AttackResult,
    pub row: AttackRow,
}

pub fn attack_trial(
    spec: &CompressorSpec,
    kind: AttackModel,
    classes: usize,
    hidden: usize,
    cfg: &AttackConfig,
    seed: u64,
) -> Result<Trial> {
    cfg.validate()?;
    let mut rng = SeededRng::derived(seed, 0, tag::IMAGE);
    let truth = synthetic_image(cfg.height, cfg.width, &mut rng);
    let label = rng.below(classes);
    let d = cfg.height * cfg.width;
    let model = match kind {
        AttackModel::Linear => Model::mlp(d, &[], classes, Default::default()),
        AttackModel::Mlp => Model::mlp(d, &[hidden], classes, Default::default()),
    };
    let params = model.init(derive_seed(seed, 0, tag::INIT));
    let (_, grads) = model.loss_and_grad(&params, &sample(&truth, label, classes)?)?;
    let observed = observe(spec, &grads, seed)?;
    let cfg = AttackConfig { seed: derive_seed(seed, 0, tag::ATTACK), ..cfg.clone() };
    let result = run_attack(&observed, label, &model, &params, &cfg)?;
    let row = AttackRow {
        compressor: spec.label(),
        rank: spec.rank(),
        bits: spec.bits(),
        seed,
        ssim: ssim(&result.reconstruction, &truth)?,
        objective: result.objective,
    };
    Ok(Trial { truth, label, model, params, result, row })
}

pub fn write_attack_csv<W: std::io::Write>(rows: &[AttackRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tv_of_constant_is_zero() {
        assert_eq!(total_variation(&Matrix::from_fn(4, 5, |_, _| 0.3)), 0.0);
        let x = Matrix::from_rows(&[&[0.0, 1.0], &[1.0, 1.0]]).unwrap();
        assert_eq!(total_variation(&x), 2.0);
    }

    #[test]
    fn tv_subgradient_matches_differences() {
        let mut rng = SeededRng::new(2);
        let x = Matrix::from_fn(4, 4, |_, _| rng.uniform());
        let g = tv_subgradient(&x);
        for k in 0..x.len() {
            let mut up = x.clone();
            up.data_mut()[k] += 1e-7;
            let mut down = x.clone();
            down.data_mut()[k] -= 1e-7;
            let fd = (total_variation(&up) - total_variation(&down)) / 2e-7;
            assert!((fd - g.data()[k]).abs() < 1e-5);
        }
    }

    #[test]
    fn linear_gradient_matches_finite_differences() {
        let model = Model::mlp(16, &[], 3, Default::default());
        let params = model.init(5);
        let mut rng = SeededRng::new(8);
        let truth = Matrix::from_fn(4, 4, |_, _| rng.uniform());
        let (_, observed) = model.loss_and_grad(&params, &sample(&truth, 1, 3).unwrap()).unwrap();
        let obj = Objective::new(1, &observed, &model, &params, 0.0).unwrap();
        let x = Matrix::from_fn(4, 4, |_, _| rng.uniform());
        let (f, g) = obj.value_and_grad(&x).unwrap();
        assert!((f - inversion_objective(&x, 1, &observed, &model, &params, 0.0).unwrap()).abs() < 1e-12);
        for k in 0..x.len() {
            let mut up = x.clone();
            up.data_mut()[k] += 1e-6;
            let mut down = x.clone();
            down.data_mut()[k] -= 1e-6;
            let fd = (obj.value(&up).unwrap() - obj.value(&down).unwrap()) / 2e-6;
            assert!((fd - g.data()[k]).abs() < 1e-6 * fd.abs().max(1.0), "{k}: {fd} vs {}", g.data()[k]);
        }
    }

    #[test]
    fn ssim_checkerboard_is_anticorrelated() {
        let x = Matrix::from_fn(8, 8, |i, j| ((i + j) % 2) as f64);
        let inv = x.map(|v| 1.0 - v);
        // One window: μ = 0.5, σ² = 0.25, σ_ab = −0.25.
        let c1 = 1e-4;
        let c2 = 9e-4;
        let expect = ((0.5 + c1) * (-0.5 + c2)) / ((0.5 + c1) * (0.5 + c2));
        let s = ssim(&x, &inv).unwrap();
        assert!((s - expect).abs() < 1e-12);
        assert!(s <= 0.0);
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn synthetic_images_span_unit_range() {
        let img = synthetic_image(8, 8, &mut SeededRng::new(1));
        assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(img.max_abs() == 1.0);
    }
}
