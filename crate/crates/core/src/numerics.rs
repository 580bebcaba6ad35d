//! Dense 2-D tensors, softmax / cross-entropy kernels, the Adam optimizer and
//! a central-difference gradient checker.
//!
//! Everything here is `f64` and single-threaded; reductions run in index
//! order so results are reproducible bit for bit.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(dim_err(format!(
                "{} values cannot fill a {rows}x{cols} tensor",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a tensor from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(dim_err(format!("row {i} has {} values, expected {cols}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Ok(Self { rows: rows.len(), cols, data })
    }

    /// Gaussian entries with the given standard deviation.
    pub fn randn(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("standard deviation must be finite and >= 0");
        let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self · other`
    pub fn matmul(&self, other: &Tensor2) -> Result<Tensor2> {
        if self.cols != other.rows {
            return Err(dim_err(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Tensor2::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let o_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other`
    pub fn matmul_tn(&self, other: &Tensor2) -> Result<Tensor2> {
        if self.rows != other.rows {
            return Err(dim_err(format!(
                "matmul_tn {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Tensor2::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = other.row(k);
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let o_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`
    pub fn matmul_nt(&self, other: &Tensor2) -> Result<Tensor2> {
        if self.cols != other.cols {
            return Err(dim_err(format!(
                "matmul_nt {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Tensor2::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a_row = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a_row, other.row(j));
            }
        }
        Ok(out)
    }

    pub fn add_assign(&mut self, other: &Tensor2) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(dim_err(format!("add {:?} and {:?}", self.shape(), other.shape())));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Adds `bias` (length `cols`) to every row.
    pub fn add_row_broadcast(&mut self, bias: &[f64]) -> Result<()> {
        if bias.len() != self.cols {
            return Err(dim_err(format!("bias of {} for {} columns", bias.len(), self.cols)));
        }
        for row in self.data.chunks_exact_mut(self.cols.max(1)) {
            for (a, b) in row.iter_mut().zip(bias) {
                *a += b;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.data {
            *v *= factor;
        }
    }

    /// Column sums as a vector of length `cols`.
    pub fn column_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for row in self.iter_rows() {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out
    }

    /// Rows `start..end` as a new tensor.
    pub fn slice_rows(&self, start: usize, end: usize) -> Tensor2 {
        Tensor2 {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Stacks `top` above `bottom`.
    pub fn vstack(top: &Tensor2, bottom: &Tensor2) -> Result<Tensor2> {
        if top.rows > 0 && bottom.rows > 0 && top.cols != bottom.cols {
            return Err(dim_err(format!("vstack {:?} over {:?}", top.shape(), bottom.shape())));
        }
        let cols = if top.rows > 0 { top.cols } else { bottom.cols };
        let mut data = Vec::with_capacity(top.data.len() + bottom.data.len());
        data.extend_from_slice(&top.data);
        data.extend_from_slice(&bottom.data);
        Ok(Tensor2 { rows: top.rows + bottom.rows, cols, data })
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Anything that exposes named trainable tensors in a stable order.
pub trait ParamSet {
    fn params(&self) -> Vec<(String, &Tensor2)>;
    fn params_mut(&mut self) -> Vec<(String, &mut Tensor2)>;

    fn num_params(&self) -> usize {
        self.params().iter().map(|(_, t)| t.data().len()).sum()
    }
}

impl ParamSet for Tensor2 {
    fn params(&self) -> Vec<(String, &Tensor2)> {
        vec![("x".to_string(), self)]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor2)> {
        vec![("x".to_string(), self)]
    }
}

/// Prepends `prefix.` to every parameter name.
pub fn prefixed<'a>(prefix: &str, params: Vec<(String, &'a mut Tensor2)>) -> Vec<(String, &'a mut Tensor2)> {
    params.into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)).collect()
}

/// A scalar loss together with one gradient per registered parameter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradBundle {
    pub loss: f64,
    pub grads: BTreeMap<String, Tensor2>,
}

impl GradBundle {
    pub fn new(loss: f64) -> Self {
        Self { loss, grads: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor2) {
        self.grads.insert(name.into(), grad);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor2> {
        self.grads.get(name)
    }

    /// Moves every gradient of `other` in under `prefix.`; losses add up.
    pub fn absorb(&mut self, prefix: &str, other: GradBundle) {
        self.loss += other.loss;
        for (n, g) in other.grads {
            self.grads.insert(format!("{prefix}.{n}"), g);
        }
    }

    /// Checks that `params` and the gradient entries describe the same set
    /// of tensors with the same shapes.
    pub fn validate_against(&self, params: &[(String, &Tensor2)]) -> Result<()> {
        if params.len() != self.grads.len() {
            return Err(dim_err(format!(
                "{} parameters but {} gradients",
                params.len(),
                self.grads.len()
            )));
        }
        for (name, p) in params {
            let g = self
                .grads
                .get(name)
                .ok_or_else(|| dim_err(format!("no gradient for parameter {name}")))?;
            if g.shape() != p.shape() {
                return Err(dim_err(format!(
                    "gradient for {name} is {:?}, parameter is {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(dim_err("softmax of an empty vector"));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// `log Σ exp(z)` with max subtraction.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.iter().map(|&z| (z - max).exp()).sum::<f64>().ln()
}

/// `−log softmax(logits)[target]`.
pub fn cross_entropy(logits: &[f64], target: usize) -> Result<f64> {
    if logits.is_empty() {
        return Err(dim_err("cross-entropy over zero classes"));
    }
    if target >= logits.len() {
        return Err(Error::Index { index: target, len: logits.len() });
    }
    // lse >= logit[target], clamp the rounding residue
    Ok((log_sum_exp(logits) - logits[target]).max(0.0))
}

/// Cross-entropy plus its gradient w.r.t. the logits (`softmax − onehot`).
pub fn cross_entropy_with_grad(logits: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
    let loss = cross_entropy(logits, target)?;
    let mut grad = softmax(logits)?;
    grad[target] -= 1.0;
    Ok((loss, grad))
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Moments {
    m: Tensor2,
    v: Tensor2,
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub learning_rate: f64,
    pub epsilon: f64,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl AdamState {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            learning_rate,
            epsilon: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update of every parameter in `params` using `grads`.
    pub fn step(&mut self, params: Vec<(String, &mut Tensor2)>, grads: &GradBundle) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be > 0", self.learning_rate)));
        }
        {
            let view: Vec<(String, &Tensor2)> = params.iter().map(|(n, t)| (n.clone(), &**t)).collect();
            grads.validate_against(&view)?;
        }
        for (name, p) in &params {
            if let Some(mo) = self.moments.get(name) {
                if mo.m.shape() != p.shape() {
                    return Err(dim_err(format!("moment buffer for {name} changed shape")));
                }
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, p) in params {
            let g = &grads.grads[&name];
            let mo = self.moments.entry(name).or_insert_with(|| Moments {
                m: Tensor2::zeros(p.rows(), p.cols()),
                v: Tensor2::zeros(p.rows(), p.cols()),
            });
            for (((w, &gi), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(mo.m.data_mut())
                .zip(mo.v.data_mut())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * gi;
                *v = self.beta2 * *v + (1.0 - self.beta2) * gi * gi;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

/// Settings for [`finite_diff_check`].
#[derive(Debug, Clone, Copy)]
pub struct FdOptions {
    pub epsilon: f64,
    /// Coordinates beyond this count are subsampled (seeded).
    pub max_coords: usize,
    pub seed: u64,
    /// Added to `|analytic|` in the denominator.
    pub denominator_floor: f64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self { epsilon: 1e-5, max_coords: 256, seed: 0, denominator_floor: 1e-12 }
    }
}

/// Largest relative error `|analytic − central difference| / (|analytic| + floor)`
/// over the checked coordinates.
///
/// `loss_fn` must return the loss and the analytic gradient bundle at the
/// parameters it is handed.
pub fn finite_diff_check<P, F>(params: &P, loss_fn: F, opts: &FdOptions) -> Result<f64>
where
    P: ParamSet + Clone,
    F: Fn(&P) -> Result<GradBundle>,
{
    if !(1e-7..=1e-3).contains(&opts.epsilon) {
        return Err(Error::Config(format!("epsilon {} outside [1e-7, 1e-3]", opts.epsilon)));
    }
    let analytic = loss_fn(params)?;
    if !analytic.loss.is_finite() {
        return Err(Error::Numeric("loss is not finite".into()));
    }
    analytic.validate_against(&params.params())?;

    let coords: Vec<(String, usize)> = params
        .params()
        .into_iter()
        .flat_map(|(n, t)| (0..t.data().len()).map(move |i| (n.clone(), i)))
        .collect();
    let chosen: Vec<usize> = if coords.len() <= opts.max_coords {
        (0..coords.len()).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut picked = index::sample(&mut rng, coords.len(), opts.max_coords).into_vec();
        picked.sort_unstable();
        picked
    };

    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for ci in chosen {
        let (name, idx) = &coords[ci];
        let original = read_coord(&probe, name, *idx);
        write_coord(&mut probe, name, *idx, original + opts.epsilon);
        let plus = loss_fn(&probe)?.loss;
        write_coord(&mut probe, name, *idx, original - opts.epsilon);
        let minus = loss_fn(&probe)?.loss;
        write_coord(&mut probe, name, *idx, original);
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!("loss not finite when perturbing {name}[{idx}]")));
        }
        let numeric = (plus - minus) / (2.0 * opts.epsilon);
        let a = analytic.grads[name].data()[*idx];
        let rel = (a - numeric).abs() / (a.abs() + opts.denominator_floor);
        worst = worst.max(rel);
    }
    Ok(worst)
}

fn read_coord<P: ParamSet>(p: &P, name: &str, idx: usize) -> f64 {
    p.params().into_iter().find(|(n, _)| n == name).map(|(_, t)| t.data()[idx]).unwrap()
}

fn write_coord<P: ParamSet>(p: &mut P, name: &str, idx: usize, v: f64) {
    if let Some((_, t)) = p.params_mut().into_iter().find(|(n, _)| n == name) {
        t.data_mut()[idx] = v;
    }
}
