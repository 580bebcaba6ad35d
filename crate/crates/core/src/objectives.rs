//! Training objectives: contrastive regularisation against old class means,
//! the within-task loss, and the two pseudo-representation losses for the
//! task-identity and task-adaptive heads. All return analytic gradients.

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneSurrogate, ForwardCache, PeftParams};
use crate::error::{dim_err, Error, Result};
use crate::numerics::{cross_entropy_with_grad, dot, log_sum_exp, GradBundle, ParamSet, Tensor2};

/// Temperature and weight of the contrastive regulariser.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CrConfig {
    pub temperature: f64,
    pub lambda: f64,
}

impl Default for CrConfig {
    fn default() -> Self {
        Self { temperature: 0.8, lambda: 0.1 }
    }
}

impl CrConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature {} must be > 0", self.temperature)));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda {} must be >= 0", self.lambda)));
        }
        Ok(())
    }
}

/// Dense output layer `h ↦ h·W + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearHead {
    pub weight: Tensor2,
    pub bias: Tensor2,
}

impl LinearHead {
    pub fn zeros(input_dim: usize, outputs: usize) -> Self {
        Self { weight: Tensor2::zeros(input_dim, outputs), bias: Tensor2::zeros(1, outputs) }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.cols()
    }

    pub fn logits(&self, h: &[f64]) -> Result<Vec<f64>> {
        if h.len() != self.input_dim() {
            return Err(dim_err(format!("head expects {} inputs, got {}", self.input_dim(), h.len())));
        }
        let mut out = self.bias.data().to_vec();
        let c = self.outputs();
        for (i, &hv) in h.iter().enumerate() {
            if hv == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(&self.weight.data()[i * c..(i + 1) * c]) {
                *o += hv * w;
            }
        }
        Ok(out)
    }

    /// Appends `n` zero-initialised outputs.
    pub fn grow(&mut self, n: usize) {
        let (d, c) = self.weight.shape();
        let mut w = Tensor2::zeros(d, c + n);
        for r in 0..d {
            w.row_mut(r)[..c].copy_from_slice(self.weight.row(r));
        }
        let mut b = Tensor2::zeros(1, c + n);
        b.row_mut(0)[..c].copy_from_slice(self.bias.row(0));
        self.weight = w;
        self.bias = b;
    }

    /// A head made of the given output columns.
    pub fn select_columns(&self, cols: &[usize]) -> Result<LinearHead> {
        let d = self.input_dim();
        let mut out = LinearHead::zeros(d, cols.len());
        for (j, &c) in cols.iter().enumerate() {
            if c >= self.outputs() {
                return Err(Error::Index { index: c, len: self.outputs() });
            }
            for r in 0..d {
                out.weight.set(r, j, self.weight.get(r, c));
            }
            out.bias.set(0, j, self.bias.get(0, c));
        }
        Ok(out)
    }

    /// Writes `part` back into the given output columns.
    pub fn assign_columns(&mut self, cols: &[usize], part: &LinearHead) -> Result<()> {
        if part.outputs() != cols.len() || part.input_dim() != self.input_dim() {
            return Err(dim_err("column block does not match the head"));
        }
        for (j, &c) in cols.iter().enumerate() {
            if c >= self.outputs() {
                return Err(Error::Index { index: c, len: self.outputs() });
            }
            for r in 0..self.input_dim() {
                self.weight.set(r, c, part.weight.get(r, j));
            }
            self.bias.set(0, c, part.bias.get(0, j));
        }
        Ok(())
    }

    /// Accumulates `∂L/∂W += h ⊗ g`, `∂L/∂b += g` and returns `∂L/∂h = W·g`.
    fn backward(&self, h: &[f64], g: &[f64], dw: &mut Tensor2, db: &mut Tensor2) -> Vec<f64> {
        let c = self.outputs();
        let mut dh = vec![0.0; h.len()];
        for (i, &hv) in h.iter().enumerate() {
            let wrow = &self.weight.data()[i * c..(i + 1) * c];
            dh[i] = dot(wrow, g);
            for (o, gv) in dw.row_mut(i).iter_mut().zip(g) {
                *o += hv * gv;
            }
        }
        for (o, gv) in db.data_mut().iter_mut().zip(g) {
            *o += gv;
        }
        dh
    }
}

impl ParamSet for LinearHead {
    fn params(&self) -> Vec<(String, &Tensor2)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor2)> {
        vec![("weight".into(), &mut self.weight), ("bias".into(), &mut self.bias)]
    }
}

/// Task-identity head. It holds one linear sub-output per `(task, class
/// column)` slot and a task's logit is the log-sum-exp of its slots, so the
/// softmax over tasks gives each task the total probability of its slots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TiiHead {
    pub linear: LinearHead,
    /// `(task, class column)` of each sub-output.
    pub slots: Vec<(usize, usize)>,
    tasks: usize,
}

impl TiiHead {
    pub fn new(input_dim: usize) -> Self {
        Self { linear: LinearHead::zeros(input_dim, 0), slots: Vec::new(), tasks: 0 }
    }

    /// Number of tasks, i.e. of outputs.
    pub fn outputs(&self) -> usize {
        self.tasks
    }

    pub fn input_dim(&self) -> usize {
        self.linear.input_dim()
    }

    /// Adds an output for the next task with one zero-initialised slot per
    /// class column.
    pub fn add_task(&mut self, class_cols: &[usize]) -> Result<()> {
        if class_cols.is_empty() {
            return Err(Error::Data("a task needs at least one class".into()));
        }
        let t = self.tasks;
        self.linear.grow(class_cols.len());
        self.slots.extend(class_cols.iter().map(|&c| (t, c)));
        self.tasks += 1;
        Ok(())
    }

    /// Sets a slot to the isotropic-Gaussian discriminant of a class with
    /// mean `mean` and noise scale `sigma`: `(μ·h − |μ|²/2) / σ²`.
    pub fn imprint(&mut self, slot: usize, mean: &[f64], sigma: f64) -> Result<()> {
        if slot >= self.slots.len() {
            return Err(Error::Index { index: slot, len: self.slots.len() });
        }
        if mean.len() != self.input_dim() {
            return Err(dim_err(format!("mean of width {} for a head of width {}", mean.len(), self.input_dim())));
        }
        let inv_var = if sigma > 0.0 { 1.0 / (sigma * sigma) } else { 1.0 };
        for (r, m) in mean.iter().enumerate() {
            self.linear.weight.set(r, slot, m * inv_var);
        }
        self.linear.bias.set(0, slot, -0.5 * dot(mean, mean) * inv_var);
        Ok(())
    }

    pub fn slot_of(&self, task: usize, class_col: usize) -> Option<usize> {
        self.slots.iter().position(|&s| s == (task, class_col))
    }

    fn task_logits(&self, sub: &[f64]) -> Vec<f64> {
        let mut per_task: Vec<Vec<f64>> = vec![Vec::new(); self.tasks];
        for (&(t, _), &v) in self.slots.iter().zip(sub) {
            per_task[t].push(v);
        }
        per_task.iter().map(|v| log_sum_exp(v)).collect()
    }

    pub fn logits(&self, h: &[f64]) -> Result<Vec<f64>> {
        Ok(self.task_logits(&self.linear.logits(h)?))
    }
}

impl ParamSet for TiiHead {
    fn params(&self) -> Vec<(String, &Tensor2)> {
        self.linear.params()
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor2)> {
        self.linear.params_mut()
    }
}

/// The task-identity head `ω` (one output per task) and the task-adaptive
/// head `ψ` (one output per observed class).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub tii: TiiHead,
    pub tap: LinearHead,
}

impl HeadParams {
    pub fn new(input_dim: usize) -> Self {
        Self { tii: TiiHead::new(input_dim), tap: LinearHead::zeros(input_dim, 0) }
    }
}

/// Contrastive regulariser on a batch of adapted representations (rows of
/// `reps`) against the stored means of earlier classes.
///
/// For each `h`, the mean over old classes of
/// `log[exp(h·μ_c/τ) / (Σ_{h'} exp(h·h'/τ) + Σ_{c'} exp(h·μ_{c'}/τ))]`,
/// summed over the batch; `h'` ranges over the whole batch, `h` included.
/// Returns the loss and its gradient w.r.t. `reps`.
pub fn cr_loss(reps: &Tensor2, old_means: &[Vec<f64>], temperature: f64) -> Result<(f64, Tensor2)> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("temperature {temperature} must be > 0")));
    }
    let (b, dim) = reps.shape();
    let mut grad = Tensor2::zeros(b, dim);
    if old_means.is_empty() || b == 0 {
        return Ok((0.0, grad));
    }
    if let Some(bad) = old_means.iter().find(|m| m.len() != dim) {
        return Err(dim_err(format!("class mean of width {} against representations of width {dim}", bad.len())));
    }
    let c = old_means.len();
    let inv_t = 1.0 / temperature;
    let mut mean_mu = vec![0.0; dim];
    for m in old_means {
        for (a, v) in mean_mu.iter_mut().zip(m) {
            *a += v / c as f64;
        }
    }

    let mut loss = 0.0;
    let mut logits = vec![0.0; b + c];
    for a in 0..b {
        let h = reps.row(a);
        for (j, other) in reps.iter_rows().enumerate() {
            logits[j] = dot(h, other) * inv_t;
        }
        for (k, m) in old_means.iter().enumerate() {
            logits[b + k] = dot(h, m) * inv_t;
        }
        let lse = log_sum_exp(&logits);
        let mean_pos = logits[b..].iter().sum::<f64>() / c as f64;
        loss += mean_pos - lse;

        // π over the denominator terms
        let pi: Vec<f64> = logits.iter().map(|z| (z - lse).exp()).collect();
        let mut gh = mean_mu.iter().map(|v| v * inv_t).collect::<Vec<_>>();
        for (k, m) in old_means.iter().enumerate() {
            let w = pi[b + k] * inv_t;
            for (g, v) in gh.iter_mut().zip(m) {
                *g -= w * v;
            }
        }
        for (j, other) in reps.iter_rows().enumerate() {
            let w = pi[j] * inv_t;
            for (g, v) in gh.iter_mut().zip(other) {
                *g -= w * v;
            }
        }
        for (g, v) in grad.row_mut(a).iter_mut().zip(&gh) {
            *g += v;
        }
        // h_a also appears inside every h_a·h_j term as the partner
        for j in 0..b {
            let w = pi[j] * inv_t;
            for (g, v) in grad.row_mut(j).iter_mut().zip(h) {
                *g -= w * v;
            }
        }
    }
    Ok((loss, grad))
}

/// Adapter and head optimised jointly by the within-task loss. Parameter
/// names are prefixed `e.` and `psi.`.
#[derive(Debug, Clone, PartialEq)]
pub struct WtpParams {
    pub peft: PeftParams,
    pub head: LinearHead,
}

impl ParamSet for WtpParams {
    fn params(&self) -> Vec<(String, &Tensor2)> {
        let mut out: Vec<(String, &Tensor2)> =
            self.peft.params().into_iter().map(|(n, t)| (format!("e.{n}"), t)).collect();
        out.extend(self.head.params().into_iter().map(|(n, t)| (format!("psi.{n}"), t)));
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor2)> {
        let mut out: Vec<(String, &mut Tensor2)> =
            self.peft.params_mut().into_iter().map(|(n, t)| (format!("e.{n}"), t)).collect();
        out.extend(self.head.params_mut().into_iter().map(|(n, t)| (format!("psi.{n}"), t)));
        out
    }
}

#[derive(Debug, Clone)]
pub struct WtpOutput {
    /// Total loss and gradients keyed like [`WtpParams`].
    pub bundle: GradBundle,
    pub ce: f64,
    pub cr: f64,
}

/// Mean cross-entropy of `head` over adapted representations plus
/// `λ · cr_loss`. `batch` holds raw inputs and labels that index the head's
/// outputs.
pub fn wtp_loss(
    bb: &BackboneSurrogate,
    params: &WtpParams,
    batch: &[(&[f64], usize)],
    old_means: &[Vec<f64>],
    cfg: &CrConfig,
) -> Result<WtpOutput> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let head = &params.head;
    let peft = &params.peft;
    if let Some((_, y)) = batch.iter().find(|(_, y)| *y >= head.outputs()) {
        return Err(Error::Data(format!("label index {y} outside the task's {} classes", head.outputs())));
    }

    let mut reps = Vec::with_capacity(batch.len());
    let mut caches: Vec<ForwardCache> = Vec::with_capacity(batch.len());
    for (x, _) in batch {
        let (h, cache) = bb.forward_with_cache(x, peft)?;
        reps.push(h);
        caches.push(cache);
    }

    let n = batch.len() as f64;
    let mut dw = Tensor2::zeros(head.input_dim(), head.outputs());
    let mut db = Tensor2::zeros(1, head.outputs());
    let mut ce = 0.0;
    let mut dreps = Vec::with_capacity(batch.len());
    for (h, (_, y)) in reps.iter().zip(batch) {
        let logits = head.logits(h)?;
        let (l, mut g) = cross_entropy_with_grad(&logits, *y)?;
        ce += l / n;
        g.iter_mut().for_each(|v| *v /= n);
        dreps.push(head.backward(h, &g, &mut dw, &mut db));
    }

    let mut cr = 0.0;
    if cfg.lambda > 0.0 && !old_means.is_empty() {
        let stacked = Tensor2::from_rows(&reps)?;
        let (l, g) = cr_loss(&stacked, old_means, cfg.temperature)?;
        cr = l;
        for (d, row) in dreps.iter_mut().zip(g.iter_rows()) {
            for (a, b) in d.iter_mut().zip(row) {
                *a += cfg.lambda * b;
            }
        }
    }

    let mut peft_grads = GradBundle::new(0.0);
    for (name, t) in peft.params() {
        peft_grads.insert(name, Tensor2::zeros(t.rows(), t.cols()));
    }
    for (cache, d) in caches.iter().zip(&dreps) {
        bb.backward_into(cache, peft, d, &mut peft_grads)?;
    }

    let mut bundle = GradBundle::new(0.0);
    bundle.absorb("e", peft_grads);
    let mut head_grads = GradBundle::new(0.0);
    head_grads.insert("weight", dw);
    head_grads.insert("bias", db);
    bundle.absorb("psi", head_grads);
    bundle.loss = ce + cfg.lambda * cr;
    Ok(WtpOutput { bundle, ce, cr })
}

/// Pseudo representations of one `(task, class)` pair; `task` and
/// `class_col` index the TII and TAP head outputs respectively.
#[derive(Debug, Clone)]
pub struct PseudoBatch {
    pub task: usize,
    pub class_col: usize,
    pub reps: Tensor2,
}

fn balanced_ce(head: &LinearHead, batches: &[PseudoBatch], target: impl Fn(&PseudoBatch) -> usize) -> Result<GradBundle> {
    check_balanced(batches)?;
    let norm = batches.len() as f64;
    let mut dw = Tensor2::zeros(head.input_dim(), head.outputs());
    let mut db = Tensor2::zeros(1, head.outputs());
    let mut loss = 0.0;
    for b in batches {
        let y = target(b);
        if y >= head.outputs() {
            return Err(Error::Index { index: y, len: head.outputs() });
        }
        for h in b.reps.iter_rows() {
            let logits = head.logits(h)?;
            let (l, mut g) = cross_entropy_with_grad(&logits, y)?;
            loss += l / norm;
            g.iter_mut().for_each(|v| *v /= norm);
            head.backward(h, &g, &mut dw, &mut db);
        }
    }
    let mut bundle = GradBundle::new(loss);
    bundle.insert("weight", dw);
    bundle.insert("bias", db);
    Ok(bundle)
}

fn check_balanced(batches: &[PseudoBatch]) -> Result<()> {
    if batches.is_empty() {
        return Err(Error::Data("no pseudo representations".into()));
    }
    let per_class = batches[0].reps.rows();
    if batches.iter().any(|b| b.reps.rows() != per_class) {
        return Err(Error::Data("pseudo batches must hold an equal number of samples per class".into()));
    }
    Ok(())
}

/// Task-identity loss: cross-entropy of `ω` towards each batch's task,
/// summed over samples and divided by the number of classes.
pub fn tii_loss(omega: &TiiHead, batches: &[PseudoBatch]) -> Result<GradBundle> {
    check_balanced(batches)?;
    let norm = batches.len() as f64;
    let lin = &omega.linear;
    let mut dw = Tensor2::zeros(lin.input_dim(), lin.outputs());
    let mut db = Tensor2::zeros(1, lin.outputs());
    let mut loss = 0.0;
    for b in batches {
        if b.task >= omega.outputs() {
            return Err(Error::Index { index: b.task, len: omega.outputs() });
        }
        if omega.slot_of(b.task, b.class_col).is_none() {
            return Err(Error::Data(format!("task {} has no slot for class column {}", b.task, b.class_col)));
        }
        for h in b.reps.iter_rows() {
            let sub = lin.logits(h)?;
            let z = omega.task_logits(&sub);
            let lse_all = log_sum_exp(&z);
            let zy = z[b.task];
            loss += (lse_all - zy) / norm;
            // ∂/∂s_c: softmax over all slots minus the within-task softmax
            // on the target task's slots
            let g: Vec<f64> = sub
                .iter()
                .zip(&omega.slots)
                .map(|(&s, &(t, _))| {
                    let mut v = (s - lse_all).exp();
                    if t == b.task {
                        v -= (s - zy).exp();
                    }
                    v / norm
                })
                .collect();
            lin.backward(h, &g, &mut dw, &mut db);
        }
    }
    let mut bundle = GradBundle::new(loss);
    bundle.insert("weight", dw);
    bundle.insert("bias", db);
    Ok(bundle)
}

/// Task-adaptive loss: cross-entropy of `ψ` over every observed class,
/// summed over samples and divided by the number of classes.
pub fn tap_loss(psi: &LinearHead, batches: &[PseudoBatch]) -> Result<GradBundle> {
    balanced_ce(psi, batches, |b| b.class_col)
}
