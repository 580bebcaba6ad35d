//! Frozen transformer surrogate and the four parameter-efficient adapter
//! families (Prompt, LoRA, FiLM, Adapter).
//!
//! The surrogate is a small pre-norm encoder: every layer runs single-head
//! self-attention followed by a GELU feed-forward block, both residual. A
//! final layer norm is applied per token before pooling. Raw inputs are
//! reshaped into `token_count × token_dim` tokens, going through a frozen
//! linear projection first when their width differs from `token_count ·
//! token_dim`.
//!
//! Adapters hook into each layer:
//!
//! * Prompt: learnable tokens prepended to the layer input. They act as extra
//!   keys and values; their own outputs are dropped, so the next layer sees
//!   only the real tokens and the output width never changes.
//! * LoRA: a rank-`r` delta `scaling · A·B` on the value projection.
//! * Adapter: `y + tanh(y·down)·up` after the feed-forward block.
//! * FiLM: per-channel `γ ⊙ y + β` on the layer output.
//!
//! Only adapter parameters receive gradients; backbone weights have no
//! mutable accessors.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::numerics::{softmax, GradBundle, ParamSet, Tensor2};

/// How the final token representations are reduced to one vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Average over tokens, output width `token_dim`.
    Mean,
    /// Tokens laid end to end, output width `token_count · token_dim`.
    Concat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub num_layers: usize,
    pub token_count: usize,
    pub token_dim: usize,
    pub ffn_dim: usize,
    /// Width of the raw ingested vectors.
    pub input_dim: usize,
    pub pooling: Pooling,
    pub layer_norm_eps: f64,
    /// Multiplier on the init scale of the attention and FFN output
    /// projections; small values keep the residual stream close to the input.
    pub residual_scale: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            token_count: 4,
            token_dim: 16,
            ffn_dim: 64,
            input_dim: 64,
            pooling: Pooling::Concat,
            layer_norm_eps: 1e-5,
            residual_scale: 0.25,
        }
    }
}

impl BackboneConfig {
    pub fn output_dim(&self) -> usize {
        match self.pooling {
            Pooling::Mean => self.token_dim,
            Pooling::Concat => self.token_count * self.token_dim,
        }
    }

    pub fn token_width(&self) -> usize {
        self.token_count * self.token_dim
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("num_layers", self.num_layers),
            ("token_count", self.token_count),
            ("token_dim", self.token_dim),
            ("ffn_dim", self.ffn_dim),
            ("input_dim", self.input_dim),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("backbone {name} must be >= 1")));
            }
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(Error::Config("layer_norm_eps must be > 0".into()));
        }
        if !(self.residual_scale > 0.0 && self.residual_scale.is_finite()) {
            return Err(Error::Config("residual_scale must be finite and > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeftKind {
    Prompt,
    Lora,
    Film,
    Adapter,
}

impl PeftKind {
    pub const ALL: [PeftKind; 4] = [PeftKind::Prompt, PeftKind::Lora, PeftKind::Film, PeftKind::Adapter];
}

/// Nonlinearity inside the Adapter bottleneck.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterActivation {
    Tanh,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PeftConfig {
    pub kind: PeftKind,
    pub prompt_len: usize,
    pub lora_rank: usize,
    pub adapter_dim: usize,
    pub adapter_activation: AdapterActivation,
    /// Standard deviation of freshly drawn prompt tokens.
    pub prompt_init_std: f64,
}

impl Default for PeftConfig {
    fn default() -> Self {
        Self {
            kind: PeftKind::Prompt,
            prompt_len: 20,
            lora_rank: 8,
            adapter_dim: 8,
            adapter_activation: AdapterActivation::Tanh,
            prompt_init_std: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PeftLayer {
    Prompt { tokens: Tensor2 },
    Lora { a: Tensor2, b: Tensor2 },
    Film { gamma: Tensor2, beta: Tensor2 },
    Adapter { down: Tensor2, up: Tensor2 },
}

/// Task-specific adapter parameters, one [`PeftLayer`] per backbone layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeftParams {
    kind: PeftKind,
    /// Multiplier on the LoRA delta (`1 / rank`); 1.0 for other kinds.
    scaling: f64,
    layers: Vec<PeftLayer>,
}

impl PeftParams {
    pub fn kind(&self) -> PeftKind {
        self.kind
    }

    pub fn scaling(&self) -> f64 {
        self.scaling
    }

    pub fn layers(&self) -> &[PeftLayer] {
        &self.layers
    }

    /// Fresh parameters. LoRA `B` and Adapter `up` start at zero and FiLM at
    /// the identity, so those kinds begin as a no-op; prompt tokens are drawn
    /// from a Gaussian.
    pub fn fresh(cfg: &PeftConfig, bb: &BackboneConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        validate_peft_config(cfg)?;
        let d = bb.token_dim;
        let layers = (0..bb.num_layers)
            .map(|_| match cfg.kind {
                PeftKind::Prompt => PeftLayer::Prompt {
                    tokens: Tensor2::randn(cfg.prompt_len, d, cfg.prompt_init_std, rng),
                },
                PeftKind::Lora => PeftLayer::Lora {
                    a: Tensor2::randn(d, cfg.lora_rank, (1.0 / d as f64).sqrt(), rng),
                    b: Tensor2::zeros(cfg.lora_rank, d),
                },
                PeftKind::Film => PeftLayer::Film {
                    gamma: Tensor2::filled(1, d, 1.0),
                    beta: Tensor2::zeros(1, d),
                },
                PeftKind::Adapter => PeftLayer::Adapter {
                    down: Tensor2::randn(d, cfg.adapter_dim, (1.0 / d as f64).sqrt(), rng),
                    up: Tensor2::zeros(cfg.adapter_dim, d),
                },
            })
            .collect();
        Ok(Self { kind: cfg.kind, scaling: scaling_for(cfg), layers })
    }

    /// A setting under which the adapted forward pass reproduces the
    /// unadapted one exactly. For Prompt that is a zero-length prompt.
    pub fn null(kind: PeftKind, bb: &BackboneConfig, cfg: &PeftConfig) -> Self {
        let d = bb.token_dim;
        let layers = (0..bb.num_layers)
            .map(|_| match kind {
                PeftKind::Prompt => PeftLayer::Prompt { tokens: Tensor2::zeros(0, d) },
                PeftKind::Lora => PeftLayer::Lora {
                    a: Tensor2::zeros(d, cfg.lora_rank),
                    b: Tensor2::zeros(cfg.lora_rank, d),
                },
                PeftKind::Film => PeftLayer::Film {
                    gamma: Tensor2::filled(1, d, 1.0),
                    beta: Tensor2::zeros(1, d),
                },
                PeftKind::Adapter => PeftLayer::Adapter {
                    down: Tensor2::zeros(d, cfg.adapter_dim),
                    up: Tensor2::zeros(cfg.adapter_dim, d),
                },
            })
            .collect();
        let scaling = if kind == PeftKind::Lora { 1.0 / cfg.lora_rank.max(1) as f64 } else { 1.0 };
        Self { kind, scaling, layers }
    }

    /// Every tensor replaced by Gaussian noise of the given scale (FiLM γ
    /// centred on 1). Used to probe gradients away from the zero-delta init.
    pub fn randomized(&self, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut out = self.clone();
        for (name, t) in out.params_mut() {
            let (r, c) = t.shape();
            let mut fresh = Tensor2::randn(r, c, std, rng);
            if name.ends_with("film_gamma") {
                fresh.data_mut().iter_mut().for_each(|v| *v += 1.0);
            }
            *t = fresh;
        }
        out
    }

    /// Checks layer count and shapes against a backbone.
    pub fn check_compatible(&self, bb: &BackboneConfig) -> Result<()> {
        if self.layers.len() != bb.num_layers {
            return Err(Error::Config(format!(
                "adapter has {} layers, backbone has {}",
                self.layers.len(),
                bb.num_layers
            )));
        }
        let d = bb.token_dim;
        for (i, layer) in self.layers.iter().enumerate() {
            let ok = match (self.kind, layer) {
                (PeftKind::Prompt, PeftLayer::Prompt { tokens }) => tokens.cols() == d || tokens.rows() == 0,
                (PeftKind::Lora, PeftLayer::Lora { a, b }) => {
                    a.rows() == d && b.cols() == d && a.cols() == b.rows()
                }
                (PeftKind::Film, PeftLayer::Film { gamma, beta }) => {
                    gamma.shape() == (1, d) && beta.shape() == (1, d)
                }
                (PeftKind::Adapter, PeftLayer::Adapter { down, up }) => {
                    down.rows() == d && up.cols() == d && down.cols() == up.rows()
                }
                _ => false,
            };
            if !ok {
                return Err(Error::Config(format!(
                    "adapter layer {i} does not fit a {:?} adapter on token_dim {d}",
                    self.kind
                )));
            }
        }
        Ok(())
    }

    /// Canonical byte encoding (little-endian f64 of every tensor in
    /// parameter order); used to compare snapshots bit for bit.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.scaling.to_le_bytes());
        for (_, t) in self.params() {
            out.extend_from_slice(&(t.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(t.cols() as u64).to_le_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }
}

impl ParamSet for PeftParams {
    fn params(&self) -> Vec<(String, &Tensor2)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                PeftLayer::Prompt { tokens } => out.push((format!("l{i}.prompt"), tokens)),
                PeftLayer::Lora { a, b } => {
                    out.push((format!("l{i}.lora_a"), a));
                    out.push((format!("l{i}.lora_b"), b));
                }
                PeftLayer::Film { gamma, beta } => {
                    out.push((format!("l{i}.film_gamma"), gamma));
                    out.push((format!("l{i}.film_beta"), beta));
                }
                PeftLayer::Adapter { down, up } => {
                    out.push((format!("l{i}.adapter_down"), down));
                    out.push((format!("l{i}.adapter_up"), up));
                }
            }
        }
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor2)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            match layer {
                PeftLayer::Prompt { tokens } => out.push((format!("l{i}.prompt"), tokens)),
                PeftLayer::Lora { a, b } => {
                    out.push((format!("l{i}.lora_a"), a));
                    out.push((format!("l{i}.lora_b"), b));
                }
                PeftLayer::Film { gamma, beta } => {
                    out.push((format!("l{i}.film_gamma"), gamma));
                    out.push((format!("l{i}.film_beta"), beta));
                }
                PeftLayer::Adapter { down, up } => {
                    out.push((format!("l{i}.adapter_down"), down));
                    out.push((format!("l{i}.adapter_up"), up));
                }
            }
        }
        out
    }
}

fn scaling_for(cfg: &PeftConfig) -> f64 {
    match cfg.kind {
        PeftKind::Lora => 1.0 / cfg.lora_rank as f64,
        _ => 1.0,
    }
}

fn validate_peft_config(cfg: &PeftConfig) -> Result<()> {
    match cfg.kind {
        PeftKind::Lora if cfg.lora_rank == 0 => Err(Error::Config("lora_rank must be >= 1".into())),
        PeftKind::Adapter if cfg.adapter_dim == 0 => Err(Error::Config("adapter_dim must be >= 1".into())),
        _ => Ok(()),
    }
}

/// `e_t ← copy(e_{t−1})` when a predecessor exists, otherwise a fresh seeded
/// initialisation.
pub fn init_peft(
    cfg: &PeftConfig,
    bb: &BackboneConfig,
    previous: Option<&PeftParams>,
    rng: &mut ChaCha8Rng,
) -> Result<PeftParams> {
    match previous {
        Some(prev) => {
            if prev.kind != cfg.kind {
                return Err(Error::Config(format!(
                    "cannot continue a {:?} adapter as {:?}",
                    prev.kind, cfg.kind
                )));
            }
            prev.check_compatible(bb)?;
            Ok(prev.clone())
        }
        None => PeftParams::fresh(cfg, bb, rng),
    }
}

/// Reshapes a flat vector into `token_count` rows of `token_dim`.
pub fn embed_tokens(x: &[f64], token_count: usize, token_dim: usize) -> Result<Tensor2> {
    if x.len() != token_count * token_dim {
        return Err(dim_err(format!(
            "input of length {} cannot form {token_count} tokens of width {token_dim}",
            x.len()
        )));
    }
    Tensor2::from_vec(token_count, token_dim, x.to_vec())
}

/// Inverse of [`embed_tokens`].
pub fn flatten_tokens(tokens: &Tensor2) -> Vec<f64> {
    tokens.data().to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LayerWeights {
    ln1_gamma: Vec<f64>,
    ln1_beta: Vec<f64>,
    wq: Tensor2,
    wk: Tensor2,
    wv: Tensor2,
    wo: Tensor2,
    bq: Vec<f64>,
    bk: Vec<f64>,
    bv: Vec<f64>,
    bo: Vec<f64>,
    ln2_gamma: Vec<f64>,
    ln2_beta: Vec<f64>,
    w1: Tensor2,
    b1: Vec<f64>,
    w2: Tensor2,
    b2: Vec<f64>,
}

impl LayerWeights {
    fn random(cfg: &BackboneConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.token_dim;
        let f = cfg.ffn_dim;
        let sd = (1.0 / d as f64).sqrt();
        let sf = (1.0 / f as f64).sqrt();
        Self {
            ln1_gamma: vec![1.0; d],
            ln1_beta: vec![0.0; d],
            wq: Tensor2::randn(d, d, sd, rng),
            wk: Tensor2::randn(d, d, sd, rng),
            wv: Tensor2::randn(d, d, sd, rng),
            wo: Tensor2::randn(d, d, sd * cfg.residual_scale, rng),
            bq: vec![0.0; d],
            bk: vec![0.0; d],
            bv: vec![0.0; d],
            bo: vec![0.0; d],
            ln2_gamma: vec![1.0; d],
            ln2_beta: vec![0.0; d],
            w1: Tensor2::randn(d, f, sd, rng),
            b1: vec![0.0; f],
            w2: Tensor2::randn(f, d, sf * cfg.residual_scale, rng),
            b2: vec![0.0; d],
        }
    }

    fn zeroed(cfg: &BackboneConfig) -> Self {
        let d = cfg.token_dim;
        let f = cfg.ffn_dim;
        Self {
            ln1_gamma: vec![1.0; d],
            ln1_beta: vec![0.0; d],
            wq: Tensor2::zeros(d, d),
            wk: Tensor2::zeros(d, d),
            wv: Tensor2::zeros(d, d),
            wo: Tensor2::zeros(d, d),
            bq: vec![0.0; d],
            bk: vec![0.0; d],
            bv: vec![0.0; d],
            bo: vec![0.0; d],
            ln2_gamma: vec![1.0; d],
            ln2_beta: vec![0.0; d],
            w1: Tensor2::zeros(d, f),
            b1: vec![0.0; f],
            w2: Tensor2::zeros(f, d),
            b2: vec![0.0; d],
        }
    }
}

/// The frozen pre-trained model stand-in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneSurrogate {
    config: BackboneConfig,
    seed: u64,
    input_proj: Option<Tensor2>,
    layers: Vec<LayerWeights>,
    final_gamma: Vec<f64>,
    final_beta: Vec<f64>,
}

/// Seeded construction with variance-scaled Gaussian weights.
pub fn init_backbone(seed: u64, config: &BackboneConfig) -> Result<BackboneSurrogate> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = config.token_width();
    let input_proj = (config.input_dim != width)
        .then(|| Tensor2::randn(config.input_dim, width, (1.0 / config.input_dim as f64).sqrt(), &mut rng));
    let layers = (0..config.num_layers).map(|_| LayerWeights::random(config, &mut rng)).collect();
    Ok(BackboneSurrogate {
        config: config.clone(),
        seed,
        input_proj,
        layers,
        final_gamma: vec![1.0; config.token_dim],
        final_beta: vec![0.0; config.token_dim],
    })
}

struct LnCache {
    xhat: Tensor2,
    rstd: Vec<f64>,
}

fn layer_norm(x: &Tensor2, gamma: &[f64], beta: &[f64], eps: f64) -> (Tensor2, LnCache) {
    let (n, d) = x.shape();
    let mut out = Tensor2::zeros(n, d);
    let mut xhat = Tensor2::zeros(n, d);
    let mut rstd = Vec::with_capacity(n);
    for i in 0..n {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + eps).sqrt();
        rstd.push(r);
        let xh = xhat.row_mut(i);
        for (h, v) in xh.iter_mut().zip(row) {
            *h = (v - mean) * r;
        }
        let o = out.row_mut(i);
        for j in 0..d {
            o[j] = gamma[j] * xh[j] + beta[j];
        }
    }
    (out, LnCache { xhat, rstd })
}

fn layer_norm_backward(dout: &Tensor2, gamma: &[f64], cache: &LnCache) -> Tensor2 {
    let (n, d) = dout.shape();
    let mut dx = Tensor2::zeros(n, d);
    let mut dxhat = vec![0.0; d];
    for i in 0..n {
        let g = dout.row(i);
        let xh = cache.xhat.row(i);
        for j in 0..d {
            dxhat[j] = g[j] * gamma[j];
        }
        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        let r = cache.rstd[i];
        let o = dx.row_mut(i);
        for j in 0..d {
            o[j] = r * (dxhat[j] - mean_d - xh[j] * mean_dx);
        }
    }
    dx
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

struct LayerCache {
    prompt_rows: usize,
    ln1: LnCache,
    uall: Tensor2,
    q: Tensor2,
    k: Tensor2,
    v: Tensor2,
    lora_m: Option<Tensor2>,
    probs: Tensor2,
    ln2: LnCache,
    hpre: Tensor2,
    y2: Tensor2,
    adapter_t: Option<Tensor2>,
    y3: Tensor2,
}

/// Intermediate values of one adapted forward pass, consumed by
/// [`BackboneSurrogate::backward`].
pub struct ForwardCache {
    layers: Vec<LayerCache>,
    final_ln: LnCache,
}

impl BackboneSurrogate {
    /// All-zero projections with identity layer norms. Every layer is then an
    /// identity map and the output is the per-token normalised input.
    pub fn zeroed(config: &BackboneConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config: config.clone(),
            seed: 0,
            input_proj: (config.input_dim != config.token_width())
                .then(|| Tensor2::zeros(config.input_dim, config.token_width())),
            layers: (0..config.num_layers).map(|_| LayerWeights::zeroed(config)).collect(),
            final_gamma: vec![1.0; config.token_dim],
            final_beta: vec![0.0; config.token_dim],
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim()
    }

    /// Canonical byte encoding of every frozen weight.
    pub fn weight_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let mut push = |v: &[f64]| v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        if let Some(p) = &self.input_proj {
            push(p.data());
        }
        for l in &self.layers {
            for v in [&l.ln1_gamma, &l.ln1_beta, &l.bq, &l.bk, &l.bv, &l.bo, &l.ln2_gamma, &l.ln2_beta, &l.b1, &l.b2] {
                push(v);
            }
            for t in [&l.wq, &l.wk, &l.wv, &l.wo, &l.w1, &l.w2] {
                push(t.data());
            }
        }
        push(&self.final_gamma);
        push(&self.final_beta);
        out
    }

    fn tokens_for(&self, x: &[f64]) -> Result<Tensor2> {
        if x.len() != self.config.input_dim {
            return Err(dim_err(format!(
                "input has {} values, backbone expects {}",
                x.len(),
                self.config.input_dim
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("input contains a non-finite value".into()));
        }
        match &self.input_proj {
            None => embed_tokens(x, self.config.token_count, self.config.token_dim),
            Some(p) => {
                let row = Tensor2::from_vec(1, x.len(), x.to_vec())?;
                let projected = row.matmul(p)?;
                embed_tokens(projected.data(), self.config.token_count, self.config.token_dim)
            }
        }
    }

    /// `f_θ(x)`
    pub fn forward_unadapted(&self, x: &[f64]) -> Result<Vec<f64>> {
        let tokens = self.tokens_for(x)?;
        Ok(self.run(tokens, None, false)?.0)
    }

    /// `f_θ(x; e)`
    pub fn forward_adapted(&self, x: &[f64], peft: &PeftParams) -> Result<Vec<f64>> {
        peft.check_compatible(&self.config)?;
        let tokens = self.tokens_for(x)?;
        Ok(self.run(tokens, Some(peft), false)?.0)
    }

    /// Adapted forward pass keeping what the backward pass needs.
    pub fn forward_with_cache(&self, x: &[f64], peft: &PeftParams) -> Result<(Vec<f64>, ForwardCache)> {
        peft.check_compatible(&self.config)?;
        let tokens = self.tokens_for(x)?;
        let (out, cache) = self.run(tokens, Some(peft), true)?;
        Ok((out, cache.expect("cache requested")))
    }

    fn run(&self, mut x: Tensor2, peft: Option<&PeftParams>, keep: bool) -> Result<(Vec<f64>, Option<ForwardCache>)> {
        let mut caches = Vec::new();
        for (li, lw) in self.layers.iter().enumerate() {
            let layer = peft.map(|p| (&p.layers[li], p.scaling));
            let (y, cache) = self.layer_forward(lw, &x, layer)?;
            if keep {
                caches.push(cache);
            }
            x = y;
        }
        let (t, final_ln) = layer_norm(&x, &self.final_gamma, &self.final_beta, self.config.layer_norm_eps);
        let out = match self.config.pooling {
            Pooling::Concat => t.into_vec(),
            Pooling::Mean => {
                let n = t.rows() as f64;
                t.column_sums().into_iter().map(|v| v / n).collect()
            }
        };
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("backbone produced a non-finite representation".into()));
        }
        Ok((out, keep.then_some(ForwardCache { layers: caches, final_ln })))
    }

    fn layer_forward(&self, lw: &LayerWeights, x: &Tensor2, peft: Option<(&PeftLayer, f64)>) -> Result<(Tensor2, LayerCache)> {
        let d = self.config.token_dim;
        let eps = self.config.layer_norm_eps;
        let empty = Tensor2::zeros(0, d);
        let prompt = match peft {
            Some((PeftLayer::Prompt { tokens }, _)) => tokens,
            _ => &empty,
        };
        let p = prompt.rows();
        let n = x.rows();

        let zall = Tensor2::vstack(prompt, x)?;
        let (uall, ln1) = layer_norm(&zall, &lw.ln1_gamma, &lw.ln1_beta, eps);
        let ux = uall.slice_rows(p, p + n);
        let mut q = ux.matmul(&lw.wq)?;
        q.add_row_broadcast(&lw.bq)?;
        let mut k = uall.matmul(&lw.wk)?;
        k.add_row_broadcast(&lw.bk)?;
        let mut v = uall.matmul(&lw.wv)?;
        v.add_row_broadcast(&lw.bv)?;
        let mut lora_m = None;
        if let Some((PeftLayer::Lora { a, b }, scaling)) = peft {
            let m = uall.matmul(a)?;
            let mut delta = m.matmul(b)?;
            delta.scale(scaling);
            v.add_assign(&delta)?;
            lora_m = Some(m);
        }

        let inv_sqrt_d = 1.0 / (d as f64).sqrt();
        let mut scores = q.matmul_nt(&k)?;
        scores.scale(inv_sqrt_d);
        let mut probs = Tensor2::zeros(n, p + n);
        for i in 0..n {
            let row = softmax(scores.row(i))?;
            probs.row_mut(i).copy_from_slice(&row);
        }
        let o = probs.matmul(&v)?;
        let mut att = o.matmul(&lw.wo)?;
        att.add_row_broadcast(&lw.bo)?;
        let mut y1 = x.clone();
        y1.add_assign(&att)?;

        let (w, ln2) = layer_norm(&y1, &lw.ln2_gamma, &lw.ln2_beta, eps);
        let mut hpre = w.matmul(&lw.w1)?;
        hpre.add_row_broadcast(&lw.b1)?;
        let mut hact = hpre.clone();
        hact.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
        let mut f = hact.matmul(&lw.w2)?;
        f.add_row_broadcast(&lw.b2)?;
        let mut y2 = y1;
        y2.add_assign(&f)?;

        let mut adapter_t = None;
        let y3 = match peft {
            Some((PeftLayer::Adapter { down, up }, _)) => {
                let mut t = y2.matmul(down)?;
                t.data_mut().iter_mut().for_each(|v| *v = v.tanh());
                let mut y3 = y2.clone();
                y3.add_assign(&t.matmul(up)?)?;
                adapter_t = Some(t);
                y3
            }
            _ => y2.clone(),
        };
        let y4 = match peft {
            Some((PeftLayer::Film { gamma, beta }, _)) => {
                let mut y4 = y3.clone();
                for r in 0..n {
                    let row = y4.row_mut(r);
                    for j in 0..d {
                        row[j] = row[j] * gamma.data()[j] + beta.data()[j];
                    }
                }
                y4
            }
            _ => y3.clone(),
        };

        let cache = LayerCache {
            prompt_rows: p,
            ln1,
            uall,
            q,
            k,
            v,
            lora_m,
            probs,
            ln2,
            hpre,
            y2,
            adapter_t,
            y3,
        };
        Ok((y4, cache))
    }

    /// Gradient of a scalar loss w.r.t. every adapter tensor, given
    /// `grad_out = ∂loss/∂f_θ(x; e)`. Names match [`PeftParams::params`].
    pub fn backward(&self, cache: &ForwardCache, peft: &PeftParams, grad_out: &[f64]) -> Result<GradBundle> {
        let mut grads = GradBundle::new(0.0);
        for (name, t) in peft.params() {
            grads.insert(name, Tensor2::zeros(t.rows(), t.cols()));
        }
        self.backward_into(cache, peft, grad_out, &mut grads)?;
        Ok(grads)
    }

    /// Like [`Self::backward`] but accumulates into existing gradients.
    pub fn backward_into(
        &self,
        cache: &ForwardCache,
        peft: &PeftParams,
        grad_out: &[f64],
        grads: &mut GradBundle,
    ) -> Result<()> {
        if grad_out.len() != self.output_dim() {
            return Err(dim_err(format!(
                "output gradient has {} values, representation has {}",
                grad_out.len(),
                self.output_dim()
            )));
        }
        let n = self.config.token_count;
        let d = self.config.token_dim;
        let dt = match self.config.pooling {
            Pooling::Concat => Tensor2::from_vec(n, d, grad_out.to_vec())?,
            Pooling::Mean => {
                let mut t = Tensor2::zeros(n, d);
                for r in 0..n {
                    for (o, g) in t.row_mut(r).iter_mut().zip(grad_out) {
                        *o = g / n as f64;
                    }
                }
                t
            }
        };
        let mut dx = layer_norm_backward(&dt, &self.final_gamma, &cache.final_ln);
        for li in (0..self.layers.len()).rev() {
            dx = self.layer_backward(li, &cache.layers[li], peft, dx, grads)?;
        }
        Ok(())
    }

    fn layer_backward(
        &self,
        li: usize,
        c: &LayerCache,
        peft: &PeftParams,
        dy4: Tensor2,
        grads: &mut GradBundle,
    ) -> Result<Tensor2> {
        let lw = &self.layers[li];
        let d = self.config.token_dim;
        let n = dy4.rows();
        let p = c.prompt_rows;
        let layer = &peft.layers[li];

        let mut acc = |name: String, g: &Tensor2| -> Result<()> {
            let slot = grads
                .grads
                .get_mut(&name)
                .ok_or_else(|| dim_err(format!("no gradient slot for {name}")))?;
            slot.add_assign(g)
        };

        // FiLM
        let dy3 = match layer {
            PeftLayer::Film { gamma, .. } => {
                let mut dgamma = Tensor2::zeros(1, d);
                let mut dbeta = Tensor2::zeros(1, d);
                let mut dy3 = dy4.clone();
                for r in 0..n {
                    let g = dy4.row(r);
                    let y3 = c.y3.row(r);
                    for j in 0..d {
                        dgamma.data_mut()[j] += g[j] * y3[j];
                        dbeta.data_mut()[j] += g[j];
                    }
                    let out = dy3.row_mut(r);
                    for j in 0..d {
                        out[j] = g[j] * gamma.data()[j];
                    }
                }
                acc(format!("l{li}.film_gamma"), &dgamma)?;
                acc(format!("l{li}.film_beta"), &dbeta)?;
                dy3
            }
            _ => dy4,
        };

        // Adapter
        let dy2 = match layer {
            PeftLayer::Adapter { down, up } => {
                let t = c.adapter_t.as_ref().expect("adapter activations cached");
                acc(format!("l{li}.adapter_up"), &t.matmul_tn(&dy3)?)?;
                let mut da = dy3.matmul_nt(up)?;
                for (g, tv) in da.data_mut().iter_mut().zip(t.data()) {
                    *g *= 1.0 - tv * tv;
                }
                acc(format!("l{li}.adapter_down"), &c.y2.matmul_tn(&da)?)?;
                let mut dy2 = dy3;
                dy2.add_assign(&da.matmul_nt(down)?)?;
                dy2
            }
            _ => dy3,
        };

        // feed-forward block
        let mut dhact = dy2.matmul_nt(&lw.w2)?;
        for (g, h) in dhact.data_mut().iter_mut().zip(c.hpre.data()) {
            *g *= gelu_grad(*h);
        }
        let dw = dhact.matmul_nt(&lw.w1)?;
        let mut dy1 = dy2;
        dy1.add_assign(&layer_norm_backward(&dw, &lw.ln2_gamma, &c.ln2))?;

        // attention
        let dout = dy1.matmul_nt(&lw.wo)?;
        let dprobs = dout.matmul_nt(&c.v)?;
        let dv = c.probs.matmul_tn(&dout)?;
        let inv_sqrt_d = 1.0 / (d as f64).sqrt();
        let mut dscores = Tensor2::zeros(n, p + n);
        for i in 0..n {
            let pr = c.probs.row(i);
            let dp = dprobs.row(i);
            let inner: f64 = pr.iter().zip(dp).map(|(a, b)| a * b).sum();
            let out = dscores.row_mut(i);
            for j in 0..p + n {
                out[j] = pr[j] * (dp[j] - inner) * inv_sqrt_d;
            }
        }
        let dq = dscores.matmul(&c.k)?;
        let dk = dscores.matmul_tn(&c.q)?;

        let mut duall = dk.matmul_nt(&lw.wk)?;
        duall.add_assign(&dv.matmul_nt(&lw.wv)?)?;
        if let PeftLayer::Lora { a, b } = layer {
            let m = c.lora_m.as_ref().expect("lora activations cached");
            let mut db = m.matmul_tn(&dv)?;
            db.scale(peft.scaling);
            acc(format!("l{li}.lora_b"), &db)?;
            let mut dm = dv.matmul_nt(b)?;
            dm.scale(peft.scaling);
            acc(format!("l{li}.lora_a"), &c.uall.matmul_tn(&dm)?)?;
            duall.add_assign(&dm.matmul_nt(a)?)?;
        }
        let dux = dq.matmul_nt(&lw.wq)?;
        for r in 0..n {
            let src = dux.row(r).to_vec();
            for (o, s) in duall.row_mut(p + r).iter_mut().zip(src) {
                *o += s;
            }
        }
        let dzall = layer_norm_backward(&duall, &lw.ln1_gamma, &c.ln1);
        if let PeftLayer::Prompt { .. } = layer {
            if p > 0 {
                acc(format!("l{li}.prompt"), &dzall.slice_rows(0, p))?;
            }
        }
        let mut dx = dy1;
        dx.add_assign(&dzall.slice_rows(p, p + n))?;
        Ok(dx)
    }
}
