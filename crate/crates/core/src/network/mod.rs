//! SlowFast fusion transformer that maps a window of sparse tracking
//! features to a full-body pose estimate.
//!
//! The network is a pre-norm transformer encoder. A window of `tau` feature
//! frames is fused into `tau/2` tokens (two half-rate embeddings
//! concatenated), position-encoded, passed through the encoder stack, and
//! the final token is projected to a 148-dim output: root orientation (6D),
//! 21 local joint rotations (6D each), and 16 shape coefficients.
//!
//! Parameters live in one flat vector addressed through a [`Layout`] of
//! named tensors; the same layout drives initialization, the optimizer, and
//! the `.epwt` weight files. Training runs in `f64`; weight files store
//! `f32`, and inference converts those values exactly, so a save/load round
//! trip cannot change eval results.

pub mod tensor;

use std::fmt;
use std::io::Read as _;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::features::{FeatureFrame, FeatureMode, FEATURE_DIM, FEATURE_LAYOUT_VERSION};
use crate::math::Rot6D;
use crate::real::Real;
use crate::skeleton::ShapeParams;
use crate::{Rot6d, NUM_LOCAL_JOINTS, SHAPE_DIM};
use tensor::{
    axpy, dot, gelu_grad, layernorm_bwd, layernorm_fwd, linear_bwd_input,
    linear_bwd_params, linear_fwd, linear_fwd_batch, softmax_row, softmax_row_bwd,
};

/// Output width: 6 (root 6D) + 21·6 (local 6D) + 16 (shape).
pub const OUTPUT_DIM: usize = 6 + NUM_LOCAL_JOINTS * 6 + SHAPE_DIM;

const WEIGHTS_MAGIC: &[u8; 4] = b"EPWT";
const WEIGHTS_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum NetworkError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("window has {got} frames, model expects {want}")]
    WindowLength { got: usize, want: usize },
    #[error("malformed weight file: {0}")]
    Format(String),
    #[error("weight file does not match this build or config: {0}")]
    ConfigMismatch(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// How window frames are turned into encoder tokens.
///
/// All three modes produce tokens of the same width (`2·embed_dim`) and hold
/// the parameter count fixed, so they are directly comparable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    /// Two streams: stride-2 samples over the whole window (slow) and the
    /// dense second half (fast), embedded separately and concatenated.
    SlowFast,
    /// Every frame becomes a token.
    Dense,
    /// Stride-2 samples only; half the tokens of `Dense`, no fast stream.
    Strided,
}

impl fmt::Display for Fusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Fusion::SlowFast => "slowfast",
            Fusion::Dense => "dense",
            Fusion::Strided => "strided",
        };
        f.write_str(s)
    }
}

impl FromStr for Fusion {
    type Err = NetworkError;
    fn from_str(s: &str) -> Result<Self, NetworkError> {
        match s {
            "slowfast" => Ok(Fusion::SlowFast),
            "dense" => Ok(Fusion::Dense),
            "strided" => Ok(Fusion::Strided),
            other => Err(NetworkError::InvalidConfig(format!(
                "unknown fusion mode {other:?} (expected slowfast, dense or strided)"
            ))),
        }
    }
}

fn default_tau() -> usize {
    80
}
fn default_feature_dim() -> usize {
    FEATURE_DIM
}
fn default_embed_dim() -> usize {
    128
}
fn default_num_layers() -> usize {
    3
}
fn default_num_heads() -> usize {
    8
}
fn default_mlp_hidden() -> usize {
    2048
}
fn default_fusion() -> Fusion {
    Fusion::SlowFast
}
fn default_seed() -> u64 {
    0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Window length in frames. Must be even.
    #[serde(default = "default_tau")]
    pub tau: usize,
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
    /// Per-stream embedding width; tokens are `2·embed_dim` wide.
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "default_num_layers")]
    pub num_layers: usize,
    #[serde(default = "default_num_heads")]
    pub num_heads: usize,
    #[serde(default = "default_mlp_hidden")]
    pub mlp_hidden: usize,
    #[serde(default = "default_fusion")]
    pub fusion: Fusion,
    /// Position-feature variant the weights were trained for; rides along in
    /// weight files so evaluation picks the matching feature builder.
    #[serde(default)]
    pub feature_mode: FeatureMode,
    /// Seed for weight initialization.
    #[serde(default = "default_seed")]
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            tau: default_tau(),
            feature_dim: default_feature_dim(),
            embed_dim: default_embed_dim(),
            num_layers: default_num_layers(),
            num_heads: default_num_heads(),
            mlp_hidden: default_mlp_hidden(),
            fusion: default_fusion(),
            feature_mode: FeatureMode::default(),
            seed: default_seed(),
        }
    }
}

impl ModelConfig {
    /// Token width seen by the encoder.
    pub fn token_dim(&self) -> usize {
        2 * self.embed_dim
    }

    /// Number of encoder tokens for one window.
    pub fn token_count(&self) -> usize {
        match self.fusion {
            Fusion::SlowFast | Fusion::Strided => self.tau / 2,
            Fusion::Dense => self.tau,
        }
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        if self.tau < 2 || self.tau % 2 != 0 {
            return Err(NetworkError::InvalidConfig(format!(
                "tau must be even and >= 2, got {}",
                self.tau
            )));
        }
        if self.feature_dim == 0 {
            return Err(NetworkError::InvalidConfig("feature_dim must be > 0".into()));
        }
        if self.embed_dim == 0 {
            return Err(NetworkError::InvalidConfig("embed_dim must be > 0".into()));
        }
        if self.num_layers == 0 {
            return Err(NetworkError::InvalidConfig("num_layers must be > 0".into()));
        }
        if self.num_heads == 0 || self.token_dim() % self.num_heads != 0 {
            return Err(NetworkError::InvalidConfig(format!(
                "num_heads ({}) must divide the token dim ({})",
                self.num_heads,
                self.token_dim()
            )));
        }
        if self.mlp_hidden == 0 {
            return Err(NetworkError::InvalidConfig("mlp_hidden must be > 0".into()));
        }
        Ok(())
    }
}

/// Frame indices of the slow stream: stride 2 over the whole window.
pub fn slow_indices(tau: usize) -> Vec<usize> {
    (0..tau).step_by(2).collect()
}

/// Frame indices of the fast stream: the dense second half of the window.
pub fn fast_indices(tau: usize) -> Vec<usize> {
    (tau / 2..tau).collect()
}

#[derive(Debug, Clone)]
pub struct TensorSpec {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    /// 1 for vectors.
    pub cols: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Names, shapes and offsets of every tensor in the flat parameter vector.
/// The order is the serialization order of `.epwt` files.
#[derive(Debug, Clone)]
pub struct Layout {
    pub specs: Vec<TensorSpec>,
    pub total: usize,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Layout {
        let d = cfg.token_dim();
        let e = cfg.embed_dim;
        let f = cfg.feature_dim;
        let m = cfg.mlp_hidden;
        let mut specs = Vec::new();
        let mut offset = 0usize;
        let mut push = |name: String, rows: usize, cols: usize| {
            specs.push(TensorSpec { name, offset, rows, cols });
            offset += rows * cols;
        };

        match cfg.fusion {
            Fusion::SlowFast => {
                push("embed_slow.w".into(), e, f);
                push("embed_slow.b".into(), e, 1);
                push("embed_fast.w".into(), e, f);
                push("embed_fast.b".into(), e, 1);
            }
            Fusion::Dense | Fusion::Strided => {
                push("embed.w".into(), d, f);
                push("embed.b".into(), d, 1);
            }
        }
        for l in 0..cfg.num_layers {
            push(format!("layers.{l}.ln1.gamma"), d, 1);
            push(format!("layers.{l}.ln1.beta"), d, 1);
            for name in ["wq", "wk", "wv"] {
                push(format!("layers.{l}.attn.{name}"), d, d);
                push(format!("layers.{l}.attn.b{}", &name[1..]), d, 1);
            }
            push(format!("layers.{l}.attn.wo"), d, d);
            push(format!("layers.{l}.attn.bo"), d, 1);
            push(format!("layers.{l}.ln2.gamma"), d, 1);
            push(format!("layers.{l}.ln2.beta"), d, 1);
            push(format!("layers.{l}.mlp.w1"), m, d);
            push(format!("layers.{l}.mlp.b1"), m, 1);
            push(format!("layers.{l}.mlp.w2"), d, m);
            push(format!("layers.{l}.mlp.b2"), d, 1);
        }
        push("final_ln.gamma".into(), d, 1);
        push("final_ln.beta".into(), d, 1);
        push("head.w".into(), OUTPUT_DIM, d);
        push("head.b".into(), OUTPUT_DIM, 1);

        Layout { specs, total: offset }
    }

    /// Range of a named tensor. Panics on unknown names; all call sites use
    /// names generated by [`Layout::new`].
    pub fn range(&self, name: &str) -> Range<usize> {
        self.spec(name).range()
    }

    pub fn spec(&self, name: &str) -> &TensorSpec {
        self.specs
            .iter()
            .find(|s| s.name == name)
            .unwrap_or_else(|| panic!("unknown tensor {name:?}"))
    }
}

/// Flat parameter (or gradient) vector matching a [`Layout`].
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub data: Vec<T>,
}

impl<T: Real> Params<T> {
    pub fn zeros(layout: &Layout) -> Params<T> {
        Params { data: vec![T::zero(); layout.total] }
    }
}

/// Xavier-uniform initialization, deterministic in `cfg.seed`. Values are
/// drawn in `f64` and cast, so every scalar type sees the same draws.
pub fn init_params<T: Real>(cfg: &ModelConfig) -> Result<Params<T>, NetworkError> {
    cfg.validate()?;
    let layout = Layout::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut data = vec![T::zero(); layout.total];
    for spec in &layout.specs {
        if spec.cols > 1 {
            let limit = (6.0 / (spec.rows + spec.cols) as f64).sqrt();
            for v in &mut data[spec.range()] {
                *v = T::of(rng.gen_range(-limit..limit));
            }
        } else if spec.name.ends_with("gamma") {
            for v in &mut data[spec.range()] {
                *v = T::one();
            }
        }
        // Vectors other than LayerNorm gains stay zero.
    }
    Ok(Params { data })
}

/// Sinusoidal positional encoding value for token `pos`, channel `i`.
fn positional_encoding(pos: usize, i: usize, d: usize) -> f64 {
    let pair = (i / 2) as f64;
    let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
    if i % 2 == 0 {
        angle.sin()
    } else {
        angle.cos()
    }
}

struct LayerCache<T> {
    ln1_xhat: Vec<T>,
    ln1_inv: Vec<T>,
    ln1_out: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    /// `num_heads × L × L`, softmaxed.
    probs: Vec<T>,
    att: Vec<T>,
    ln2_xhat: Vec<T>,
    ln2_inv: Vec<T>,
    ln2_out: Vec<T>,
    h_pre: Vec<T>,
    h_act: Vec<T>,
}

/// Everything the backward pass needs from one forward evaluation.
pub struct ForwardCache<T> {
    /// Casted feature rows per token: primary stream (slow, or the only one).
    feats_a: Vec<T>,
    /// Fast-stream feature rows, slow/fast fusion only.
    feats_b: Option<Vec<T>>,
    layers: Vec<LayerCache<T>>,
    final_xhat: Vec<T>,
    final_inv: T,
    head_in: Vec<T>,
}

/// Model configuration bound to a parameter vector, with the layout and
/// positional-encoding table precomputed.
pub struct Network<T> {
    pub cfg: ModelConfig,
    pub layout: Layout,
    pub params: Params<T>,
    pe: Vec<T>,
}

impl<T: Real> Network<T> {
    pub fn new(cfg: ModelConfig, params: Params<T>) -> Result<Network<T>, NetworkError> {
        cfg.validate()?;
        let layout = Layout::new(&cfg);
        if params.data.len() != layout.total {
            return Err(NetworkError::InvalidConfig(format!(
                "parameter vector has {} values, layout needs {}",
                params.data.len(),
                layout.total
            )));
        }
        let (l, d) = (cfg.token_count(), cfg.token_dim());
        let mut pe = vec![T::zero(); l * d];
        for pos in 0..l {
            for i in 0..d {
                pe[pos * d + i] = T::of(positional_encoding(pos, i, d));
            }
        }
        Ok(Network { cfg, layout, params, pe })
    }

    /// Fresh network with seeded Xavier initialization.
    pub fn init(cfg: ModelConfig) -> Result<Network<T>, NetworkError> {
        let params = init_params(&cfg)?;
        Network::new(cfg, params)
    }

    pub fn from_weights(ws: &WeightSet) -> Result<Network<T>, NetworkError> {
        Network::new(ws.config.clone(), ws.to_params())
    }

    fn p(&self, name: &str) -> &[T] {
        &self.params.data[self.layout.range(name)]
    }

    /// Embeds, fuses and position-encodes the window into `L × D` tokens.
    /// Also returns the casted feature rows feeding each token.
    fn fuse(&self, frames: &[FeatureFrame]) -> (Vec<T>, Vec<T>, Option<Vec<T>>) {
        let (l, d, e, f) = (
            self.cfg.token_count(),
            self.cfg.token_dim(),
            self.cfg.embed_dim,
            self.cfg.feature_dim,
        );
        let cast_rows = |idx: &[usize]| -> Vec<T> {
            let mut out = vec![T::zero(); idx.len() * f];
            for (t, &fi) in idx.iter().enumerate() {
                for c in 0..f {
                    out[t * f + c] = T::of(frames[fi].0[c]);
                }
            }
            out
        };
        let mut x = vec![T::zero(); l * d];
        let (feats_a, feats_b) = match self.cfg.fusion {
            Fusion::SlowFast => {
                let slow = cast_rows(&slow_indices(self.cfg.tau));
                let fast = cast_rows(&fast_indices(self.cfg.tau));
                let (ws, bs) = (self.p("embed_slow.w"), self.p("embed_slow.b"));
                let (wf, bf) = (self.p("embed_fast.w"), self.p("embed_fast.b"));
                for t in 0..l {
                    let tok = &mut x[t * d..t * d + d];
                    linear_fwd(ws, bs, &slow[t * f..(t + 1) * f], &mut tok[..e]);
                    linear_fwd(wf, bf, &fast[t * f..(t + 1) * f], &mut tok[e..]);
                }
                (slow, Some(fast))
            }
            Fusion::Dense => {
                let idx: Vec<usize> = (0..self.cfg.tau).collect();
                let feats = cast_rows(&idx);
                let (w, b) = (self.p("embed.w"), self.p("embed.b"));
                for t in 0..l {
                    linear_fwd(w, b, &feats[t * f..(t + 1) * f], &mut x[t * d..t * d + d]);
                }
                (feats, None)
            }
            Fusion::Strided => {
                let feats = cast_rows(&slow_indices(self.cfg.tau));
                let (w, b) = (self.p("embed.w"), self.p("embed.b"));
                for t in 0..l {
                    linear_fwd(w, b, &feats[t * f..(t + 1) * f], &mut x[t * d..t * d + d]);
                }
                (feats, None)
            }
        };
        for (xi, pi) in x.iter_mut().zip(&self.pe) {
            *xi += *pi;
        }
        (x, feats_a, feats_b)
    }

    /// Runs the encoder over fused tokens `x`, mutating it layer by layer.
    /// Returns per-layer caches when `keep` is set.
    fn encode(&self, x: &mut [T], keep: bool) -> Vec<LayerCache<T>> {
        let (l, d, m) = (self.cfg.token_count(), self.cfg.token_dim(), self.cfg.mlp_hidden);
        let heads = self.cfg.num_heads;
        let dh = d / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let mut caches = Vec::new();

        for li in 0..self.cfg.num_layers {
            let name = |s: &str| format!("layers.{li}.{s}");
            let mut ln1_out = vec![T::zero(); l * d];
            let mut ln1_xhat = vec![T::zero(); l * d];
            let mut ln1_inv = vec![T::zero(); l];
            let (g1, b1) = (self.p(&name("ln1.gamma")), self.p(&name("ln1.beta")));
            for t in 0..l {
                ln1_inv[t] = layernorm_fwd(
                    &x[t * d..t * d + d],
                    g1,
                    b1,
                    &mut ln1_out[t * d..t * d + d],
                    &mut ln1_xhat[t * d..t * d + d],
                );
            }

            let mut q = vec![T::zero(); l * d];
            let mut k = vec![T::zero(); l * d];
            let mut v = vec![T::zero(); l * d];
            for (w, b, out) in [
                ("attn.wq", "attn.bq", &mut q),
                ("attn.wk", "attn.bk", &mut k),
                ("attn.wv", "attn.bv", &mut v),
            ] {
                let (w, b) = (self.p(&name(w)), self.p(&name(b)));
                linear_fwd_batch(w, b, &ln1_out, out, l);
            }

            let mut probs = vec![T::zero(); heads * l * l];
            let mut att = vec![T::zero(); l * d];
            for h in 0..heads {
                let hs = h * dh;
                for i in 0..l {
                    let row = &mut probs[(h * l + i) * l..(h * l + i + 1) * l];
                    let qi = &q[i * d + hs..i * d + hs + dh];
                    for j in 0..l {
                        row[j] = dot(qi, &k[j * d + hs..j * d + hs + dh]) * scale;
                    }
                    softmax_row(row);
                    let out = &mut att[i * d + hs..i * d + hs + dh];
                    for j in 0..l {
                        axpy(out, row[j], &v[j * d + hs..j * d + hs + dh]);
                    }
                }
            }

            let (wo, bo) = (self.p(&name("attn.wo")), self.p(&name("attn.bo")));
            let mut proj = vec![T::zero(); l * d];
            linear_fwd_batch(wo, bo, &att, &mut proj, l);
            for (xi, pi) in x.iter_mut().zip(&proj) {
                *xi += *pi;
            }

            let mut ln2_out = vec![T::zero(); l * d];
            let mut ln2_xhat = vec![T::zero(); l * d];
            let mut ln2_inv = vec![T::zero(); l];
            let (g2, b2) = (self.p(&name("ln2.gamma")), self.p(&name("ln2.beta")));
            for t in 0..l {
                ln2_inv[t] = layernorm_fwd(
                    &x[t * d..t * d + d],
                    g2,
                    b2,
                    &mut ln2_out[t * d..t * d + d],
                    &mut ln2_xhat[t * d..t * d + d],
                );
            }

            let (w1, b1m) = (self.p(&name("mlp.w1")), self.p(&name("mlp.b1")));
            let (w2, b2m) = (self.p(&name("mlp.w2")), self.p(&name("mlp.b2")));
            let mut h_pre = vec![T::zero(); l * m];
            let mut h_act = vec![T::zero(); l * m];
            let mut mlp_out = vec![T::zero(); l * d];
            linear_fwd_batch(w1, b1m, &ln2_out, &mut h_pre, l);
            T::gelu_map(&h_pre, &mut h_act);
            linear_fwd_batch(w2, b2m, &h_act, &mut mlp_out, l);
            for (xi, oi) in x.iter_mut().zip(&mlp_out) {
                *xi += *oi;
            }

            if keep {
                caches.push(LayerCache {
                    ln1_xhat,
                    ln1_inv,
                    ln1_out,
                    q,
                    k,
                    v,
                    probs,
                    att,
                    ln2_xhat,
                    ln2_inv,
                    ln2_out,
                    h_pre,
                    h_act,
                });
            }
        }
        caches
    }

    fn finish(&self, x: &[T]) -> (Vec<T>, Vec<T>, T, Vec<T>) {
        let (l, d) = (self.cfg.token_count(), self.cfg.token_dim());
        let last = &x[(l - 1) * d..l * d];
        let mut head_in = vec![T::zero(); d];
        let mut xhat = vec![T::zero(); d];
        let inv = layernorm_fwd(
            last,
            self.p("final_ln.gamma"),
            self.p("final_ln.beta"),
            &mut head_in,
            &mut xhat,
        );
        let mut out = vec![T::zero(); OUTPUT_DIM];
        linear_fwd(self.p("head.w"), self.p("head.b"), &head_in, &mut out);
        (out, xhat, inv, head_in)
    }

    fn check_window(&self, frames: &[FeatureFrame]) -> Result<(), NetworkError> {
        if frames.len() != self.cfg.tau {
            return Err(NetworkError::WindowLength { got: frames.len(), want: self.cfg.tau });
        }
        Ok(())
    }

    /// Inference-only forward pass.
    pub fn forward(&self, frames: &[FeatureFrame]) -> Result<Vec<T>, NetworkError> {
        self.check_window(frames)?;
        let (mut x, _, _) = self.fuse(frames);
        self.encode(&mut x, false);
        Ok(self.finish(&x).0)
    }

    /// Forward pass that keeps every intermediate needed by [`Network::backward`].
    pub fn forward_cached(
        &self,
        frames: &[FeatureFrame],
    ) -> Result<(Vec<T>, ForwardCache<T>), NetworkError> {
        self.check_window(frames)?;
        let (mut x, feats_a, feats_b) = self.fuse(frames);
        let layers = self.encode(&mut x, true);
        let (out, final_xhat, final_inv, head_in) = self.finish(&x);
        Ok((out, ForwardCache { feats_a, feats_b, layers, final_xhat, final_inv, head_in }))
    }

    /// Backpropagates `d_out` (gradient of a scalar in the 148 outputs) and
    /// accumulates parameter gradients into `grads`, which must match the
    /// layout. Inputs are not differentiated.
    pub fn backward(&self, cache: &ForwardCache<T>, d_out: &[T], grads: &mut Params<T>) {
        assert_eq!(d_out.len(), OUTPUT_DIM);
        assert_eq!(grads.data.len(), self.layout.total);
        let (l, d, m, f) = (
            self.cfg.token_count(),
            self.cfg.token_dim(),
            self.cfg.mlp_hidden,
            self.cfg.feature_dim,
        );
        let heads = self.cfg.num_heads;
        let dh = d / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let g = &mut grads.data;

        // Head and final LayerNorm.
        let mut d_head_in = vec![T::zero(); d];
        {
            let (dw, db) = pair(g, self.layout.range("head.w"), self.layout.range("head.b"));
            linear_bwd_params(dw, db, &cache.head_in, d_out);
        }
        linear_bwd_input(self.p("head.w"), d_out, &mut d_head_in);

        let mut d_x = vec![T::zero(); l * d];
        {
            let (dg, db) = pair(
                g,
                self.layout.range("final_ln.gamma"),
                self.layout.range("final_ln.beta"),
            );
            let mut d_last = vec![T::zero(); d];
            layernorm_bwd(
                &d_head_in,
                &cache.final_xhat,
                cache.final_inv,
                self.p("final_ln.gamma"),
                &mut d_last,
                dg,
                db,
            );
            d_x[(l - 1) * d..l * d].copy_from_slice(&d_last);
        }

        let mut dy = vec![T::zero(); d];
        let mut d_tok = vec![T::zero(); d];
        for li in (0..self.cfg.num_layers).rev() {
            let lc = &cache.layers[li];
            let name = |s: &str| format!("layers.{li}.{s}");

            // MLP block. x_out = x_mid + W2·gelu(W1·ln2(x_mid)).
            let mut d_h_act = vec![T::zero(); m];
            let mut d_h_pre = vec![T::zero(); m];
            let mut d_ln2out = vec![T::zero(); d];
            for t in 0..l {
                dy.copy_from_slice(&d_x[t * d..t * d + d]);
                d_h_act.iter_mut().for_each(|v| *v = T::zero());
                {
                    let (dw, db) =
                        pair(g, self.layout.range(&name("mlp.w2")), self.layout.range(&name("mlp.b2")));
                    linear_bwd_params(dw, db, &lc.h_act[t * m..t * m + m], &dy);
                }
                linear_bwd_input(self.p(&name("mlp.w2")), &dy, &mut d_h_act);
                for i in 0..m {
                    d_h_pre[i] = d_h_act[i] * gelu_grad(lc.h_pre[t * m + i]);
                }
                d_ln2out.iter_mut().for_each(|v| *v = T::zero());
                {
                    let (dw, db) =
                        pair(g, self.layout.range(&name("mlp.w1")), self.layout.range(&name("mlp.b1")));
                    linear_bwd_params(dw, db, &lc.ln2_out[t * d..t * d + d], &d_h_pre);
                }
                linear_bwd_input(self.p(&name("mlp.w1")), &d_h_pre, &mut d_ln2out);
                {
                    let (dg, db) = pair(
                        g,
                        self.layout.range(&name("ln2.gamma")),
                        self.layout.range(&name("ln2.beta")),
                    );
                    layernorm_bwd(
                        &d_ln2out,
                        &lc.ln2_xhat[t * d..t * d + d],
                        lc.ln2_inv[t],
                        self.p(&name("ln2.gamma")),
                        &mut d_tok,
                        dg,
                        db,
                    );
                }
                axpy(&mut d_x[t * d..t * d + d], T::one(), &d_tok);
            }

            // Attention block. x_mid = x_in + Wo·att(ln1(x_in)).
            let mut d_att = vec![T::zero(); l * d];
            for t in 0..l {
                dy.copy_from_slice(&d_x[t * d..t * d + d]);
                {
                    let (dw, db) = pair(
                        g,
                        self.layout.range(&name("attn.wo")),
                        self.layout.range(&name("attn.bo")),
                    );
                    linear_bwd_params(dw, db, &lc.att[t * d..t * d + d], &dy);
                }
                linear_bwd_input(self.p(&name("attn.wo")), &dy, &mut d_att[t * d..t * d + d]);
            }

            let mut d_q = vec![T::zero(); l * d];
            let mut d_k = vec![T::zero(); l * d];
            let mut d_v = vec![T::zero(); l * d];
            let mut dp = vec![T::zero(); l];
            let mut ds = vec![T::zero(); l];
            for h in 0..heads {
                let hs = h * dh;
                for i in 0..l {
                    let row = &lc.probs[(h * l + i) * l..(h * l + i + 1) * l];
                    let d_att_h = &d_att[i * d + hs..i * d + hs + dh];
                    for j in 0..l {
                        dp[j] = dot(d_att_h, &lc.v[j * d + hs..j * d + hs + dh]);
                        axpy(&mut d_v[j * d + hs..j * d + hs + dh], row[j], d_att_h);
                    }
                    softmax_row_bwd(row, &dp, &mut ds);
                    for j in 0..l {
                        let s = ds[j] * scale;
                        axpy(&mut d_q[i * d + hs..i * d + hs + dh], s, &lc.k[j * d + hs..j * d + hs + dh]);
                        axpy(&mut d_k[j * d + hs..j * d + hs + dh], s, &lc.q[i * d + hs..i * d + hs + dh]);
                    }
                }
            }

            let mut d_ln1out = vec![T::zero(); d];
            for t in 0..l {
                d_ln1out.iter_mut().for_each(|v| *v = T::zero());
                for (w, b, dsrc) in [
                    ("attn.wq", "attn.bq", &d_q),
                    ("attn.wk", "attn.bk", &d_k),
                    ("attn.wv", "attn.bv", &d_v),
                ] {
                    let d_slice = &dsrc[t * d..t * d + d];
                    {
                        let (dw, db) =
                            pair(g, self.layout.range(&name(w)), self.layout.range(&name(b)));
                        linear_bwd_params(dw, db, &lc.ln1_out[t * d..t * d + d], d_slice);
                    }
                    linear_bwd_input(self.p(&name(w)), d_slice, &mut d_ln1out);
                }
                {
                    let (dg, db) = pair(
                        g,
                        self.layout.range(&name("ln1.gamma")),
                        self.layout.range(&name("ln1.beta")),
                    );
                    layernorm_bwd(
                        &d_ln1out,
                        &lc.ln1_xhat[t * d..t * d + d],
                        lc.ln1_inv[t],
                        self.p(&name("ln1.gamma")),
                        &mut d_tok,
                        dg,
                        db,
                    );
                }
                axpy(&mut d_x[t * d..t * d + d], T::one(), &d_tok);
            }
        }

        // Embeddings. The positional encoding is an additive constant.
        let e = self.cfg.embed_dim;
        match self.cfg.fusion {
            Fusion::SlowFast => {
                let fb = cache.feats_b.as_ref().expect("slowfast cache has a fast stream");
                for t in 0..l {
                    {
                        let (dw, db) = pair(
                            g,
                            self.layout.range("embed_slow.w"),
                            self.layout.range("embed_slow.b"),
                        );
                        linear_bwd_params(dw, db, &cache.feats_a[t * f..(t + 1) * f], &d_x[t * d..t * d + e]);
                    }
                    let (dw, db) = pair(
                        g,
                        self.layout.range("embed_fast.w"),
                        self.layout.range("embed_fast.b"),
                    );
                    linear_bwd_params(dw, db, &fb[t * f..(t + 1) * f], &d_x[t * d + e..t * d + d]);
                }
            }
            Fusion::Dense | Fusion::Strided => {
                for t in 0..l {
                    let (dw, db) =
                        pair(g, self.layout.range("embed.w"), self.layout.range("embed.b"));
                    linear_bwd_params(dw, db, &cache.feats_a[t * f..(t + 1) * f], &d_x[t * d..t * d + d]);
                }
            }
        }
    }
}

/// Two disjoint mutable ranges of one slice. `a` must end at or before `b`.
fn pair<T>(v: &mut [T], a: Range<usize>, b: Range<usize>) -> (&mut [T], &mut [T]) {
    assert!(a.end <= b.start);
    let (left, right) = v.split_at_mut(b.start);
    (&mut left[a], &mut right[..b.end - b.start])
}

/// Structured view of the 148 network outputs.
#[derive(Debug, Clone)]
pub struct PoseOutput {
    pub root_orientation: Rot6d,
    pub local_rotations: [Rot6d; NUM_LOCAL_JOINTS],
    pub shape: ShapeParams,
}

/// Splits the raw output vector: `[0..6)` root 6D, `[6..132)` local 6D
/// rotations, `[132..148)` shape coefficients.
pub fn split_output<T: Real>(out: &[T]) -> PoseOutput {
    assert_eq!(out.len(), OUTPUT_DIM);
    let six = |at: usize| {
        let mut v = [0.0f64; 6];
        for (i, value) in v.iter_mut().enumerate() {
            *value = out[at + i].as_f64();
        }
        Rot6D::new(v)
    };
    let mut local = [Rot6d::identity(); NUM_LOCAL_JOINTS];
    for (j, rot) in local.iter_mut().enumerate() {
        *rot = six(6 + 6 * j);
    }
    let mut beta = [0.0f64; SHAPE_DIM];
    for (i, b) in beta.iter_mut().enumerate() {
        *b = out[6 + 6 * NUM_LOCAL_JOINTS + i].as_f64();
    }
    PoseOutput {
        root_orientation: six(0),
        local_rotations: local,
        shape: ShapeParams::new(beta),
    }
}

/// Matmul FLOPs for one window, counting a multiply-add as 2 FLOPs.
/// Biases, LayerNorm, softmax and GELU are excluded; they are linear in the
/// token count and negligible next to the matmuls.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlopBreakdown {
    pub embed: u64,
    pub attn_linear: u64,
    pub attn_quadratic: u64,
    pub mlp: u64,
    pub head: u64,
}

impl FlopBreakdown {
    pub fn total(&self) -> u64 {
        self.embed + self.attn_linear + self.attn_quadratic + self.mlp + self.head
    }
}

pub fn count_flops(cfg: &ModelConfig) -> FlopBreakdown {
    let l = cfg.token_count() as u64;
    let d = cfg.token_dim() as u64;
    let f = cfg.feature_dim as u64;
    let m = cfg.mlp_hidden as u64;
    let n = cfg.num_layers as u64;
    FlopBreakdown {
        // Per token every mode embeds F inputs into D outputs (slow/fast as
        // two F -> D/2 halves), so the cost is fusion-independent per token.
        embed: l * 2 * f * d,
        attn_linear: n * 8 * l * d * d,
        attn_quadratic: n * 4 * l * l * d,
        mlp: n * 4 * l * d * m,
        head: 2 * d * OUTPUT_DIM as u64,
    }
}

pub fn count_params(cfg: &ModelConfig) -> usize {
    Layout::new(cfg).total
}

/// Inference weights: the model config plus every tensor in layout order,
/// stored as `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSet {
    pub config: ModelConfig,
    pub data: Vec<f32>,
}

impl WeightSet {
    pub fn from_params<T: Real>(cfg: &ModelConfig, params: &Params<T>) -> WeightSet {
        let data = params.data.iter().map(|v| v.as_f64() as f32).collect();
        WeightSet { config: cfg.clone(), data }
    }

    /// Exact widening f32 -> T; inference from a `WeightSet` gives identical
    /// results before and after a save/load round trip.
    pub fn to_params<T: Real>(&self) -> Params<T> {
        Params { data: self.data.iter().map(|&v| T::of(v as f64)).collect() }
    }

    pub fn save(&self, path: &Path) -> Result<(), NetworkError> {
        let layout = Layout::new(&self.config);
        if self.data.len() != layout.total {
            return Err(NetworkError::ConfigMismatch(format!(
                "weight data has {} values, config layout needs {}",
                self.data.len(),
                layout.total
            )));
        }
        let cfg_json = serde_json::to_vec(&self.config)
            .map_err(|e| NetworkError::Format(e.to_string()))?;
        let mut buf = Vec::new();
        buf.extend_from_slice(WEIGHTS_MAGIC);
        buf.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
        buf.extend_from_slice(&FEATURE_LAYOUT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(cfg_json.len() as u32).to_le_bytes());
        buf.extend_from_slice(&cfg_json);
        buf.extend_from_slice(&(layout.specs.len() as u32).to_le_bytes());
        for spec in &layout.specs {
            buf.extend_from_slice(&(spec.name.len() as u16).to_le_bytes());
            buf.extend_from_slice(spec.name.as_bytes());
            buf.extend_from_slice(&(spec.rows as u32).to_le_bytes());
            buf.extend_from_slice(&(spec.cols as u32).to_le_bytes());
            for &v in &self.data[spec.range()] {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let tmp = path.with_extension("epwt.tmp");
        std::fs::write(&tmp, &buf)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<WeightSet, NetworkError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8], NetworkError> {
            let s = bytes
                .get(*pos..*pos + n)
                .ok_or_else(|| NetworkError::Format("unexpected end of file".into()))?;
            *pos += n;
            Ok(s)
        };
        let u32_at = |pos: &mut usize| -> Result<u32, NetworkError> {
            let b = take(pos, 4)?;
            Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        };

        if take(&mut pos, 4)? != WEIGHTS_MAGIC {
            return Err(NetworkError::Format("bad magic, not an .epwt file".into()));
        }
        let version = u32_at(&mut pos)?;
        if version != WEIGHTS_VERSION {
            return Err(NetworkError::ConfigMismatch(format!(
                "weight format version {version}, this build reads {WEIGHTS_VERSION}"
            )));
        }
        let flv = u32_at(&mut pos)?;
        if flv != FEATURE_LAYOUT_VERSION {
            return Err(NetworkError::ConfigMismatch(format!(
                "weights built for feature layout {flv}, this build uses {FEATURE_LAYOUT_VERSION}"
            )));
        }
        let json_len = u32_at(&mut pos)? as usize;
        let config: ModelConfig = serde_json::from_slice(take(&mut pos, json_len)?)
            .map_err(|e| NetworkError::Format(format!("bad config json: {e}")))?;
        config.validate()?;
        let layout = Layout::new(&config);
        let count = u32_at(&mut pos)? as usize;
        if count != layout.specs.len() {
            return Err(NetworkError::ConfigMismatch(format!(
                "file has {count} tensors, config implies {}",
                layout.specs.len()
            )));
        }
        let mut data = vec![0.0f32; layout.total];
        for spec in &layout.specs {
            let name_len = {
                let b = take(&mut pos, 2)?;
                u16::from_le_bytes([b[0], b[1]]) as usize
            };
            let nm = std::str::from_utf8(take(&mut pos, name_len)?)
                .map_err(|_| NetworkError::Format("tensor name is not utf-8".into()))?;
            if nm != spec.name {
                return Err(NetworkError::ConfigMismatch(format!(
                    "tensor {nm:?} where {:?} was expected",
                    spec.name
                )));
            }
            let rows = u32_at(&mut pos)? as usize;
            let cols = u32_at(&mut pos)? as usize;
            if rows != spec.rows || cols != spec.cols {
                return Err(NetworkError::ConfigMismatch(format!(
                    "tensor {} has shape {rows}x{cols}, config implies {}x{}",
                    spec.name, spec.rows, spec.cols
                )));
            }
            let raw = take(&mut pos, spec.len() * 4)?;
            for (i, chunk) in raw.chunks_exact(4).enumerate() {
                data[spec.offset + i] =
                    f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            }
        }
        if pos != bytes.len() {
            return Err(NetworkError::Format(format!(
                "{} trailing bytes after the last tensor",
                bytes.len() - pos
            )));
        }
        Ok(WeightSet { config, data })
    }
}
