//! The twin-input quality network.
//!
//! Both inputs go through the same strided convolutional encoder and the
//! same per-frame projection to 32 dimensions. The two frame sequences are
//! concatenated feature-wise and fed to a preference head (which input is
//! cleaner) and a relative-rating head (absolute MOS difference), each
//! reducing frames to a single output with attention pooling.

use nmrmos_autograd::{Graph, NnError, Real, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::EXCERPT_LEN;

/// Width of the per-frame projection shared by both inputs.
pub const EMBED_DIM: usize = 32;
/// Upper bound of the relative-rating head (largest |ΔMOS| on a 1..5 scale).
pub const MAX_RELATIVE: f64 = 4.0;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("input has {got} samples, expected {expected}")]
    InputLength { expected: usize, got: usize },
    #[error("pair inputs differ in length: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("attention pooling over an empty frame axis")]
    EmptyFrames,
    #[error("parameter {name}: expected shape {expected:?}, found {found:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub conv_channels: Vec<usize>,
    pub kernel_sizes: Vec<usize>,
    pub strides: Vec<usize>,
    pub embed_dim: usize,
    pub head_hidden: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            conv_channels: vec![48, 48, 48, 48],
            kernel_sizes: vec![10, 8, 4, 4],
            strides: vec![5, 4, 2, 2],
            embed_dim: EMBED_DIM,
            head_hidden: 600,
            seed: 0,
        }
    }
}

/// Name, shape and fan-in of one learnable tensor. Biases have fan-in 0.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub fan_in: usize,
}

impl ModelConfig {
    /// Two narrow conv layers and small heads, for gradient checks.
    pub fn reduced(seed: u64) -> Self {
        ModelConfig {
            conv_channels: vec![8, 8],
            kernel_sizes: vec![10, 8],
            strides: vec![5, 4],
            embed_dim: EMBED_DIM,
            head_hidden: 8,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.conv_channels.len();
        if n == 0 || self.kernel_sizes.len() != n || self.strides.len() != n {
            return Err(ModelError::InvalidConfig(format!(
                "conv_channels, kernel_sizes and strides need equal nonzero lengths ({}, {}, {})",
                n,
                self.kernel_sizes.len(),
                self.strides.len()
            )));
        }
        if self.embed_dim != EMBED_DIM {
            return Err(ModelError::InvalidConfig(format!(
                "embed_dim must be {EMBED_DIM}, got {}",
                self.embed_dim
            )));
        }
        let zero = |v: &[usize]| v.contains(&0);
        if zero(&self.conv_channels) || zero(&self.kernel_sizes) || zero(&self.strides) || self.head_hidden == 0 {
            return Err(ModelError::InvalidConfig("sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn encoder_channels(&self) -> usize {
        *self.conv_channels.last().unwrap_or(&0)
    }

    /// Number of encoder frames for an input of `len` samples.
    pub fn frames_for(&self, len: usize) -> Option<usize> {
        self.kernel_sizes.iter().zip(&self.strides).try_fold(len, |t, (&k, &s)| {
            (t >= k).then(|| (t - k) / s + 1)
        })
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let spec = |name: String, shape: Vec<usize>, fan_in: usize| ParamSpec { name, shape, fan_in };
        let mut out = Vec::new();
        let mut c_in = 1;
        for (i, (&c, &k)) in self.conv_channels.iter().zip(&self.kernel_sizes).enumerate() {
            out.push(spec(format!("encoder.{i}.weight"), vec![c, c_in, k], c_in * k));
            out.push(spec(format!("encoder.{i}.bias"), vec![c], 0));
            c_in = c;
        }
        out.push(spec("downsample.weight".into(), vec![self.embed_dim, c_in], c_in));
        out.push(spec("downsample.bias".into(), vec![self.embed_dim], 0));
        let pair = 2 * self.embed_dim;
        let h = self.head_hidden;
        for (head, width) in [("preference", 2), ("relative", 1)] {
            out.push(spec(format!("{head}.hidden.weight"), vec![h, pair], pair));
            out.push(spec(format!("{head}.hidden.bias"), vec![h], 0));
            out.push(spec(format!("{head}.out.weight"), vec![width, h], h));
            out.push(spec(format!("{head}.out.bias"), vec![width], 0));
            out.push(spec(format!("{head}.attention.weight"), vec![1, width], width));
            out.push(spec(format!("{head}.attention.bias"), vec![1], 0));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_specs().iter().map(|s| s.shape.iter().product::<usize>()).sum()
    }
}

/// Indices of the model parameters within the flat parameter list.
#[derive(Debug, Clone, Copy)]
struct Layout {
    layers: usize,
}

impl Layout {
    fn conv(self, i: usize) -> (usize, usize) {
        (2 * i, 2 * i + 1)
    }

    fn downsample(self) -> (usize, usize) {
        (2 * self.layers, 2 * self.layers + 1)
    }

    /// (hidden w, hidden b, out w, out b, attention w, attention b)
    fn head(self, relative: bool) -> [usize; 6] {
        let base = 2 * self.layers + 2 + if relative { 6 } else { 0 };
        std::array::from_fn(|k| base + k)
    }
}

/// Model parameters bound into a graph.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Binding over existing graph variables, in `param_specs` order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Graph handles produced by a pair forward pass.
#[derive(Debug, Clone, Copy)]
pub struct PairVars {
    /// Attention-pooled preference logits, `[2]`.
    pub logits: Var,
    /// Preference probabilities, `[2]`.
    pub p: Var,
    /// Relative rating in (0, 4), `[1]`.
    pub r: Var,
    pub attn_pref: Var,
    pub attn_rel: Var,
}

/// Values of one pair forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct PairOutput {
    /// Probability that the first input is cleaner, then the second.
    pub p: [f64; 2],
    pub r: f64,
    pub attn_pref: Vec<f64>,
    pub attn_rel: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<F> {
    config: ModelConfig,
    params: Vec<Tensor<F>>,
}

/// Half-width of the uniform weight initialization.
pub fn init_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

impl<F: Real> Model<F> {
    /// Fresh model: weights uniform in ±sqrt(6/fan_in) (He-uniform), biases zero.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = config
            .param_specs()
            .iter()
            .map(|spec| {
                let n: usize = spec.shape.iter().product();
                let data = if spec.fan_in == 0 {
                    vec![F::zero(); n]
                } else {
                    let bound = init_bound(spec.fan_in);
                    (0..n).map(|_| F::lit(rng.random_range(-bound..bound))).collect()
                };
                Tensor::new(&spec.shape, data).expect("spec shape")
            })
            .collect();
        Ok(Model { config, params })
    }

    pub fn from_params(config: ModelConfig, params: Vec<Tensor<F>>) -> Result<Self> {
        config.validate()?;
        let specs = config.param_specs();
        if specs.len() != params.len() {
            return Err(ModelError::InvalidConfig(format!(
                "expected {} parameter tensors, got {}",
                specs.len(),
                params.len()
            )));
        }
        for (spec, p) in specs.iter().zip(&params) {
            if spec.shape != p.shape() {
                return Err(ModelError::ParamShape {
                    name: spec.name.clone(),
                    expected: spec.shape.clone(),
                    found: p.shape().to_vec(),
                });
            }
        }
        Ok(Model { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor<F>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.params
    }

    pub fn param_names(&self) -> Vec<String> {
        self.config.param_specs().into_iter().map(|s| s.name).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    pub fn cast<G: Real>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            params: self.params.iter().map(|p| p.cast()).collect(),
        }
    }

    fn layout(&self) -> Layout {
        Layout {
            layers: self.config.conv_channels.len(),
        }
    }

    /// Adds every parameter to `g`, as gradient-receiving leaves when
    /// `trainable`.
    pub fn bind(&self, g: &mut Graph<F>, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| if trainable { g.param(p.clone()) } else { g.constant(p.clone()) })
            .collect();
        Bound { vars }
    }

    /// Convolution stack with ReLU; `wave` is `[1, samples]`, output `[channels, frames]`.
    pub fn encode_graph(&self, g: &mut Graph<F>, b: &Bound, wave: Var) -> Result<Var> {
        let layout = self.layout();
        let mut h = wave;
        for (i, &stride) in self.config.strides.iter().enumerate() {
            let (w, bias) = layout.conv(i);
            let y = g.conv1d(h, b.vars[w], b.vars[bias], stride)?;
            h = g.relu(y)?;
        }
        Ok(h)
    }

    /// Encoder followed by the shared per-frame projection: `[frames, 32]`.
    pub fn frames_graph(&self, g: &mut Graph<F>, b: &Bound, wave: Var) -> Result<Var> {
        let features = self.encode_graph(g, b, wave)?;
        let per_frame = g.transpose(features)?;
        let (w, bias) = self.layout().downsample();
        Ok(g.linear(per_frame, b.vars[w], b.vars[bias])?)
    }

    fn head_graph(&self, g: &mut Graph<F>, b: &Bound, joint: Var, relative: bool) -> Result<(Var, Var)> {
        let [hw, hb, ow, ob, aw, ab] = self.layout().head(relative);
        let hidden = g.linear(joint, b.vars[hw], b.vars[hb])?;
        let hidden = g.relu(hidden)?;
        let frames = g.linear(hidden, b.vars[ow], b.vars[ob])?;
        attention_pool_graph(g, frames, b.vars[aw], b.vars[ab])
    }

    /// Both heads on already projected frame sequences `[frames, 32]`.
    pub fn heads_graph(&self, g: &mut Graph<F>, b: &Bound, frames_i: Var, frames_j: Var) -> Result<PairVars> {
        let (ti, tj) = (g.shape(frames_i)[0], g.shape(frames_j)[0]);
        if ti != tj {
            return Err(ModelError::LengthMismatch { left: ti, right: tj });
        }
        let joint = g.concat(frames_i, frames_j, 1)?;
        let (logits, attn_pref) = self.head_graph(g, b, joint, false)?;
        let p = g.softmax(logits, 0)?;
        let (pooled, attn_rel) = self.head_graph(g, b, joint, true)?;
        let squashed = g.sigmoid(pooled)?;
        let r = g.scale(squashed, F::lit(MAX_RELATIVE))?;
        Ok(PairVars {
            logits,
            p,
            r,
            attn_pref,
            attn_rel,
        })
    }

    /// Full pair forward on raw waveforms of any equal length the encoder accepts.
    pub fn pair_graph(&self, g: &mut Graph<F>, b: &Bound, x_i: &[F], x_j: &[F]) -> Result<PairVars> {
        if x_i.len() != x_j.len() {
            return Err(ModelError::LengthMismatch {
                left: x_i.len(),
                right: x_j.len(),
            });
        }
        let wi = g.constant(Tensor::new(&[1, x_i.len()], x_i.to_vec())?);
        let wj = g.constant(Tensor::new(&[1, x_j.len()], x_j.to_vec())?);
        let fi = self.frames_graph(g, b, wi)?;
        let fj = self.frames_graph(g, b, wj)?;
        self.heads_graph(g, b, fi, fj)
    }

    fn check_canonical(wave: &[F]) -> Result<()> {
        if wave.len() != EXCERPT_LEN {
            return Err(ModelError::InputLength {
                expected: EXCERPT_LEN,
                got: wave.len(),
            });
        }
        Ok(())
    }

    /// Encoder features of a canonical 3 s excerpt as `[frames, channels]`.
    pub fn encode(&self, wave: &[F]) -> Result<Tensor<F>> {
        Self::check_canonical(wave)?;
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let w = g.constant(Tensor::new(&[1, wave.len()], wave.to_vec())?);
        let features = self.encode_graph(&mut g, &b, w)?;
        let t = g.transpose(features)?;
        Ok(g.value(t).clone())
    }

    /// Per-frame projection of `[frames, channels]` features to `[frames, 32]`.
    pub fn downsample(&self, features: &Tensor<F>) -> Result<Tensor<F>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let x = g.constant(features.clone());
        let (w, bias) = self.layout().downsample();
        let y = g.linear(x, b.vars[w], b.vars[bias])?;
        Ok(g.value(y).clone())
    }

    /// Projected frames of a canonical excerpt, `[frames, 32]`.
    pub fn frame_embeddings(&self, wave: &[F]) -> Result<Tensor<F>> {
        Self::check_canonical(wave)?;
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let w = g.constant(Tensor::new(&[1, wave.len()], wave.to_vec())?);
        let f = self.frames_graph(&mut g, &b, w)?;
        Ok(g.value(f).clone())
    }

    /// Heads only, on precomputed [`Model::frame_embeddings`].
    pub fn pair_heads(&self, frames_i: &Tensor<F>, frames_j: &Tensor<F>) -> Result<PairOutput> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let fi = g.constant(frames_i.clone());
        let fj = g.constant(frames_j.clone());
        let vars = self.heads_graph(&mut g, &b, fi, fj)?;
        Ok(read_pair(&g, &vars))
    }

    pub fn pair_forward(&self, x_i: &[F], x_j: &[F]) -> Result<PairOutput> {
        if x_i.len() != x_j.len() {
            return Err(ModelError::LengthMismatch {
                left: x_i.len(),
                right: x_j.len(),
            });
        }
        Self::check_canonical(x_i)?;
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let vars = self.pair_graph(&mut g, &b, x_i, x_j)?;
        Ok(read_pair(&g, &vars))
    }

    /// Quality embedding: encoder output averaged over frames.
    pub fn embed(&self, wave: &[F]) -> Result<Vec<F>> {
        Self::check_canonical(wave)?;
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let w = g.constant(Tensor::new(&[1, wave.len()], wave.to_vec())?);
        let features = self.encode_graph(&mut g, &b, w)?;
        let pooled = g.mean_axis(features, 1)?;
        Ok(g.value(pooled).data().to_vec())
    }
}

pub fn read_pair<F: Real>(g: &Graph<F>, vars: &PairVars) -> PairOutput {
    let p = g.value(vars.p).to_f64_vec();
    PairOutput {
        p: [p[0], p[1]],
        r: g.value(vars.r).data()[0].to_f64_lossy(),
        attn_pref: g.value(vars.attn_pref).to_f64_vec(),
        attn_rel: g.value(vars.attn_rel).to_f64_vec(),
    }
}

/// `a = softmax_t(frames · w + b)`, pooled = Σ_t a_t · frames_t.
///
/// Returns (pooled `[features]`, weights `[frames]`).
pub fn attention_pool_graph<F: Real>(g: &mut Graph<F>, frames: Var, w: Var, b: Var) -> Result<(Var, Var)> {
    let shape = g.shape(frames).to_vec();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(ModelError::EmptyFrames);
    }
    let (t, f) = (shape[0], shape[1]);
    let scores = g.linear(frames, w, b)?;
    let scores = g.reshape(scores, &[t])?;
    let weights = g.softmax(scores, 0)?;
    let row = g.reshape(weights, &[1, t])?;
    let pooled = g.matmul(row, frames)?;
    let pooled = g.reshape(pooled, &[f])?;
    Ok((pooled, weights))
}

/// Value-level attention pooling of `[frames, features]` with scorer `w`, `b`.
pub fn attention_pool<F: Real>(frames: &Tensor<F>, w: &[F], b: F) -> Result<(Vec<F>, Vec<F>)> {
    if frames.shape().len() != 2 || frames.shape()[0] == 0 {
        return Err(ModelError::EmptyFrames);
    }
    let f = frames.shape()[1];
    let mut g = Graph::new();
    let fr = g.constant(frames.clone());
    let wv = g.constant(Tensor::new(&[1, f], w.to_vec())?);
    let bv = g.constant(Tensor::scalar(b));
    let bv = g.reshape(bv, &[1])?;
    let (pooled, weights) = attention_pool_graph(&mut g, fr, wv, bv)?;
    Ok((g.value(pooled).data().to_vec(), g.value(weights).data().to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_lands_near_120k_parameters() {
        let cfg = ModelConfig::default();
        let count = cfg.param_count();
        assert!((100_000..=140_000).contains(&count), "{count}");
        assert_eq!(cfg.frames_for(EXCERPT_LEN), Some(598));
        let model = Model::<f32>::new(cfg).unwrap();
        assert_eq!(model.param_count(), count);
    }

    #[test]
    fn config_validation() {
        let mut cfg = ModelConfig::default();
        cfg.strides.pop();
        assert!(matches!(cfg.validate(), Err(ModelError::InvalidConfig(_))));
        let cfg = ModelConfig {
            embed_dim: 16,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn initialization_is_seeded() {
        let a = Model::<f32>::new(ModelConfig::reduced(3)).unwrap();
        let b = Model::<f32>::new(ModelConfig::reduced(3)).unwrap();
        let c = Model::<f32>::new(ModelConfig::reduced(4)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        for (spec, p) in a.config().param_specs().iter().zip(a.params()) {
            if spec.fan_in == 0 {
                assert!(p.data().iter().all(|&v| v == 0.0));
            } else {
                let bound = init_bound(spec.fan_in) as f32;
                assert!(p.data().iter().all(|&v| v.abs() <= bound));
            }
        }
    }

    #[test]
    fn uniform_attention_gives_frame_mean() {
        let frames = Tensor::<f64>::from_f64(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 9.0]).unwrap();
        let (pooled, weights) = attention_pool(&frames, &[0.0, 0.0], 0.7).unwrap();
        assert_eq!(pooled, vec![3.0, 5.0]);
        assert!(weights.iter().all(|&w| (w - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn single_frame_pools_to_itself() {
        let frames = Tensor::<f64>::from_f64(&[1, 3], &[0.5, -1.0, 2.0]).unwrap();
        let (pooled, weights) = attention_pool(&frames, &[0.3, 0.1, -0.2], 0.0).unwrap();
        assert_eq!(pooled, vec![0.5, -1.0, 2.0]);
        assert_eq!(weights, vec![1.0]);
    }

    #[test]
    fn saturated_attention_selects_one_frame() {
        // frame 1 scores +100 above the rest through a unit scorer on feature 0
        let frames = Tensor::<f64>::from_f64(&[3, 2], &[0.0, 1.0, 100.0, 2.0, 0.0, 3.0]).unwrap();
        let (pooled, _) = attention_pool(&frames, &[1.0, 0.0], 0.0).unwrap();
        assert!((pooled[0] - 100.0).abs() < 1e-3 && (pooled[1] - 2.0).abs() < 1e-3);
    }

    #[test]
    fn empty_frames_are_rejected() {
        let frames = Tensor::<f64>::zeros(&[0, 2]);
        assert!(matches!(attention_pool(&frames, &[0.0, 0.0], 0.0), Err(ModelError::EmptyFrames)));
    }

    #[test]
    fn zero_features_with_zero_bias_downsample_to_zero() {
        let model = Model::<f32>::new(ModelConfig::reduced(1)).unwrap();
        let out = model.downsample(&Tensor::zeros(&[5, 8])).unwrap();
        assert_eq!(out.shape(), &[5, EMBED_DIM]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_input_length_is_rejected() {
        let model = Model::<f32>::new(ModelConfig::reduced(1)).unwrap();
        assert!(matches!(
            model.encode(&[0.0; 100]),
            Err(ModelError::InputLength { expected: EXCERPT_LEN, got: 100 })
        ));
        let x = vec![0.0; EXCERPT_LEN];
        assert!(matches!(
            model.pair_forward(&x, &x[..100]),
            Err(ModelError::LengthMismatch { .. })
        ));
    }
}
