//! The embedding network: audio/visual encoders, cross-attention fusion,
//! projectors, and the two embedding layers into the common space.

mod checkpoint;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};

use std::fmt;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::gradcore::{Graph, Tensor, TensorError};

/// Which modality branches take part in training and inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnimodalMode {
    Both,
    AudioOnly,
    VisualOnly,
}

impl UnimodalMode {
    pub fn as_u32(self) -> u32 {
        match self {
            Self::Both => 0,
            Self::AudioOnly => 1,
            Self::VisualOnly => 2,
        }
    }

    pub fn from_u32(v: u32) -> Option<Self> {
        match v {
            0 => Some(Self::Both),
            1 => Some(Self::AudioOnly),
            2 => Some(Self::VisualOnly),
            _ => None,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "both" => Some(Self::Both),
            "audio-only" | "audio_only" => Some(Self::AudioOnly),
            "visual-only" | "visual_only" => Some(Self::VisualOnly),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Both => "both",
            Self::AudioOnly => "audio-only",
            Self::VisualOnly => "visual-only",
        }
    }
}

/// Structural hyperparameters of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub audio_dim: usize,
    pub visual_dim: usize,
    pub text_dim: usize,
    pub hidden_dim: usize,
    pub common_dim: usize,
    pub dropout_enc: f64,
    pub dropout_proj: f64,
    pub dropout_dec: f64,
    pub unimodal: UnimodalMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            audio_dim: 64,
            visual_dim: 64,
            text_dim: 32,
            hidden_dim: 64,
            common_dim: 32,
            dropout_enc: 0.1,
            dropout_proj: 0.1,
            dropout_dec: 0.1,
            unimodal: UnimodalMode::Both,
        }
    }
}

/// Errors from model construction, forwarding, and checkpoint handling.
#[derive(Debug)]
pub enum ModelError {
    Config(String),
    Tensor(TensorError),
    Checkpoint(String),
    Io(String),
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Config(d) => write!(f, "invalid model config: {d}"),
            Self::Tensor(e) => write!(f, "{e}"),
            Self::Checkpoint(d) => write!(f, "bad checkpoint: {d}"),
            Self::Io(d) => write!(f, "checkpoint i/o: {d}"),
        }
    }
}

impl std::error::Error for ModelError {}

impl From<TensorError> for ModelError {
    fn from(e: TensorError) -> Self {
        Self::Tensor(e)
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        for (name, v) in [
            ("audio_dim", self.audio_dim),
            ("visual_dim", self.visual_dim),
            ("text_dim", self.text_dim),
            ("hidden_dim", self.hidden_dim),
            ("common_dim", self.common_dim),
        ] {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be ≥ 1")));
            }
        }
        for (name, p) in [
            ("dropout_enc", self.dropout_enc),
            ("dropout_proj", self.dropout_proj),
            ("dropout_dec", self.dropout_dec),
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(ModelError::Config(format!("{name} = {p} outside [0, 1)")));
            }
        }
        Ok(())
    }

    /// Fan-in of the fused embedding layer; the fusion width collapses to one
    /// branch in unimodal modes.
    fn fused_dim(&self) -> usize {
        match self.unimodal {
            UnimodalMode::Both => 2 * self.hidden_dim,
            _ => self.hidden_dim,
        }
    }
}

/// Linear → ReLU → Dropout → Linear.
struct Mlp {
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
    dropout: f64,
}

impl Mlp {
    fn init(
        rng: &mut ChaCha8Rng,
        input: usize,
        hidden: usize,
        output: usize,
        dropout: f64,
    ) -> Self {
        Self {
            w1: xavier(rng, input, hidden),
            b1: Tensor::zeros(vec![hidden]),
            w2: xavier(rng, hidden, output),
            b2: Tensor::zeros(vec![output]),
            dropout,
        }
    }

    fn forward<R: Rng>(
        &self,
        g: &mut Graph,
        x: &Tensor,
        dropout_rng: Option<&mut R>,
    ) -> Result<Tensor, TensorError> {
        let h = g.matmul(x, &self.w1)?;
        let h = g.add_bias(&h, &self.b1)?;
        let h = g.relu(&h)?;
        let h = match dropout_rng {
            Some(rng) => g.dropout(&h, self.dropout, rng)?,
            None => h,
        };
        let out = g.matmul(&h, &self.w2)?;
        g.add_bias(&out, &self.b2)
    }

    fn params(&self) -> [(&'static str, &Tensor); 4] {
        [
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
        ]
    }
}

/// Scaled-uniform initialization with bound sqrt(6 / (fan_in + fan_out)).
fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data: Vec<f64> = (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    Tensor::from_vec(vec![fan_in, fan_out], data).expect("consistent by construction")
}

/// Per-query attention weights over the {audio, visual} token pair. Each
/// query's two weights sum to 1.
pub struct AttentionWeights {
    pub audio_on_audio: Tensor,
    pub audio_on_visual: Tensor,
    pub visual_on_audio: Tensor,
    pub visual_on_visual: Tensor,
}

/// Single-head scaled dot-product attention across the two modality tokens of
/// each sample, with residual connection.
struct CrossAttention {
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
}

impl CrossAttention {
    fn init(rng: &mut ChaCha8Rng, hidden: usize) -> Self {
        Self {
            wq: xavier(rng, hidden, hidden),
            wk: xavier(rng, hidden, hidden),
            wv: xavier(rng, hidden, hidden),
        }
    }

    fn apply(
        &self,
        g: &mut Graph,
        audio: &Tensor,
        visual: &Tensor,
    ) -> Result<(Tensor, Tensor, AttentionWeights), TensorError> {
        if audio.shape() != visual.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "cross_attention",
                left: audio.shape(),
                right: visual.shape(),
            });
        }
        let b = audio.rows();
        let h = audio.cols();
        let inv_sqrt_h = 1.0 / (h as f64).sqrt();

        let qa = g.matmul(audio, &self.wq)?;
        let qv = g.matmul(visual, &self.wq)?;
        let ka = g.matmul(audio, &self.wk)?;
        let kv = g.matmul(visual, &self.wk)?;
        let va = g.matmul(audio, &self.wv)?;
        let vv = g.matmul(visual, &self.wv)?;

        // per-sample pair scores s_qk = ⟨q, k⟩ / √H
        let score = |q: &Tensor, k: &Tensor, g: &mut Graph| -> Result<Tensor, TensorError> {
            let prod = g.mul(q, k)?;
            let s = g.row_sum(&prod)?;
            g.scale(&s, inv_sqrt_h)
        };
        let s_aa = score(&qa, &ka, g)?;
        let s_av = score(&qa, &kv, g)?;
        let s_va = score(&qv, &ka, g)?;
        let s_vv = score(&qv, &kv, g)?;

        // two-way softmax per query: σ(s1 − s2) and its exact complement
        let ones = Tensor::from_vec(vec![b], vec![1.0; b])?;
        let d_a = g.sub(&s_aa, &s_av)?;
        let w_aa = g.sigmoid(&d_a)?;
        let w_av = g.sub(&ones, &w_aa)?;
        let d_v = g.sub(&s_vv, &s_va)?;
        let w_vv = g.sigmoid(&d_v)?;
        let w_va = g.sub(&ones, &w_vv)?;

        let mix_a1 = g.scale_rows(&va, &w_aa)?;
        let mix_a2 = g.scale_rows(&vv, &w_av)?;
        let mix_a = g.add(&mix_a1, &mix_a2)?;
        let out_a = g.add(audio, &mix_a)?;

        let mix_v1 = g.scale_rows(&va, &w_va)?;
        let mix_v2 = g.scale_rows(&vv, &w_vv)?;
        let mix_v = g.add(&mix_v1, &mix_v2)?;
        let out_v = g.add(visual, &mix_v)?;

        Ok((
            out_a,
            out_v,
            AttentionWeights {
                audio_on_audio: w_aa,
                audio_on_visual: w_av,
                visual_on_audio: w_va,
                visual_on_visual: w_vv,
            },
        ))
    }
}

/// Everything the forward pass produces for one batch.
pub struct ForwardOutput {
    /// Post-attention, projected audio features (absent in visual-only mode).
    pub theta_a: Option<Tensor>,
    /// Post-attention, projected visual features (absent in audio-only mode).
    pub theta_v: Option<Tensor>,
    /// Fused feature entering the audio-visual embedding layer.
    pub theta_av: Tensor,
    /// Common-space audio-visual embeddings, B×common.
    pub rho_av: Tensor,
    /// Common-space knowledge embeddings for the requested rows, C×common.
    pub rho_t: Tensor,
    /// Pair-attention weights (present only in bimodal mode).
    pub attention: Option<AttentionWeights>,
}

/// The audio-visual half of the forward pass.
pub struct AvBranch {
    pub theta_a: Option<Tensor>,
    pub theta_v: Option<Tensor>,
    pub theta_av: Tensor,
    pub rho_av: Tensor,
    pub attention: Option<AttentionWeights>,
}

/// The full parameter set with its configuration and init seed.
pub struct KdaModel {
    pub config: ModelConfig,
    pub seed: u64,
    a_enc: Mlp,
    v_enc: Mlp,
    attn: CrossAttention,
    a_proj: Mlp,
    v_proj: Mlp,
    e_av: Mlp,
    e_t: Mlp,
}

impl KdaModel {
    /// Deterministically initialize all parameters from the seed: weights
    /// scaled-uniform, biases zero.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = config.hidden_dim;
        let a_enc = Mlp::init(&mut rng, config.audio_dim, h, h, config.dropout_enc);
        let v_enc = Mlp::init(&mut rng, config.visual_dim, h, h, config.dropout_enc);
        let attn = CrossAttention::init(&mut rng, h);
        let a_proj = Mlp::init(&mut rng, h, h, h, config.dropout_proj);
        let v_proj = Mlp::init(&mut rng, h, h, h, config.dropout_proj);
        let e_av = Mlp::init(
            &mut rng,
            config.fused_dim(),
            h,
            config.common_dim,
            config.dropout_dec,
        );
        let e_t = Mlp::init(
            &mut rng,
            config.text_dim,
            h,
            config.common_dim,
            config.dropout_dec,
        );
        Ok(Self {
            config,
            seed,
            a_enc,
            v_enc,
            attn,
            a_proj,
            v_proj,
            e_av,
            e_t,
        })
    }

    /// All parameters in canonical order.
    pub fn named_parameters(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        let blocks: [(&str, &Mlp); 6] = [
            ("a_enc", &self.a_enc),
            ("v_enc", &self.v_enc),
            ("a_proj", &self.a_proj),
            ("v_proj", &self.v_proj),
            ("e_av", &self.e_av),
            ("e_t", &self.e_t),
        ];
        for (prefix, mlp) in &blocks[..2] {
            for (name, t) in mlp.params() {
                out.push((format!("{prefix}.{name}"), t.clone()));
            }
        }
        out.push(("attn.wq".to_string(), self.attn.wq.clone()));
        out.push(("attn.wk".to_string(), self.attn.wk.clone()));
        out.push(("attn.wv".to_string(), self.attn.wv.clone()));
        for (prefix, mlp) in &blocks[2..] {
            for (name, t) in mlp.params() {
                out.push((format!("{prefix}.{name}"), t.clone()));
            }
        }
        out
    }

    /// Parameters that participate in the configured mode; the other branch
    /// and the attention block are excluded in unimodal modes.
    pub fn trainable_parameters(&self) -> Vec<(String, Tensor)> {
        let skip: &[&str] = match self.config.unimodal {
            UnimodalMode::Both => &[],
            UnimodalMode::AudioOnly => &["v_enc", "v_proj", "attn"],
            UnimodalMode::VisualOnly => &["a_enc", "a_proj", "attn"],
        };
        self.named_parameters()
            .into_iter()
            .filter(|(name, _)| !skip.iter().any(|s| name.starts_with(s)))
            .collect()
    }

    /// Copy all parameter values out (for best-epoch snapshots).
    pub fn snapshot(&self) -> Vec<Vec<f64>> {
        self.named_parameters()
            .iter()
            .map(|(_, t)| t.to_vec())
            .collect()
    }

    /// Restore parameter values captured by [`Self::snapshot`].
    pub fn restore(&mut self, snapshot: &[Vec<f64>]) -> Result<(), ModelError> {
        let params = self.named_parameters();
        if params.len() != snapshot.len() {
            return Err(ModelError::Config(format!(
                "snapshot has {} parameters, model has {}",
                snapshot.len(),
                params.len()
            )));
        }
        for ((_, t), values) in params.iter().zip(snapshot) {
            t.set_data(values.clone())?;
        }
        Ok(())
    }

    /// Cross-attention over the two modality token streams.
    pub fn cross_attention(
        &self,
        g: &mut Graph,
        audio_tokens: &Tensor,
        visual_tokens: &Tensor,
    ) -> Result<(Tensor, Tensor, AttentionWeights), TensorError> {
        self.attn.apply(g, audio_tokens, visual_tokens)
    }

    /// Embed knowledge rows (R×text_dim) into the common space via E_t.
    pub fn embed_knowledge<R: Rng>(
        &self,
        g: &mut Graph,
        knowledge: &Tensor,
        dropout_rng: Option<&mut R>,
    ) -> Result<Tensor, TensorError> {
        self.check_width("knowledge", knowledge, self.config.text_dim)?;
        self.e_t.forward(g, knowledge, dropout_rng)
    }

    fn check_width(&self, what: &'static str, t: &Tensor, want: usize) -> Result<(), TensorError> {
        let shape = t.shape();
        if shape.len() != 2 || shape[1] != want {
            return Err(TensorError::ShapeMismatch {
                op: "forward",
                left: shape,
                right: vec![t.rows(), want],
            });
        }
        let _ = what;
        Ok(())
    }

    /// Training-mode forward pass; dropout is driven by `rng`.
    pub fn forward_train<R: Rng>(
        &self,
        g: &mut Graph,
        audio: &Tensor,
        visual: &Tensor,
        knowledge: &Tensor,
        rng: &mut R,
    ) -> Result<ForwardOutput, TensorError> {
        self.forward_impl(g, audio, visual, knowledge, Some(rng))
    }

    /// Deterministic evaluation-mode forward pass (no dropout).
    pub fn forward_eval(
        &self,
        g: &mut Graph,
        audio: &Tensor,
        visual: &Tensor,
        knowledge: &Tensor,
    ) -> Result<ForwardOutput, TensorError> {
        self.forward_impl::<ChaCha8Rng>(g, audio, visual, knowledge, None)
    }

    fn forward_impl<R: Rng>(
        &self,
        g: &mut Graph,
        audio: &Tensor,
        visual: &Tensor,
        knowledge: &Tensor,
        mut rng: Option<&mut R>,
    ) -> Result<ForwardOutput, TensorError> {
        let rho_t = self.embed_knowledge(g, knowledge, rng.as_deref_mut())?;
        let av = self.embed_features(g, audio, visual, rng)?;
        Ok(ForwardOutput {
            theta_a: av.theta_a,
            theta_v: av.theta_v,
            theta_av: av.theta_av,
            rho_av: av.rho_av,
            rho_t,
            attention: av.attention,
        })
    }

    /// Run only the audio-visual branch: encoders → cross-attention →
    /// projectors → fusion → E_av. Inputs of modalities excluded by the
    /// unimodal mode are never read.
    pub fn embed_features<R: Rng>(
        &self,
        g: &mut Graph,
        audio: &Tensor,
        visual: &Tensor,
        mut rng: Option<&mut R>,
    ) -> Result<AvBranch, TensorError> {
        let (theta_a, theta_v, theta_av, attention) = match self.config.unimodal {
            UnimodalMode::Both => {
                self.check_width("audio", audio, self.config.audio_dim)?;
                self.check_width("visual", visual, self.config.visual_dim)?;
                let a0 = self.a_enc.forward(g, audio, rng.as_deref_mut())?;
                let v0 = self.v_enc.forward(g, visual, rng.as_deref_mut())?;
                let (att_a, att_v, weights) = self.attn.apply(g, &a0, &v0)?;
                let theta_a = self.a_proj.forward(g, &att_a, rng.as_deref_mut())?;
                let theta_v = self.v_proj.forward(g, &att_v, rng.as_deref_mut())?;
                let theta_av = g.concat_cols(&theta_a, &theta_v)?;
                (Some(theta_a), Some(theta_v), theta_av, Some(weights))
            }
            UnimodalMode::AudioOnly => {
                self.check_width("audio", audio, self.config.audio_dim)?;
                let a0 = self.a_enc.forward(g, audio, rng.as_deref_mut())?;
                let theta_a = self.a_proj.forward(g, &a0, rng.as_deref_mut())?;
                (Some(theta_a.clone()), None, theta_a, None)
            }
            UnimodalMode::VisualOnly => {
                self.check_width("visual", visual, self.config.visual_dim)?;
                let v0 = self.v_enc.forward(g, visual, rng.as_deref_mut())?;
                let theta_v = self.v_proj.forward(g, &v0, rng.as_deref_mut())?;
                (None, Some(theta_v.clone()), theta_v, None)
            }
        };
        let rho_av = self.e_av.forward(g, &theta_av, rng)?;
        Ok(AvBranch {
            theta_a,
            theta_v,
            theta_av,
            rho_av,
            attention,
        })
    }
}

/// Dot-product class logits: entry (b, k) = ⟨rho_t[k], rho_av[b]⟩.
pub fn class_logits(g: &mut Graph, rho_av: &Tensor, rho_t: &Tensor) -> Result<Tensor, TensorError> {
    if rho_av.cols() != rho_t.cols() {
        return Err(TensorError::ShapeMismatch {
            op: "class_logits",
            left: rho_av.shape(),
            right: rho_t.shape(),
        });
    }
    let rho_t_t = g.transpose(rho_t)?;
    g.matmul(rho_av, &rho_t_t)
}

#[cfg(test)]
pub(crate) mod tests_support {
    use super::{ModelConfig, UnimodalMode};

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            audio_dim: 5,
            visual_dim: 4,
            text_dim: 3,
            hidden_dim: 6,
            common_dim: 4,
            dropout_enc: 0.0,
            dropout_proj: 0.0,
            dropout_dec: 0.0,
            unimodal: UnimodalMode::Both,
        }
    }
}
