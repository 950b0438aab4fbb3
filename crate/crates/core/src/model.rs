//! End-to-end scorers: encoders, fusion and a logistic head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio_encoder::{AudioConfig, AudioEncoder, StageShape};
use crate::error::{Error, Result};
use crate::fusion::{Fusion, FusionConfig, Unified};
use crate::graph::{Graph, Var};
use crate::image::{ImageConfig, ImageEncoder, ImageInput, ImagePathway};
use crate::nn::Linear;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::text::{TextConfig, TextEncoder, TextPair};

/// Which modalities reach the head, and how they are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Pairwise attentive fusion of text, audio and image.
    Jtav,
    /// Concatenation `t ⊕ a ⊕ v`.
    EarlyFusion,
    TextOnly,
    AudioOnly,
    ImageOnly,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Jtav,
        Variant::EarlyFusion,
        Variant::TextOnly,
        Variant::AudioOnly,
        Variant::ImageOnly,
    ];

    pub fn uses_text(self) -> bool {
        matches!(self, Variant::Jtav | Variant::EarlyFusion | Variant::TextOnly)
    }

    pub fn uses_audio(self) -> bool {
        matches!(self, Variant::Jtav | Variant::EarlyFusion | Variant::AudioOnly)
    }

    pub fn uses_image(self) -> bool {
        matches!(self, Variant::Jtav | Variant::EarlyFusion | Variant::ImageOnly)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Jtav => "jtav",
            Variant::EarlyFusion => "early-fusion",
            Variant::TextOnly => "text-only",
            Variant::AudioOnly => "audio-only",
            Variant::ImageOnly => "image-only",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown model variant '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub text: TextConfig,
    pub audio: AudioConfig,
    pub image: ImageConfig,
    pub fusion: FusionConfig,
}

impl ModelConfig {
    /// Downscaled configuration used for full-model finite-difference checks.
    pub fn tiny(variant: Variant) -> ModelConfig {
        Self {
            variant,
            text: TextConfig {
                embed_dim: 3,
                hidden: 2,
                max_words: 4,
                max_support: 2,
                train_embeddings: true,
            },
            audio: AudioConfig {
                bins: 8,
                channels: 2,
                kernel: 3,
                pools: vec![[(2, 2), (2, 2), (1, 1), (1, 1)], [(2, 1), (1, 1), (1, 1), (1, 1)]],
                rnn_hidden: 2,
                rnn_layers: 2,
                fc_hidden: 3,
                out_dim: 3,
                min_frames: 4,
            },
            image: ImageConfig {
                pathway: ImagePathway::Precomputed { feature_dim: 4 },
                out_dim: 3,
            },
            fusion: FusionConfig { k: 2, d_prime: 2 },
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Jtav,
            text: TextConfig::default(),
            audio: AudioConfig::default(),
            image: ImageConfig::default(),
            fusion: FusionConfig::default(),
        }
    }
}

/// The three encoded modality vectors; absent for modalities the variant ignores.
#[derive(Clone, Copy, Debug, Default)]
pub struct Features {
    pub t: Option<Var>,
    pub a: Option<Var>,
    pub v: Option<Var>,
}

pub struct Scored {
    pub prob: Var,
    pub logit: Var,
    pub fused: Option<Unified>,
    pub head_input: Var,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub text: Option<TextEncoder>,
    pub audio: Option<AudioEncoder>,
    pub image: Option<ImageEncoder>,
    pub fusion: Option<Fusion>,
    pub head: Linear,
}

impl Model {
    /// `embeddings` is required when the variant reads text.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: ModelConfig, embeddings: Option<Tensor>, rng: &mut R) -> Result<Self> {
        let v = config.variant;
        let text = if v.uses_text() {
            let e = embeddings.ok_or_else(|| Error::Config("text variant needs an embedding table".into()))?;
            Some(TextEncoder::new(store, "text", config.text, e, rng)?)
        } else {
            None
        };
        let audio = if v.uses_audio() {
            Some(AudioEncoder::new(store, "audio", config.audio.clone(), rng)?)
        } else {
            None
        };
        let image = if v.uses_image() {
            Some(ImageEncoder::new(store, "image", &config.image, rng)?)
        } else {
            None
        };
        let dt = 2 * config.text.hidden;
        let da = config.audio.out_dim;
        let dv = config.image.out_dim;
        let fusion = (v == Variant::Jtav).then(|| Fusion::new(store, "fusion", (dt, da, dv), config.fusion, rng));
        let head_in = match v {
            Variant::Jtav => 6 * config.fusion.d_prime,
            Variant::EarlyFusion => dt + da + dv,
            Variant::TextOnly => dt,
            Variant::AudioOnly => da,
            Variant::ImageOnly => dv,
        };
        let head = Linear::new(store, "head", head_in, 1, rng);
        Ok(Self {
            config,
            text,
            audio,
            image,
            fusion,
            head,
        })
    }

    pub fn encode_text(&self, g: &mut Graph<'_>, pair: &TextPair) -> Result<Option<Var>> {
        self.text.as_ref().map(|e| e.encode(g, pair).map(|o| o.t)).transpose()
    }

    /// `spec` is a `[1 × bins × frames]` spectrogram image.
    pub fn encode_audio(&self, g: &mut Graph<'_>, spec: &Tensor) -> Result<Option<Var>> {
        self.encode_audio_traced(g, spec).map(|o| o.map(|(a, _)| a))
    }

    pub fn encode_audio_traced(&self, g: &mut Graph<'_>, spec: &Tensor) -> Result<Option<(Var, Vec<StageShape>)>> {
        match &self.audio {
            Some(enc) => {
                let x = g.constant(spec.clone());
                let out = enc.encode(g, x)?;
                Ok(Some((out.a, out.trace)))
            }
            None => Ok(None),
        }
    }

    pub fn encode_image(&self, g: &mut Graph<'_>, image: &ImageInput) -> Result<Option<Var>> {
        self.image.as_ref().map(|e| e.encode(g, image)).transpose()
    }

    pub fn encode(&self, g: &mut Graph<'_>, pair: &TextPair, spec: &Tensor, image: &ImageInput) -> Result<Features> {
        Ok(Features {
            t: self.encode_text(g, pair)?,
            a: self.encode_audio(g, spec)?,
            v: self.encode_image(g, image)?,
        })
    }

    /// Matching probability from already-encoded features.
    pub fn score(&self, g: &mut Graph<'_>, f: Features) -> Result<Scored> {
        let need = |x: Option<Var>, m: &str| x.ok_or_else(|| Error::Contract(format!("missing {m} feature")));
        let (head_input, fused) = match self.config.variant {
            Variant::Jtav => {
                let fusion = self.fusion.as_ref().expect("jtav model has fusion");
                let u = fusion.fuse_all(g, need(f.t, "text")?, need(f.a, "audio")?, need(f.v, "image")?)?;
                (u.u, Some(u))
            }
            Variant::EarlyFusion => {
                let parts = [need(f.t, "text")?, need(f.a, "audio")?, need(f.v, "image")?];
                (g.concat(&parts, 0)?, None)
            }
            Variant::TextOnly => (need(f.t, "text")?, None),
            Variant::AudioOnly => (need(f.a, "audio")?, None),
            Variant::ImageOnly => (need(f.v, "image")?, None),
        };
        let logit = self.head.forward(g, head_input)?;
        let prob = g.sigmoid(logit)?;
        Ok(Scored {
            prob,
            logit,
            fused,
            head_input,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, pair: &TextPair, spec: &Tensor, image: &ImageInput) -> Result<Scored> {
        let f = self.encode(g, pair, spec, image)?;
        self.score(g, f)
    }
}
