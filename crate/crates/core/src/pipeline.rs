//! Tasks, presets and evaluation tying the model to a loaded dataset.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::SpecKind;
use crate::audio_encoder::AudioConfig;
use crate::corpus::{Dataset, Split};
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::graph::{Graph, Mode, Var};
use crate::image::{ImageConfig, ImagePathway};
use crate::metrics::{metrics_retrieval, metrics_sentiment, rank_candidates, EvalReport, RecallAt};
use crate::model::{Features, Model, ModelConfig, Variant};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::text::{embedding_matrix, TextConfig, TextPair, Vocabulary};
use crate::train::{sample_negative, Example, Task};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Published dimensions.
    Full,
    /// Small dimensions for single-core runs.
    Desk,
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Preset::Full),
            "desk" => Ok(Preset::Desk),
            _ => Err(Error::Config(format!("unknown preset '{s}'"))),
        }
    }
}

pub fn preset_config(preset: Preset, variant: Variant, image: ImagePathway) -> ModelConfig {
    match preset {
        Preset::Full => ModelConfig {
            variant,
            image: ImageConfig { pathway: image, out_dim: 100 },
            ..ModelConfig::default()
        },
        Preset::Desk => ModelConfig {
            variant,
            text: TextConfig {
                embed_dim: 16,
                hidden: 8,
                max_words: 16,
                max_support: 5,
                train_embeddings: false,
            },
            audio: AudioConfig {
                channels: 4,
                rnn_hidden: 8,
                fc_hidden: 16,
                out_dim: 16,
                ..AudioConfig::default()
            },
            image: ImageConfig { pathway: image, out_dim: 16 },
            fusion: FusionConfig { k: 8, d_prime: 8 },
        },
    }
}

/// Everything besides the weights needed to rebuild a trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub spec_kind: SpecKind,
    pub vocab: Vocabulary,
}

impl ModelBundle {
    /// Sidecar path next to a checkpoint: `model.ckpt` → `model.ckpt.json`.
    pub fn sidecar(checkpoint: &Path) -> PathBuf {
        let mut s = checkpoint.as_os_str().to_owned();
        s.push(".json");
        PathBuf::from(s)
    }

    pub fn save(&self, checkpoint: &Path) -> Result<()> {
        let path = Self::sidecar(checkpoint);
        let text = serde_json::to_string_pretty(self)? + "\n";
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(checkpoint: &Path) -> Result<Self> {
        let path = Self::sidecar(checkpoint);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Seeded initialization; the embedding table is random unless `pretrained` rows are given.
    pub fn build(
        &self,
        seed: u64,
        pretrained: Option<&std::collections::HashMap<String, Vec<f64>>>,
    ) -> Result<(ParamStore, Model)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let emb = self
            .config
            .variant
            .uses_text()
            .then(|| embedding_matrix(&self.vocab, self.config.text.embed_dim, pretrained, &mut rng));
        let model = Model::new(&mut store, self.config.clone(), emb, &mut rng)?;
        Ok((store, model))
    }
}

fn text_pair(model: &Model, data: &Dataset, query: usize, song: usize) -> Result<TextPair> {
    let cfg = &model.config.text;
    TextPair::from_parts(
        &data.songs[song].lyrics,
        data.items[query].caption.as_deref(),
        cfg.max_words,
        cfg.max_support,
    )
}

/// Probability that item `query` goes with song `song`.
pub fn score_pair(model: &Model, data: &Dataset, g: &mut Graph<'_>, query: usize, song: usize) -> Result<Var> {
    let pair = text_pair(model, data, query, song)?;
    let s = model.forward(g, &pair, &data.songs[song].spec, &data.items[query].image)?;
    Ok(s.prob)
}

fn require_split(data: &Dataset, split: Split, what: &'static str) -> Result<Vec<usize>> {
    let idx = data.split(split);
    if idx.is_empty() {
        return Err(Error::EmptyInput(what));
    }
    Ok(idx)
}

pub struct SentimentTask<'a> {
    pub model: &'a Model,
    pub data: &'a Dataset,
    train: Vec<usize>,
    val: Vec<Example>,
}

impl<'a> SentimentTask<'a> {
    pub fn new(model: &'a Model, data: &'a Dataset) -> Result<Self> {
        let label = |i: usize| {
            data.items[i]
                .label
                .ok_or_else(|| Error::Contract(format!("item {} has no label", data.items[i].id)))
        };
        let train = require_split(data, Split::Train, "training split")?;
        for &i in &train {
            label(i)?;
        }
        let val = require_split(data, Split::Val, "validation split")?
            .into_iter()
            .map(|i| {
                Ok(Example {
                    query: i,
                    candidate: data.items[i].song,
                    label: label(i)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { model, data, train, val })
    }
}

impl Task for SentimentTask<'_> {
    fn prob(&self, g: &mut Graph<'_>, ex: &Example) -> Result<Var> {
        score_pair(self.model, self.data, g, ex.query, ex.candidate)
    }

    fn epoch_examples(&self, _rng: &mut ChaCha8Rng) -> Result<Vec<Example>> {
        Ok(self
            .train
            .iter()
            .map(|&i| Example {
                query: i,
                candidate: self.data.items[i].song,
                label: self.data.items[i].label.expect("checked at construction"),
            })
            .collect())
    }

    fn validation_examples(&self) -> &[Example] {
        &self.val
    }
}

/// Seed of the fixed validation negatives.
const VALIDATION_NEGATIVES_SEED: u64 = 0x5eed;

pub struct RetrievalTask<'a> {
    pub model: &'a Model,
    pub data: &'a Dataset,
    train: Vec<usize>,
    songs: Vec<usize>,
    val: Vec<Example>,
}

impl<'a> RetrievalTask<'a> {
    pub fn new(model: &'a Model, data: &'a Dataset) -> Result<Self> {
        let songs: Vec<usize> = (0..data.songs.len()).collect();
        let train = require_split(data, Split::Train, "training split")?;
        let mut rng = ChaCha8Rng::seed_from_u64(VALIDATION_NEGATIVES_SEED);
        let mut val = Vec::new();
        for q in require_split(data, Split::Val, "validation split")? {
            let truth = data.items[q].song;
            val.push(Example {
                query: q,
                candidate: truth,
                label: 1.0,
            });
            val.push(Example {
                query: q,
                candidate: sample_negative(truth, &songs, &mut rng)?,
                label: 0.0,
            });
        }
        Ok(Self {
            model,
            data,
            train,
            songs,
            val,
        })
    }
}

impl Task for RetrievalTask<'_> {
    fn prob(&self, g: &mut Graph<'_>, ex: &Example) -> Result<Var> {
        score_pair(self.model, self.data, g, ex.query, ex.candidate)
    }

    /// The true song and one fake per query.
    fn epoch_examples(&self, rng: &mut ChaCha8Rng) -> Result<Vec<Example>> {
        let mut out = Vec::with_capacity(2 * self.train.len());
        for &q in &self.train {
            let truth = self.data.items[q].song;
            out.push(Example {
                query: q,
                candidate: truth,
                label: 1.0,
            });
            out.push(Example {
                query: q,
                candidate: sample_negative(truth, &self.songs, rng)?,
                label: 0.0,
            });
        }
        Ok(out)
    }

    fn validation_examples(&self) -> &[Example] {
        &self.val
    }
}

/// Eval-mode probabilities for the items of `split`.
pub fn sentiment_scores(model: &Model, store: &ParamStore, data: &Dataset, split: Split) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut labels = Vec::new();
    let mut scores = Vec::new();
    for i in require_split(data, split, "evaluation split")? {
        let y = data.items[i]
            .label
            .ok_or_else(|| Error::Contract(format!("item {} has no label", data.items[i].id)))?;
        let mut g = Graph::new(store, Mode::Eval);
        let p = score_pair(model, data, &mut g, i, data.items[i].song)?;
        labels.push(y);
        scores.push(g.value(p).data()[0]);
    }
    Ok((labels, scores))
}

pub fn eval_sentiment(model: &Model, store: &ParamStore, data: &Dataset, split: Split) -> Result<EvalReport> {
    let (labels, scores) = sentiment_scores(model, store, data, split)?;
    let m = metrics_sentiment(&labels, &scores)?;
    Ok(EvalReport::Sentiment {
        variant: model.config.variant.name().into(),
        items: labels.len(),
        auc: m.auc,
        f1: m.f1,
        precision: m.precision,
    })
}

fn encoded(g: &Graph<'_>, v: Option<Var>) -> Option<Tensor> {
    v.map(|v| g.value(v).clone())
}

/// 1-based rank of the true song for every query of `split`, ranking against all songs.
/// Audio and image encodings do not depend on the pairing, so they are computed once.
pub fn retrieval_ranks(model: &Model, store: &ParamStore, data: &Dataset, split: Split) -> Result<Vec<usize>> {
    let queries = require_split(data, split, "evaluation split")?;
    let audio: Vec<Option<Tensor>> = data
        .songs
        .iter()
        .map(|s| {
            let mut g = Graph::new(store, Mode::Eval);
            let a = model.encode_audio(&mut g, &s.spec)?;
            Ok(encoded(&g, a))
        })
        .collect::<Result<_>>()?;
    let mut ranks = Vec::with_capacity(queries.len());
    for q in queries {
        let image = {
            let mut g = Graph::new(store, Mode::Eval);
            let v = model.encode_image(&mut g, &data.items[q].image)?;
            encoded(&g, v)
        };
        let mut scores = Vec::with_capacity(data.songs.len());
        for (song, a) in audio.iter().enumerate() {
            let mut g = Graph::new(store, Mode::Eval);
            let pair = text_pair(model, data, q, song)?;
            let f = Features {
                t: model.encode_text(&mut g, &pair)?,
                a: a.clone().map(|t| g.constant(t)),
                v: image.clone().map(|t| g.constant(t)),
            };
            let s = model.score(&mut g, f)?;
            scores.push(g.value(s.prob).data()[0]);
        }
        ranks.push(rank_candidates(&scores, data.items[q].song)?.rank);
    }
    Ok(ranks)
}

pub fn eval_retrieval(model: &Model, store: &ParamStore, data: &Dataset, split: Split, ks: &[usize]) -> Result<EvalReport> {
    let ranks = retrieval_ranks(model, store, data, split)?;
    let m = metrics_retrieval(&ranks, ks)?;
    Ok(EvalReport::Retrieval {
        variant: model.config.variant.name().into(),
        queries: ranks.len(),
        candidates: data.songs.len(),
        med_r: m.med_r,
        recall: m.recall.into_iter().map(|(k, recall)| RecallAt { k, recall }).collect(),
    })
}
