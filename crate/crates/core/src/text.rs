//! attBiGRU: caption-modulated word embeddings, a bidirectional GRU and a
//! context-vector attention readout.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{BiGru, Linear};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const UNK: usize = 1;

/// Token ↔ index map. Index 0 is padding and 1 is the unknown token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let mut v = Self { tokens, index: HashMap::new() };
        v.reindex();
        v
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        Self {
            tokens: vec!["<pad>".into(), "<unk>".into()],
            index: HashMap::new(),
        }
    }

    /// Builds from tokens in first-seen order.
    pub fn from_tokens<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = Self::new();
        for t in tokens {
            v.insert(t);
        }
        v
    }

    pub fn insert(&mut self, token: &str) -> usize {
        if let Some(&i) = self.index.get(token) {
            return i;
        }
        self.tokens.push(token.to_string());
        let i = self.tokens.len() - 1;
        self.index.insert(token.to_string(), i);
        i
    }

    pub fn get(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, i: usize) -> Option<&str> {
        self.tokens.get(i).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn reindex(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .skip(2)
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.get(t)).collect()
    }
}

/// Lowercased whitespace tokenization.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// Reads `token v1 … vD` lines; a leading `count dim` header is skipped.
pub fn load_embedding_file(path: &Path, dim: usize) -> Result<HashMap<String, Vec<f64>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = HashMap::new();
    for (n, line) in text.lines().enumerate() {
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.is_empty() {
            continue;
        }
        if n == 0 && parts.len() == 2 && parts.iter().all(|p| p.parse::<u64>().is_ok()) {
            continue;
        }
        if parts.len() != dim + 1 {
            return Err(Error::format(
                path,
                "dimension",
                format!("line {}: expected {dim} values, found {}", n + 1, parts.len() - 1),
            ));
        }
        let vals = parts[1..]
            .iter()
            .map(|p| p.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::format(path, "value", format!("line {}: {e}", n + 1)))?;
        out.insert(parts[0].to_string(), vals);
    }
    Ok(out)
}

/// `|V| × dim` table: row 0 zero, rows found in `pretrained` copied, others drawn N(0, 0.5²).
pub fn embedding_matrix<R: Rng + ?Sized>(
    vocab: &Vocabulary,
    dim: usize,
    pretrained: Option<&HashMap<String, Vec<f64>>>,
    rng: &mut R,
) -> Tensor {
    let mut t = Tensor::normal(&[vocab.len(), dim], 0.5, rng);
    let d = t.data_mut();
    d[..dim].iter_mut().for_each(|v| *v = 0.0);
    if let Some(p) = pretrained {
        for i in 2..vocab.len() {
            if let Some(v) = vocab.token(i).and_then(|tok| p.get(tok)) {
                d[i * dim..(i + 1) * dim].copy_from_slice(v);
            }
        }
    }
    t
}

/// Protagonist tokens (the longest textual part) and optional supporting tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct TextPair {
    pub large: Vec<usize>,
    pub small: Option<Vec<usize>>,
}

impl TextPair {
    /// The longer of lyrics and caption becomes the protagonist; truncation applies after.
    pub fn from_parts(lyrics: &[usize], caption: Option<&[usize]>, max_words: usize, max_support: usize) -> Result<Self> {
        let (large, small) = match caption {
            Some(c) if c.len() > lyrics.len() => (c, Some(lyrics)),
            other => (lyrics, other),
        };
        if large.is_empty() {
            return Err(Error::EmptyInput("text pair"));
        }
        let small = small
            .map(|s| s.iter().copied().filter(|&i| i != PAD).take(max_support).collect::<Vec<_>>())
            .filter(|s| !s.is_empty());
        Ok(Self {
            large: large.iter().copied().take(max_words).collect(),
            small,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextConfig {
    pub embed_dim: usize,
    /// Hidden units per direction (M).
    pub hidden: usize,
    /// Protagonist length after truncation and right-padding (N).
    pub max_words: usize,
    pub max_support: usize,
    pub train_embeddings: bool,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self {
            embed_dim: 300,
            hidden: 50,
            max_words: 100,
            max_support: 5,
            train_embeddings: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub config: TextConfig,
    pub embedding: ParamId,
    pub rnn: BiGru,
    pub attn: Linear,
    pub context: ParamId,
}

pub struct TextOutput {
    /// `[2M]`
    pub t: Var,
    /// `[2M × N]`, column j = forward and backward states at word j.
    pub h: Var,
    /// `[N]`, zero at padded positions.
    pub alpha: Var,
}

impl TextEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, config: TextConfig, embeddings: Tensor, rng: &mut R) -> Result<Self> {
        if embeddings.rank() != 2 || embeddings.shape()[1] != config.embed_dim || embeddings.shape()[0] < 2 {
            return Err(Error::shape("embedding table", embeddings.shape(), &[0, config.embed_dim]));
        }
        let embedding = store.add(format!("{name}.embedding"), embeddings);
        store.set_trainable(embedding, config.train_embeddings);
        let two_m = 2 * config.hidden;
        Ok(Self {
            config,
            embedding,
            rnn: BiGru::new(store, &format!("{name}.bigru"), config.embed_dim, config.hidden, 1, rng),
            attn: Linear::new(store, &format!("{name}.attn"), two_m, two_m, rng),
            context: store.normal(format!("{name}.context"), &[two_m], 0.01, rng),
        })
    }

    pub fn output_dim(&self) -> usize {
        2 * self.config.hidden
    }

    /// `[len × D]` embedded rows followed by zero rows up to `rows`.
    /// Padding rows are constants, so the padding embedding never receives gradient.
    pub fn embed(&self, g: &mut Graph<'_>, tokens: &[usize], rows: usize) -> Result<Var> {
        if rows == 0 {
            return Err(Error::EmptyInput("embed"));
        }
        let real: Vec<usize> = tokens.iter().copied().take(rows).take_while(|&i| i != PAD).collect();
        let d = self.config.embed_dim;
        if real.is_empty() {
            return Ok(g.constant(Tensor::zeros(&[rows, d])));
        }
        let e = g.gather_rows(self.embedding, &real)?;
        if real.len() == rows {
            return Ok(e);
        }
        let pad = g.constant(Tensor::zeros(&[rows - real.len(), d]));
        g.concat(&[e, pad], 0)
    }

    /// Mean of the supporting-word embeddings applied elementwise to every protagonist row.
    /// Without supporting words the protagonist passes through unchanged.
    pub fn supporting_attention(&self, g: &mut Graph<'_>, large: Var, small: Option<&[usize]>) -> Result<Var> {
        let words: Vec<usize> = small
            .unwrap_or(&[])
            .iter()
            .copied()
            .filter(|&i| i != PAD)
            .take(self.config.max_support)
            .collect();
        if words.is_empty() {
            return Ok(large);
        }
        let e = g.gather_rows(self.embedding, &words)?;
        let t_att = g.mean_rows(e)?;
        g.mul(large, t_att)
    }

    /// Eq-style readout: ĥ_i = tanh(W_u h_i + b_u), α = softmax(ĥ_iᵀ ĥ_c) over unmasked i, t = Σ α_i h_i.
    /// `rows` is ℋᵀ, i.e. `[N × 2M]`.
    pub fn context_attention(&self, g: &mut Graph<'_>, rows: Var, mask: Option<&[bool]>) -> Result<(Var, Var)> {
        let hidden = self.attn.forward(g, rows)?;
        let hidden = g.tanh(hidden)?;
        let ctx = g.param(self.context);
        let scores = g.matmul(hidden, ctx)?;
        let alpha = g.masked_softmax(scores, mask)?;
        let t = g.matmul(alpha, rows)?;
        Ok((t, alpha))
    }

    pub fn encode(&self, g: &mut Graph<'_>, pair: &TextPair) -> Result<TextOutput> {
        let n = self.config.max_words;
        let len = pair.large.len().min(n);
        if len == 0 {
            return Err(Error::EmptyInput("encode_text"));
        }
        let large = self.embed(g, &pair.large, n)?;
        let modulated = self.supporting_attention(g, large, pair.small.as_deref())?;
        let states = self.rnn.forward(g, modulated)?;
        let rows = states.rows(g)?;
        let mask: Vec<bool> = (0..n).map(|i| i < len).collect();
        let (t, alpha) = self.context_attention(g, rows, Some(&mask))?;
        let h = g.transpose(rows)?;
        Ok(TextOutput { t, h, alpha })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_params;
    use crate::graph::Mode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_encoder(store: &mut ParamStore, seed: u64) -> (TextEncoder, Vocabulary) {
        let vocab = Vocabulary::from_tokens(["la", "love", "night", "sun", "rain"]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = TextConfig {
            embed_dim: 4,
            hidden: 3,
            max_words: 6,
            max_support: 5,
            train_embeddings: false,
        };
        let emb = embedding_matrix(&vocab, 4, None, &mut rng);
        (TextEncoder::new(store, "text", cfg, emb, &mut rng).unwrap(), vocab)
    }

    #[test]
    fn vocabulary_conventions() {
        let mut v = Vocabulary::from_tokens(["a", "b", "a"]);
        assert_eq!(v.len(), 4);
        assert_eq!(v.get("a"), 2);
        assert_eq!(v.get("zzz"), UNK);
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(back.get("b"), 3);
        assert_eq!(v.insert("b"), 3);
    }

    #[test]
    fn embedding_file_with_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.txt");
        fs::write(&p, "2 3\nla 1 2 3\nsun 0.5 0.25 -1\n").unwrap();
        let m = load_embedding_file(&p, 3).unwrap();
        assert_eq!(m["sun"], vec![0.5, 0.25, -1.0]);
        let vocab = Vocabulary::from_tokens(["sun"]);
        let t = embedding_matrix(&vocab, 3, Some(&m), &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(&t.data()[..3], &[0.0; 3]);
        assert_eq!(&t.data()[6..], &[0.5, 0.25, -1.0]);
        fs::write(&p, "la 1 2\n").unwrap();
        assert!(load_embedding_file(&p, 3).unwrap_err().to_string().contains("line 1"));
    }

    #[test]
    fn embed_lookup_rules() {
        let mut store = ParamStore::new();
        let (enc, vocab) = small_encoder(&mut store, 1);
        let table = store.value(enc.embedding).clone();
        let mut g = Graph::new(&store, Mode::Eval);
        let pad = enc.embed(&mut g, &[PAD, PAD], 3).unwrap();
        assert!(g.value(pad).data().iter().all(|&v| v == 0.0));
        let ids = vocab.encode(&tokenize("LOVE unseen"));
        let e = enc.embed(&mut g, &ids, 3).unwrap();
        assert_eq!(&g.value(e).data()[..4], &table.data()[3 * 4..4 * 4]);
        assert_eq!(&g.value(e).data()[4..8], &table.data()[4..8]);
        assert!(g.value(e).data()[8..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn supporting_attention_rules() {
        let mut store = ParamStore::new();
        let (enc, _) = small_encoder(&mut store, 2);
        let table = store.value(enc.embedding).clone();
        let row = |i: usize| table.data()[i * 4..(i + 1) * 4].to_vec();
        let mut g = Graph::new(&store, Mode::Eval);
        let large = enc.embed(&mut g, &[2, 3, 4], 3).unwrap();
        let same = enc.supporting_attention(&mut g, large, None).unwrap();
        assert_eq!(g.value(same), g.value(large));
        let one = enc.supporting_attention(&mut g, large, Some(&[5])).unwrap();
        for j in 0..4 {
            assert_eq!(g.value(one).data()[j], row(2)[j] * row(5)[j]);
        }
        let two = enc.supporting_attention(&mut g, large, Some(&[5, 6])).unwrap();
        let two_padded = enc.supporting_attention(&mut g, large, Some(&[5, 6, PAD, PAD])).unwrap();
        for j in 0..4 {
            let mask = (row(5)[j] + row(6)[j]) / 2.0;
            assert!((g.value(two).data()[4 + j] - row(3)[j] * mask).abs() < 1e-15);
        }
        assert_eq!(g.value(two), g.value(two_padded));
    }

    #[test]
    fn context_attention_degenerate_cases() {
        let mut store = ParamStore::new();
        let (enc, _) = small_encoder(&mut store, 3);
        let mut g = Graph::new(&store, Mode::Eval);
        let col = [0.3, -0.2, 0.9, 0.1, 0.0, -0.7];
        let rows = g.constant(Tensor::new(vec![4, 6], col.repeat(4)).unwrap());
        let (t, alpha) = enc.context_attention(&mut g, rows, None).unwrap();
        for &a in g.value(alpha).data() {
            assert!((a - 0.25).abs() < 1e-15);
        }
        for (a, e) in g.value(t).data().iter().zip(col) {
            assert!((a - e).abs() < 1e-15);
        }
        let single = g.constant(Tensor::new(vec![1, 6], col.to_vec()).unwrap());
        let (t, alpha) = enc.context_attention(&mut g, single, None).unwrap();
        assert_eq!(g.value(alpha).data(), &[1.0]);
        assert_eq!(g.value(t).data(), &col);
    }

    #[test]
    fn encode_shapes_masking_and_caption_effect() {
        let mut store = ParamStore::new();
        let (enc, _) = small_encoder(&mut store, 4);
        let mut g = Graph::new(&store, Mode::Eval);
        let plain = TextPair::from_parts(&[2, 3, 4], None, 6, 5).unwrap();
        let out = enc.encode(&mut g, &plain).unwrap();
        assert_eq!(g.shape(out.t), &[6]);
        assert_eq!(g.shape(out.h), &[6, 6]);
        let a = g.value(out.alpha).data().to_vec();
        assert!(a[3..].iter().all(|&v| v == 0.0));
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let again = enc.encode(&mut g, &plain).unwrap();
        assert_eq!(g.value(again.t), g.value(out.t));
        let cap = TextPair::from_parts(&[2, 3, 4], Some(&[5]), 6, 5).unwrap();
        let with = enc.encode(&mut g, &cap).unwrap();
        assert!(g.value(with.t).max_abs_diff(g.value(out.t)) > 1e-6);
    }

    #[test]
    fn protagonist_is_longest_part() {
        let p = TextPair::from_parts(&[2, 3], Some(&[4, 5, 6]), 100, 5).unwrap();
        assert_eq!(p.large, vec![4, 5, 6]);
        assert_eq!(p.small, Some(vec![2, 3]));
        let p = TextPair::from_parts(&(2..200).collect::<Vec<_>>(), Some(&(2..20).collect::<Vec<_>>()), 100, 5).unwrap();
        assert_eq!(p.large.len(), 100);
        assert_eq!(p.small.unwrap().len(), 5);
        assert!(TextPair::from_parts(&[], None, 100, 5).is_err());
    }

    #[test]
    fn text_encoder_gradients() {
        for seed in 0..2 {
            let mut store = ParamStore::new();
            let (enc, _) = small_encoder(&mut store, seed);
            store.set_trainable(enc.embedding, true);
            let pair = TextPair::from_parts(&[2, 3, 1, 4], Some(&[5, 6]), 6, 5).unwrap();
            let rep = check_params(&mut store, |g| {
                let out = enc.encode(g, &pair)?;
                let w = g.constant(Tensor::vector(vec![0.3, -1.0, 0.7, 0.2, -0.4, 0.9]));
                g.dot(out.t, w)
            })
            .unwrap();
            assert!(rep.max_rel_err < 1e-4, "{rep:?}");
        }
    }
}
