//! DCRNN: densely connected conv sub-blocks, a time-major permute, a stacked
//! bidirectional GRU and a two-layer dense head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::pooled_len;
use crate::nn::{BiGru, ConvBnPool, Linear};
use crate::params::ParamStore;

pub type Pool = (usize, usize);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AudioConfig {
    pub bins: usize,
    pub channels: usize,
    pub kernel: usize,
    /// Pool windows of the four stages, one entry per sub-block.
    pub pools: Vec<[Pool; 4]>,
    pub rnn_hidden: usize,
    pub rnn_layers: usize,
    pub fc_hidden: usize,
    pub out_dim: usize,
    pub min_frames: usize,
}

impl Default for AudioConfig {
    fn default() -> Self {
        Self {
            bins: 96,
            channels: 32,
            kernel: 3,
            pools: vec![[(2, 2); 4], [(2, 1), (1, 1), (1, 1), (1, 1)]],
            rnn_hidden: 32,
            rnn_layers: 2,
            fc_hidden: 128,
            out_dim: 100,
            min_frames: 4,
        }
    }
}

/// A_h¹ = s₁(A), A_h² = s₂(A_h¹), A_h³ = s₃(A_h²), A_T = s₄(pool(A_h¹) ⊕ A_h³).
/// The skip input is max-pooled with the windows of stages 2 and 3 so its spatial
/// size matches A_h³.
#[derive(Clone, Debug)]
pub struct DenseSubBlock {
    pub stages: [ConvBnPool; 4],
}

/// Shape after each stage, for bookkeeping checks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageShape {
    pub name: String,
    pub shape: [usize; 3],
}

impl DenseSubBlock {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, c_in: usize, c: usize, k: usize, pools: [Pool; 4], rng: &mut R) -> Self {
        let stages = [
            ConvBnPool::new(store, &format!("{name}.s1"), c_in, c, k, pools[0], rng),
            ConvBnPool::new(store, &format!("{name}.s2"), c, c, k, pools[1], rng),
            ConvBnPool::new(store, &format!("{name}.s3"), c, c, k, pools[2], rng),
            ConvBnPool::new(store, &format!("{name}.s4"), 2 * c, c, k, pools[3], rng),
        ];
        assert_eq!(
            stages[3].c_in,
            stages[0].c_out + stages[2].c_out,
            "stage 4 input must be channels(A_h1) + channels(A_h3)"
        );
        Self { stages }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, prefix: &str, trace: &mut Vec<StageShape>) -> Result<Var> {
        let mut record = |g: &Graph<'_>, name: &str, v: Var| {
            let s = g.shape(v);
            trace.push(StageShape {
                name: format!("{prefix}.{name}"),
                shape: [s[0], s[1], s[2]],
            });
        };
        let h1 = self.stages[0].forward(g, x)?;
        record(g, "h1", h1);
        let p2 = {
            let s = g.shape(h1);
            self.stages[1].effective_pool(s[1], s[2])
        };
        let h2 = self.stages[1].forward(g, h1)?;
        record(g, "h2", h2);
        let p3 = {
            let s = g.shape(h2);
            self.stages[2].effective_pool(s[1], s[2])
        };
        let h3 = self.stages[2].forward(g, h2)?;
        record(g, "h3", h3);
        let skip = g.max_pool2d(h1, p2.0, p2.1)?;
        let skip = g.max_pool2d(skip, p3.0, p3.1)?;
        let cat = g.concat(&[skip, h3], 0)?;
        record(g, "concat", cat);
        let out = self.stages[3].forward(g, cat)?;
        record(g, "out", out);
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct AudioEncoder {
    pub config: AudioConfig,
    pub blocks: Vec<DenseSubBlock>,
    pub rnn: BiGru,
    pub fc1: Linear,
    pub fc2: Linear,
}

pub struct AudioOutput {
    pub a: Var,
    pub trace: Vec<StageShape>,
}

fn clamp_pool(p: Pool, h: usize, w: usize) -> Pool {
    (if h <= 1 { 1 } else { p.0 }, if w <= 1 { 1 } else { p.1 })
}

/// Spatial size after every stage for a `bins × frames` input, without running the network.
pub fn shape_trace(config: &AudioConfig, frames: usize) -> Vec<StageShape> {
    let c = config.channels;
    let (mut h, mut w) = (config.bins, frames);
    let mut out = Vec::new();
    for (b, pools) in config.pools.iter().enumerate() {
        let name = |n: &str| format!("dense{}.{n}", b + 1);
        let mut step = |p: Pool| {
            let (ph, pw) = clamp_pool(p, h, w);
            h = pooled_len(h, ph);
            w = pooled_len(w, pw);
            [c, h, w]
        };
        let h1 = step(pools[0]);
        let h2 = step(pools[1]);
        let h3 = step(pools[2]);
        let cat = [2 * c, h3[1], h3[2]];
        let last = step(pools[3]);
        for (n, shape) in [("h1", h1), ("h2", h2), ("h3", h3), ("concat", cat), ("out", last)] {
            out.push(StageShape { name: name(n), shape });
        }
    }
    out
}

impl AudioEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, config: AudioConfig, rng: &mut R) -> Result<Self> {
        if config.pools.is_empty() || config.channels == 0 || config.bins == 0 {
            return Err(Error::Config("audio encoder needs at least one sub-block and channel".into()));
        }
        if config.pools.iter().flatten().any(|&(a, b)| a == 0 || b == 0) {
            return Err(Error::Config("pool windows must be at least 1".into()));
        }
        let c = config.channels;
        let blocks = config
            .pools
            .iter()
            .enumerate()
            .map(|(i, &pools)| {
                let c_in = if i == 0 { 1 } else { c };
                DenseSubBlock::new(store, &format!("{name}.dense{}", i + 1), c_in, c, config.kernel, pools, rng)
            })
            .collect();
        let final_h = shape_trace(&config, config.min_frames.max(1)).last().map_or(1, |s| s.shape[1]);
        let rnn = BiGru::new(store, &format!("{name}.rnn"), c * final_h, config.rnn_hidden, config.rnn_layers, rng);
        let fc1 = Linear::new(store, &format!("{name}.fc1"), 2 * config.rnn_hidden, config.fc_hidden, rng);
        let fc2 = Linear::new(store, &format!("{name}.fc2"), config.fc_hidden, config.out_dim, rng);
        Ok(Self {
            config,
            blocks,
            rnn,
            fc1,
            fc2,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.config.out_dim
    }

    /// `[c × h × w] → [w × (c·h)]`, channel-major within each frame.
    pub fn permute_time_major(g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::ShapeContract(format!("permute_time_major needs c×h×w, got {s:?}")));
        }
        let p = g.permute(x, &[2, 0, 1])?;
        g.reshape(p, &[s[2], s[0] * s[1]])
    }

    /// Encodes a `[1 × bins × frames]` spectrogram image.
    pub fn encode(&self, g: &mut Graph<'_>, spec: Var) -> Result<AudioOutput> {
        let s = g.shape(spec).to_vec();
        if s.len() != 3 || s[0] != 1 || s[1] != self.config.bins {
            return Err(Error::shape("encode_audio", &s, &[1, self.config.bins, 0]));
        }
        if s[2] < self.config.min_frames {
            return Err(Error::ShapeContract(format!(
                "spectrogram has {} frames; the pooling cascade at dense1.h1 needs at least {}",
                s[2], self.config.min_frames
            )));
        }
        let mut trace = Vec::new();
        let mut x = spec;
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(g, x, &format!("dense{}", i + 1), &mut trace)?;
        }
        let seq = Self::permute_time_major(g, x)?;
        let states = self.rnn.forward(g, seq)?;
        let summary = states.summary(g)?;
        let h = self.fc1.forward(g, summary)?;
        let h = g.relu(h)?;
        let a = self.fc2.forward(g, h)?;
        Ok(AudioOutput { a, trace })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_params;
    use crate::graph::Mode;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_config(bins: usize) -> AudioConfig {
        AudioConfig {
            bins,
            channels: 4,
            kernel: 3,
            // keeps every stage above 1×1 so per-item batch statistics stay non-degenerate
            pools: vec![[(2, 2), (2, 2), (1, 1), (1, 1)], [(2, 1), (1, 1), (1, 1), (1, 1)]],
            rnn_hidden: 3,
            rnn_layers: 2,
            fc_hidden: 5,
            out_dim: 4,
            min_frames: 4,
        }
    }

    #[test]
    fn default_shape_trace() {
        let t = shape_trace(&AudioConfig::default(), 216);
        let got: Vec<[usize; 3]> = t.iter().map(|s| s.shape).collect();
        assert_eq!(
            got[..5],
            [[32, 48, 108], [32, 24, 54], [32, 12, 27], [64, 12, 27], [32, 6, 14]]
        );
        assert_eq!(t.last().unwrap().shape, [32, 3, 14]);
    }

    #[test]
    fn every_dimension_stays_positive() {
        let cfg = AudioConfig::default();
        for frames in 4..=216 {
            for s in shape_trace(&cfg, frames) {
                assert!(s.shape.iter().all(|&d| d >= 1), "{frames}: {s:?}");
            }
            assert_eq!(shape_trace(&cfg, frames).last().unwrap().shape[1], 3);
        }
    }

    #[test]
    fn permute_time_major_layout() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store, Mode::Eval);
        let x = g.constant(Tensor::new(vec![2, 3, 4], (0..24).map(f64::from).collect()).unwrap());
        let p = AudioEncoder::permute_time_major(&mut g, x).unwrap();
        assert_eq!(g.shape(p), &[4, 6]);
        // frame 1: channel 0 rows then channel 1 rows
        assert_eq!(&g.value(p).data()[6..12], &[1.0, 5.0, 9.0, 13.0, 17.0, 21.0]);
        let big = g.constant(Tensor::zeros(&[32, 3, 13]));
        let p = AudioEncoder::permute_time_major(&mut g, big).unwrap();
        assert_eq!(g.shape(p), &[13, 96]);
    }

    #[test]
    fn forward_matches_trace_and_rejects_short_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let cfg = toy_config(8);
        let enc = AudioEncoder::new(&mut store, "audio", cfg.clone(), &mut rng).unwrap();
        for frames in [4, 5, 9, 16] {
            let mut g = Graph::new(&store, Mode::Train);
            let x = g.constant(Tensor::uniform(&[1, 8, frames], -1.0, 1.0, &mut rng));
            let out = enc.encode(&mut g, x).unwrap();
            assert_eq!(g.shape(out.a), &[4]);
            assert_eq!(out.trace, shape_trace(&cfg, frames));
        }
        let mut g = Graph::new(&store, Mode::Train);
        let x = g.constant(Tensor::zeros(&[1, 8, 3]));
        let err = enc.encode(&mut g, x).err().unwrap();
        assert!(err.to_string().contains("dense1"), "{err}");
    }

    #[test]
    fn eval_mode_is_pure() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let enc = AudioEncoder::new(&mut store, "audio", toy_config(8), &mut rng).unwrap();
        let x = Tensor::uniform(&[1, 8, 16], -1.0, 1.0, &mut rng);
        let ups = {
            let mut g = Graph::new(&store, Mode::Train);
            let xv = g.constant(x.clone());
            enc.encode(&mut g, xv).unwrap();
            g.take_norm_updates()
        };
        assert_eq!(ups.len(), 8);
        store.apply_norm_updates(&ups);
        let run = || {
            let mut g = Graph::new(&store, Mode::Eval);
            let xv = g.constant(x.clone());
            let out = enc.encode(&mut g, xv).unwrap();
            assert!(g.take_norm_updates().is_empty());
            g.value(out.a).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn full_stack_gradients() {
        for seed in 0..2 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let enc = AudioEncoder::new(&mut store, "audio", toy_config(8), &mut rng).unwrap();
            let x = Tensor::uniform(&[1, 8, 16], -1.0, 1.0, &mut rng);
            let rep = check_params(&mut store, |g| {
                let xv = g.constant(x.clone());
                let out = enc.encode(g, xv)?;
                let w = g.constant(Tensor::vector(vec![0.5, -1.0, 0.25, 0.8]));
                g.dot(out.a, w)
            })
            .unwrap();
            assert!(rep.max_rel_err < 1e-4, "{rep:?}");
        }
    }
}
