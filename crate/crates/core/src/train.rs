//! Binary cross-entropy training with Adam, early stopping and negative sampling.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Mode, Var};
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamStore;

pub const BCE_EPS: f64 = 1e-12;

/// `−[y log p + (1 − y) log(1 − p)]` for one prediction, `p` clamped to `[ε, 1 − ε]`.
pub fn bce(g: &mut Graph<'_>, p: Var, y: f64) -> Result<Var> {
    let p = g.clamp(p, BCE_EPS, 1.0 - BCE_EPS);
    let log_p = g.log(p)?;
    let q = g.affine(p, -1.0, 1.0);
    let log_q = g.log(q)?;
    let a = g.affine(log_p, -y, 0.0);
    let b = g.affine(log_q, -(1.0 - y), 0.0);
    let l = g.add(a, b)?;
    Ok(g.sum(l))
}

/// Mean binary cross-entropy over a batch of plain numbers.
pub fn bce_loss(y: &[f64], p: &[f64]) -> Result<f64> {
    if y.is_empty() {
        return Err(Error::EmptyInput("bce loss"));
    }
    if y.len() != p.len() {
        return Err(Error::shape("bce loss", &[y.len()], &[p.len()]));
    }
    let total: f64 = y
        .iter()
        .zip(p)
        .map(|(&y, &p)| {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / y.len() as f64)
}

/// Uniform draw from `corpus` without `true_id`.
pub fn sample_negative<R: Rng + ?Sized>(true_id: usize, corpus: &[usize], rng: &mut R) -> Result<usize> {
    let others = corpus.iter().filter(|&&c| c != true_id).count();
    if others == 0 {
        return Err(Error::Sampling(format!(
            "no fake candidate available besides {true_id} in a corpus of {}",
            corpus.len()
        )));
    }
    let pick = rng.gen_range(0..others);
    Ok(*corpus
        .iter()
        .filter(|&&c| c != true_id)
        .nth(pick)
        .expect("pick is below the count"))
}

/// One scored pair. Sentiment examples use the item index for both sides.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub query: usize,
    pub candidate: usize,
    pub label: f64,
}

/// What the trainer needs from a task.
pub trait Task {
    /// Probability for one example, built on `g`.
    fn prob(&self, g: &mut Graph<'_>, ex: &Example) -> Result<Var>;
    /// Training examples for one epoch, before shuffling.
    fn epoch_examples(&self, rng: &mut ChaCha8Rng) -> Result<Vec<Example>>;
    fn validation_examples(&self) -> &[Example];
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub patience: usize,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch: 64,
            seed: 0,
            patience: 3,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub improved: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_loss: Option<f64>,
    pub stopped_early: bool,
}

impl TrainLog {
    /// One JSON object per epoch.
    pub fn to_json_lines(&self) -> String {
        self.epochs
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_json_lines().as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Forward and backward of one example; gradients land in the store.
fn train_example(store: &mut ParamStore, task: &impl Task, ex: &Example, scale: f64) -> Result<f64> {
    let (loss, grads, updates) = {
        let mut g = Graph::new(store, Mode::Train);
        let p = task.prob(&mut g, ex)?;
        let l = bce(&mut g, p, ex.label)?;
        let l = g.affine(l, scale, 0.0);
        let value = g.value(l).data()[0] / scale;
        if !value.is_finite() {
            return Ok(value);
        }
        (value, g.backward(l)?, g.take_norm_updates())
    };
    store.accumulate(&grads);
    store.apply_norm_updates(&updates);
    Ok(loss)
}

/// Mean BCE in eval mode.
pub fn evaluate_loss(store: &ParamStore, task: &impl Task, examples: &[Example]) -> Result<f64> {
    let mut probs = Vec::with_capacity(examples.len());
    for ex in examples {
        let mut g = Graph::new(store, Mode::Eval);
        let p = task.prob(&mut g, ex)?;
        probs.push(g.value(p).data()[0]);
    }
    let labels: Vec<f64> = examples.iter().map(|e| e.label).collect();
    bce_loss(&labels, &probs)
}

/// Populates batch-norm running statistics from one train-mode pass without
/// touching parameters. Used when a model is evaluated with zero epochs of training.
pub fn calibrate(store: &mut ParamStore, task: &impl Task, examples: &[Example]) -> Result<()> {
    for ex in examples {
        let updates = {
            let mut g = Graph::new(store, Mode::Train);
            task.prob(&mut g, ex)?;
            g.take_norm_updates()
        };
        store.apply_norm_updates(&updates);
    }
    Ok(())
}

/// Minibatch Adam on BCE with early stopping on validation loss. On return the
/// store holds the parameters of the best validation epoch.
pub fn train(store: &mut ParamStore, task: &impl Task, config: &TrainConfig) -> Result<TrainLog> {
    if config.batch == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if task.validation_examples().is_empty() {
        return Err(Error::EmptyInput("validation split"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut log = TrainLog::default();
    if config.epochs == 0 {
        let examples = task.epoch_examples(&mut rng)?;
        calibrate(store, task, &examples)?;
        return Ok(log);
    }
    let mut adam = Adam::new(config.adam, store);
    let mut best: Option<(f64, Vec<(String, crate::tensor::Tensor)>)> = None;
    let mut stale = 0;
    let mut step = 0;
    for epoch in 1..=config.epochs {
        let mut examples = task.epoch_examples(&mut rng)?;
        if examples.is_empty() {
            return Err(Error::EmptyInput("training split"));
        }
        examples.shuffle(&mut rng);
        let mut total = 0.0;
        let mut epoch_steps = 0;
        for batch in examples.chunks(config.batch) {
            store.zero_grad();
            let scale = 1.0 / batch.len() as f64;
            for ex in batch {
                let loss = train_example(store, task, ex, scale)?;
                if !loss.is_finite() {
                    return Err(Error::Divergence { epoch, step, loss });
                }
                total += loss;
            }
            adam.step(store)?;
            step += 1;
            epoch_steps += 1;
        }
        let val_loss = evaluate_loss(store, task, task.validation_examples())?;
        if !val_loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                step,
                loss: val_loss,
            });
        }
        let improved = best.as_ref().map_or(true, |(b, _)| val_loss < *b);
        if improved {
            best = Some((val_loss, store.named_tensors()));
            log.best_epoch = Some(epoch);
            log.best_val_loss = Some(val_loss);
            stale = 0;
        } else {
            stale += 1;
        }
        log.epochs.push(EpochRecord {
            epoch,
            steps: epoch_steps,
            train_loss: total / examples.len() as f64,
            val_loss,
            improved,
        });
        if stale >= config.patience {
            log.stopped_early = true;
            break;
        }
    }
    if let Some((_, snapshot)) = best {
        store.load_named(snapshot)?;
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Linear;
    use crate::tensor::Tensor;

    #[test]
    fn bce_values() {
        let ln2 = std::f64::consts::LN_2;
        assert!((bce_loss(&[1.0, 0.0, 1.0], &[0.5; 3]).unwrap() - ln2).abs() < 1e-12);
        assert!((bce_loss(&[1.0], &[0.25]).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!(bce_loss(&[1.0, 0.0], &[1.0, 0.0]).unwrap() <= 1e-11);
        assert!(matches!(bce_loss(&[], &[]), Err(Error::EmptyInput(_))));
        let store = ParamStore::new();
        let mut g = Graph::new(&store, Mode::Train);
        let p = g.constant(Tensor::vector(vec![0.25]));
        let l = bce(&mut g, p, 1.0).unwrap();
        assert!((g.value(l).data()[0] - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn negative_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            assert_eq!(sample_negative(7, &[7, 9], &mut rng).unwrap(), 9);
        }
        assert!(matches!(sample_negative(7, &[7], &mut rng), Err(Error::Sampling(_))));
        let corpus: Vec<usize> = (0..100).collect();
        for _ in 0..100_000 {
            assert_ne!(sample_negative(42, &corpus, &mut rng).unwrap(), 42);
        }
        // each of the 99 others within 3 sigma of 1/99 over 10^4 draws
        let mut counts = [0usize; 100];
        for _ in 0..10_000 {
            counts[sample_negative(0, &corpus, &mut rng).unwrap()] += 1;
        }
        let (n, p) = (10_000.0, 1.0 / 99.0);
        let sigma = (n * p * (1.0 - p) as f64).sqrt();
        for &c in &counts[1..] {
            assert!((c as f64 - n * p).abs() < 3.0 * sigma + 1.0, "{c}");
        }
        let a: Vec<usize> = (0..20)
            .map(|_| 0)
            .scan(ChaCha8Rng::seed_from_u64(5), |r, _| sample_negative(0, &corpus, r).ok())
            .collect();
        let b: Vec<usize> = (0..20)
            .map(|_| 0)
            .scan(ChaCha8Rng::seed_from_u64(5), |r, _| sample_negative(0, &corpus, r).ok())
            .collect();
        assert_eq!(a, b);
    }

    /// Logistic regression on fixed 2-d points.
    struct Toy {
        lin: Linear,
        xs: Vec<[f64; 2]>,
        val: Vec<Example>,
    }

    impl Toy {
        fn new(store: &mut ParamStore) -> Self {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let lin = Linear::new(store, "toy", 2, 1, &mut rng);
            let xs: Vec<[f64; 2]> = (0..40).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect();
            let val = (30..40).map(|i| Example { query: i, candidate: i, label: Self::label(&xs[i]) }).collect();
            Self { lin, xs, val }
        }
        fn label(x: &[f64; 2]) -> f64 {
            f64::from(u8::from(x[0] + 0.5 * x[1] > 0.0))
        }
    }

    impl Task for Toy {
        fn prob(&self, g: &mut Graph<'_>, ex: &Example) -> Result<Var> {
            let x = g.constant(Tensor::vector(self.xs[ex.query].to_vec()));
            let z = self.lin.forward(g, x)?;
            let z = g.affine(z, 5.0, 0.0);
            g.sigmoid(z)
        }
        fn epoch_examples(&self, _rng: &mut ChaCha8Rng) -> Result<Vec<Example>> {
            Ok((0..30).map(|i| Example { query: i, candidate: i, label: Self::label(&self.xs[i]) }).collect())
        }
        fn validation_examples(&self) -> &[Example] {
            &self.val
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let mut store = ParamStore::new();
        let toy = Toy::new(&mut store);
        let before = store.named_tensors();
        let cfg = TrainConfig {
            epochs: 1,
            batch: 64,
            adam: AdamConfig { lr: 0.0, ..AdamConfig::default() },
            ..TrainConfig::default()
        };
        let log = train(&mut store, &toy, &cfg).unwrap();
        assert_eq!(store.named_tensors(), before);
        assert_eq!(log.epochs.len(), 1);
        assert_eq!(log.epochs[0].steps, 1);
        assert!(log.epochs[0].train_loss.is_finite() && log.epochs[0].train_loss > 0.0);
    }

    #[test]
    fn learns_and_is_deterministic() {
        let run = || {
            let mut store = ParamStore::new();
            let toy = Toy::new(&mut store);
            let cfg = TrainConfig {
                epochs: 40,
                batch: 8,
                seed: 11,
                adam: AdamConfig { lr: 0.05, ..AdamConfig::default() },
                ..TrainConfig::default()
            };
            let log = train(&mut store, &toy, &cfg).unwrap();
            let val = evaluate_loss(&store, &toy, &toy.val).unwrap();
            (log, val, store.named_tensors())
        };
        let (a, va, pa) = run();
        let (b, vb, pb) = run();
        assert_eq!(a.to_json_lines(), b.to_json_lines());
        assert_eq!(pa, pb);
        assert_eq!(va, vb);
        assert!(va < 0.3, "{va}");
        // the kept parameters are those of the best epoch
        assert_eq!(Some(va), a.best_val_loss);
    }

    #[test]
    fn divergence_is_reported() {
        struct Nan;
        impl Task for Nan {
            fn prob(&self, g: &mut Graph<'_>, _ex: &Example) -> Result<Var> {
                Ok(g.constant(Tensor::vector(vec![f64::NAN])))
            }
            fn epoch_examples(&self, _rng: &mut ChaCha8Rng) -> Result<Vec<Example>> {
                Ok(vec![Example { query: 0, candidate: 0, label: 1.0 }])
            }
            fn validation_examples(&self) -> &[Example] {
                &[Example { query: 0, candidate: 0, label: 1.0 }]
            }
        }
        let mut store = ParamStore::new();
        let err = train(&mut store, &Nan, &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Divergence { epoch: 1, step: 0, .. }), "{err}");
    }
}
