//! Central finite-difference checks of reverse-mode gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio_encoder::AudioEncoder;
use crate::error::Result;
use crate::fusion::{FusionConfig, FusionPair};
use crate::graph::{Graph, Mode, Var};
use crate::image::{ImageConfig, ImageEncoder, ImageInput, ImagePathway};
use crate::model::{Model, ModelConfig, Variant};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::text::{embedding_matrix, TextEncoder, TextPair, Vocabulary};
use crate::train::bce;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// Location of the largest error, e.g. `"fusion.tv.m.w[3]"`.
    pub worst: String,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        if other.max_rel_err > self.max_rel_err || self.worst.is_empty() {
            self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
            if other.max_rel_err >= self.max_rel_err {
                self.worst = other.worst;
            }
        }
    }

    fn record(&mut self, analytic: f64, numeric: f64, at: impl FnOnce() -> String) {
        self.checked += 1;
        let e = rel_err(analytic, numeric);
        if e > self.max_rel_err || self.worst.is_empty() {
            self.max_rel_err = self.max_rel_err.max(e);
            self.worst = at();
        }
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Checks every trainable parameter scalar in `store` against central differences of `loss`.
/// Forward passes run in train mode without applying running-statistic updates.
pub fn check_params<F>(store: &mut ParamStore, loss: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new(store, Mode::Train);
        let l = loss(&mut g)?;
        let grads = g.backward(l)?;
        store
            .ids()
            .map(|id| {
                grads
                    .param(id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(store.value(id).shape()))
            })
            .collect::<Vec<_>>()
    };
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(store, Mode::Train);
        let l = loss(&mut g)?;
        g.value(l).item()
    };
    let mut report = GradCheckReport::default();
    let ids: Vec<_> = store.ids().collect();
    for (id, grad) in ids.into_iter().zip(analytic) {
        if !store.param(id).trainable {
            continue;
        }
        for i in 0..grad.numel() {
            let orig = store.value(id).data()[i];
            store.param_mut(id).value.data_mut()[i] = orig + FD_STEP;
            let plus = eval(store)?;
            store.param_mut(id).value.data_mut()[i] = orig - FD_STEP;
            let minus = eval(store)?;
            store.param_mut(id).value.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            report.record(grad.data()[i], numeric, || format!("{}[{i}]", store.param(id).name));
        }
    }
    Ok(report)
}

/// Checks gradients with respect to input tensors of `f`.
pub fn check_inputs<F>(store: &ParamStore, inputs: &[Tensor], f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Result<Var>,
{
    let run = |inputs: &[Tensor]| -> Result<(f64, Vec<Option<Tensor>>)> {
        let mut g = Graph::new(store, Mode::Train);
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let l = f(&mut g, &vars)?;
        let value = g.value(l).item()?;
        let grads = g.backward(l)?;
        Ok((value, vars.iter().map(|&v| grads.wrt(v)).collect()))
    };
    let (_, analytic) = run(inputs)?;
    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        for i in 0..input.numel() {
            let orig = input.data()[i];
            work[k].data_mut()[i] = orig + FD_STEP;
            let plus = run(&work)?.0;
            work[k].data_mut()[i] = orig - FD_STEP;
            let minus = run(&work)?.0;
            work[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic[k].as_ref().map_or(0.0, |t| t.data()[i]);
            report.record(a, numeric, || format!("input{k}[{i}]"));
        }
    }
    Ok(report)
}

/// Reduces any output to a scalar through a fixed random projection so every output
/// element contributes a distinct weight.
fn project(g: &mut Graph<'_>, out: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
    let n: usize = g.shape(out).iter().product();
    let flat = g.reshape(out, &[n])?;
    let w = g.constant(Tensor::uniform(&[n], -1.0, 1.0, rng));
    g.dot(flat, w)
}

/// Zero-initialized biases behind a dead layer put ReLU inputs exactly on the kink,
/// where the finite difference sees half a slope. Small positive biases move them off.
fn offset_biases(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if store.param(id).name.ends_with(".b") {
            let shape = store.value(id).shape().to_vec();
            store.param_mut(id).value = Tensor::uniform(&shape, 0.05, 0.3, rng);
        }
    }
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

type OpCase = (&'static str, Vec<Vec<usize>>, fn(&mut Graph<'_>, &[Var]) -> Result<Var>);

fn op_cases() -> Vec<OpCase> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], |g, x| g.matmul(x[0], x[1])),
        ("matvec", vec![vec![3, 4], vec![4]], |g, x| g.matmul(x[0], x[1])),
        ("add", vec![vec![2, 3], vec![2, 3]], |g, x| g.add(x[0], x[1])),
        ("sub", vec![vec![2, 3], vec![2, 3]], |g, x| g.sub(x[0], x[1])),
        ("mul", vec![vec![2, 3], vec![2, 3]], |g, x| g.mul(x[0], x[1])),
        ("mul_broadcast_row", vec![vec![3, 4], vec![4]], |g, x| g.mul(x[0], x[1])),
        ("tanh", vec![vec![5]], |g, x| g.tanh(x[0])),
        ("sigmoid", vec![vec![5]], |g, x| g.sigmoid(x[0])),
        ("relu", vec![vec![6]], |g, x| g.relu(x[0])),
        ("exp", vec![vec![4]], |g, x| g.exp(x[0])),
        ("log", vec![vec![4]], |g, x| {
            let p = g.exp(x[0])?;
            g.log(p)
        }),
        ("clamp", vec![vec![6]], |g, x| Ok(g.clamp(x[0], -0.5, 0.5))),
        ("affine", vec![vec![3]], |g, x| Ok(g.affine(x[0], -1.5, 0.25))),
        ("softmax", vec![vec![5]], |g, x| g.softmax(x[0])),
        ("masked_softmax", vec![vec![5]], |g, x| {
            g.masked_softmax(x[0], Some(&[true, false, true, true, false]))
        }),
        ("transpose", vec![vec![2, 3]], |g, x| g.transpose(x[0])),
        ("reshape", vec![vec![2, 3]], |g, x| g.reshape(x[0], &[3, 2])),
        ("permute", vec![vec![2, 3, 4]], |g, x| g.permute(x[0], &[2, 0, 1])),
        ("concat", vec![vec![2, 3], vec![1, 3]], |g, x| g.concat(&[x[0], x[1]], 0)),
        ("slice", vec![vec![4, 3]], |g, x| g.slice(x[0], 1, 1, 2)),
        ("row", vec![vec![3, 2]], |g, x| g.row(x[0], 1)),
        ("stack_rows", vec![vec![3], vec![3]], |g, x| g.stack_rows(&[x[0], x[1]])),
        ("mean_rows", vec![vec![4, 3]], |g, x| g.mean_rows(x[0])),
        ("sum", vec![vec![2, 3]], |g, x| Ok(g.sum(x[0]))),
        ("mean", vec![vec![2, 3]], |g, x| Ok(g.mean(x[0]))),
        ("dot", vec![vec![4], vec![4]], |g, x| g.dot(x[0], x[1])),
        ("conv2d", vec![vec![2, 5, 6], vec![3, 2, 3, 3], vec![3]], |g, x| g.conv2d(x[0], x[1], x[2])),
        ("max_pool2d", vec![vec![2, 5, 6]], |g, x| g.max_pool2d(x[0], 2, 2)),
    ]
}

#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: String,
    pub seed: u64,
    pub report: GradCheckReport,
}

/// Finite-difference checks of every differentiable operation and each composed encoder
/// at downscaled sizes, once per seed.
pub fn suite(seeds: &[u64]) -> Result<Vec<SuiteEntry>> {
    let mut out = Vec::new();
    for &seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut push = |name: &str, report: GradCheckReport| {
            out.push(SuiteEntry {
                name: name.to_string(),
                seed,
                report,
            })
        };
        let empty = ParamStore::new();
        for (name, shapes, f) in op_cases() {
            let inputs: Vec<Tensor> = shapes.iter().map(|s| uniform(s, &mut rng)).collect();
            let proj_seed = rng.gen();
            let rep = check_inputs(&empty, &inputs, |g, x| {
                let y = f(g, x)?;
                project(g, y, &mut ChaCha8Rng::seed_from_u64(proj_seed))
            })?;
            push(name, rep);
        }

        let mut norm_store = ParamStore::new();
        let norm = norm_store.add_norm("bn", 3);
        let inputs = [uniform(&[3, 4, 5], &mut rng), uniform(&[3], &mut rng), uniform(&[3], &mut rng)];
        let proj_seed = rng.gen();
        push(
            "batch_norm",
            check_inputs(&norm_store, &inputs, |g, x| {
                let y = g.batch_norm(x[0], x[1], x[2], norm)?;
                project(g, y, &mut ChaCha8Rng::seed_from_u64(proj_seed))
            })?,
        );

        let mut store = ParamStore::new();
        let table = store.add("table", uniform(&[5, 3], &mut rng));
        let proj_seed = rng.gen();
        push(
            "gather_rows",
            check_params(&mut store, |g| {
                let y = g.gather_rows(table, &[4, 1, 4, 2])?;
                project(g, y, &mut ChaCha8Rng::seed_from_u64(proj_seed))
            })?,
        );

        push("attention_bigru", text_case(&mut rng)?);
        push("dcrnn", audio_case(&mut rng)?);
        push("image_cnn", image_case(&mut rng)?);
        push("cmf_ap", fusion_case(&mut rng)?);
        push("jtav", model_case(&mut rng)?);
    }
    Ok(out)
}

fn text_case(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let cfg = ModelConfig::tiny(Variant::TextOnly).text;
    let vocab = Vocabulary::from_tokens(["a", "b", "c", "d"]);
    let emb = embedding_matrix(&vocab, cfg.embed_dim, None, rng);
    let mut store = ParamStore::new();
    let enc = TextEncoder::new(&mut store, "text", cfg, emb, rng)?;
    let pair = TextPair::from_parts(&[2, 3, 5], Some(&[4, 2]), cfg.max_words, cfg.max_support)?;
    let proj_seed = rng.gen();
    check_params(&mut store, |g| {
        let t = enc.encode(g, &pair)?.t;
        project(g, t, &mut ChaCha8Rng::seed_from_u64(proj_seed))
    })
}

fn audio_case(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let cfg = ModelConfig::tiny(Variant::AudioOnly).audio;
    let mut store = ParamStore::new();
    let enc = AudioEncoder::new(&mut store, "audio", cfg.clone(), rng)?;
    offset_biases(&mut store, rng);
    let spec = uniform(&[1, cfg.bins, 8], rng);
    let proj_seed = rng.gen();
    check_params(&mut store, |g| {
        let x = g.constant(spec.clone());
        let a = enc.encode(g, x)?.a;
        project(g, a, &mut ChaCha8Rng::seed_from_u64(proj_seed))
    })
}

fn image_case(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let cfg = ImageConfig {
        pathway: ImagePathway::Cnn {
            size: 16,
            channels: vec![2, 3, 4],
            pools: vec![2, 2, 2],
        },
        out_dim: 3,
    };
    let mut store = ParamStore::new();
    let enc = ImageEncoder::new(&mut store, "image", &cfg, rng)?;
    offset_biases(&mut store, rng);
    let img = ImageInput::Pixels(Tensor::uniform(&[3, 16, 16], 0.0, 1.0, rng));
    let proj_seed = rng.gen();
    check_params(&mut store, |g| {
        let v = enc.encode(g, &img)?;
        project(g, v, &mut ChaCha8Rng::seed_from_u64(proj_seed))
    })
}

fn fusion_case(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let pair = FusionPair::new(&mut store, "pair", 3, 4, FusionConfig { k: 2, d_prime: 2 }, rng);
    offset_biases(&mut store, rng);
    let m = uniform(&[3], rng);
    let n = uniform(&[4], rng);
    let proj_seed = rng.gen();
    let mut rep = check_params(&mut store, |g| {
        let (m, n) = (g.constant(m.clone()), g.constant(n.clone()));
        let o = pair.forward(g, m, n)?;
        project(g, o.u, &mut ChaCha8Rng::seed_from_u64(proj_seed))
    })?;
    rep.merge(check_inputs(&store, &[m, n], |g, x| {
        let o = pair.forward(g, x[0], x[1])?;
        project(g, o.u, &mut ChaCha8Rng::seed_from_u64(proj_seed))
    })?);
    Ok(rep)
}

/// Two labelled items through the complete model and the loss.
fn model_case(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let cfg = ModelConfig::tiny(Variant::Jtav);
    let vocab = Vocabulary::from_tokens(["a", "b", "c"]);
    let emb = embedding_matrix(&vocab, cfg.text.embed_dim, None, rng);
    let mut store = ParamStore::new();
    let model = Model::new(&mut store, cfg.clone(), Some(emb), rng)?;
    offset_biases(&mut store, rng);
    let items: Vec<(TextPair, Tensor, ImageInput, f64)> = (0..2)
        .map(|i| {
            Ok((
                TextPair::from_parts(&[2 + i, 3, 4], Some(&[4 - i]), cfg.text.max_words, cfg.text.max_support)?,
                uniform(&[1, cfg.audio.bins, 8], rng),
                ImageInput::Features((0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()),
                i as f64,
            ))
        })
        .collect::<Result<_>>()?;
    check_params(&mut store, |g| {
        let mut total = None;
        for (pair, spec, img, y) in &items {
            let s = model.forward(g, pair, spec, img)?;
            let l = bce(g, s.prob, *y)?;
            total = Some(match total {
                Some(t) => g.add(t, l)?,
                None => l,
            });
        }
        Ok(g.affine(total.expect("two items"), 0.5, 0.0))
    })
}
