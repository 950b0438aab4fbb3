//! Trainable layers assembled from graph ops.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{NormId, ParamId, ParamStore};

/// Affine map `y = W x + b` with `W: [out × in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        Self {
            w: store.glorot(format!("{name}.w"), &[out_dim, in_dim], rng),
            b: store.zeros(format!("{name}.b"), &[out_dim]),
            in_dim,
            out_dim,
        }
    }

    /// Maps a vector `[in]` to `[out]`, or each row of `[n × in]` to `[n × out]`.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = match g.shape(x).len() {
            1 => g.matmul(w, x)?,
            2 => {
                let wt = g.transpose(w)?;
                g.matmul(x, wt)?
            }
            _ => return Err(Error::shape("linear", g.shape(x), &[self.in_dim])),
        };
        g.add(y, b)
    }
}

/// One conv → batch norm → relu → max-pool stage.
#[derive(Clone, Debug)]
pub struct ConvBnPool {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub norm: NormId,
    pub c_in: usize,
    pub c_out: usize,
    pub pool: (usize, usize),
}

impl ConvBnPool {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        pool: (usize, usize),
        rng: &mut R,
    ) -> Self {
        Self {
            kernel: store.glorot(format!("{name}.conv.k"), &[c_out, c_in, kernel, kernel], rng),
            bias: store.zeros(format!("{name}.conv.b"), &[c_out]),
            gamma: store.ones(format!("{name}.bn.gamma"), &[c_out]),
            beta: store.zeros(format!("{name}.bn.beta"), &[c_out]),
            norm: store.add_norm(format!("{name}.bn"), c_out),
            c_in,
            c_out,
            pool,
        }
    }

    /// Pool window actually applied to an `h × w` input: each axis clamps to 1 once its extent is 1.
    pub fn effective_pool(&self, h: usize, w: usize) -> (usize, usize) {
        (
            if h <= 1 { 1 } else { self.pool.0 },
            if w <= 1 { 1 } else { self.pool.1 },
        )
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let k = g.param(self.kernel);
        let b = g.param(self.bias);
        let y = g.conv2d(x, k, b)?;
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        let y = g.batch_norm(y, gamma, beta, self.norm)?;
        let y = g.relu(y)?;
        let s = g.shape(y);
        let (ph, pw) = self.effective_pool(s[1], s[2]);
        g.max_pool2d(y, ph, pw)
    }
}

/// Gated recurrent unit with sigmoid update/reset gates and a tanh candidate:
///
/// z = σ(W_z x + U_z h + b_z), r = σ(W_r x + U_r h + b_r),
/// n = tanh(W_n x + U_n (r ⊙ h) + b_n), h' = z ⊙ h + (1 − z) ⊙ n.
#[derive(Clone, Debug)]
pub struct Gru {
    /// Stacked `[W_z; W_r; W_n]`, shape `[3H × D]`.
    pub w: ParamId,
    /// Stacked `[U_z; U_r; U_n]`, shape `[3H × H]`.
    pub u: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl Gru {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            w: store.glorot(format!("{name}.w"), &[3 * hidden, input], rng),
            u: store.glorot(format!("{name}.u"), &[3 * hidden, hidden], rng),
            b: store.zeros(format!("{name}.b"), &[3 * hidden]),
            input,
            hidden,
        }
    }

    /// Runs over the rows of `xs: [T × D]` from a zero state and returns the hidden
    /// state at every step, indexed by time (also when `reverse` is set).
    pub fn run(&self, g: &mut Graph<'_>, xs: Var, reverse: bool) -> Result<Vec<Var>> {
        let s = g.shape(xs).to_vec();
        if s.len() != 2 || s[1] != self.input {
            return Err(Error::shape("gru input", &s, &[0, self.input]));
        }
        let (steps, h) = (s[0], self.hidden);
        if steps == 0 {
            return Err(Error::EmptyInput("gru"));
        }
        let w = g.param(self.w);
        let wt = g.transpose(w)?;
        let xw = g.matmul(xs, wt)?;
        let b = g.param(self.b);
        let xw = g.add(xw, b)?;
        let u = g.param(self.u);
        let u_zr = g.slice(u, 0, 0, 2 * h)?;
        let u_n = g.slice(u, 0, 2 * h, h)?;

        let mut state = g.constant(crate::tensor::Tensor::zeros(&[h]));
        let mut out = vec![state; steps];
        let order: Vec<usize> = if reverse { (0..steps).rev().collect() } else { (0..steps).collect() };
        for t in order {
            let xt = g.row(xw, t)?;
            let x_zr = g.slice(xt, 0, 0, 2 * h)?;
            let x_n = g.slice(xt, 0, 2 * h, h)?;
            let h_zr = g.matmul(u_zr, state)?;
            let zr = g.add(x_zr, h_zr)?;
            let zr = g.sigmoid(zr)?;
            let z = g.slice(zr, 0, 0, h)?;
            let r = g.slice(zr, 0, h, h)?;
            let rh = g.mul(r, state)?;
            let h_n = g.matmul(u_n, rh)?;
            let n = g.add(x_n, h_n)?;
            let n = g.tanh(n)?;
            // h' = n + z ⊙ (h − n)
            let d = g.sub(state, n)?;
            let zd = g.mul(z, d)?;
            state = g.add(n, zd)?;
            out[t] = state;
        }
        Ok(out)
    }
}

/// Hidden states of the top layer of a bidirectional stack, indexed by time.
pub struct BiStates {
    pub forward: Vec<Var>,
    pub backward: Vec<Var>,
}

impl BiStates {
    /// `[T × 2H]` with row `t = [forward_t ; backward_t]`.
    pub fn rows(&self, g: &mut Graph<'_>) -> Result<Var> {
        let f = g.stack_rows(&self.forward)?;
        let b = g.stack_rows(&self.backward)?;
        g.concat(&[f, b], 1)
    }

    /// Last forward state followed by the first backward state.
    pub fn summary(&self, g: &mut Graph<'_>) -> Result<Var> {
        let last = *self.forward.last().ok_or(Error::EmptyInput("bigru"))?;
        g.concat(&[last, self.backward[0]], 0)
    }
}

/// Stacked bidirectional GRU; each layer above the first reads `[forward ; backward]` rows.
#[derive(Clone, Debug)]
pub struct BiGru {
    pub layers: Vec<(Gru, Gru)>,
}

impl BiGru {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        depth: usize,
        rng: &mut R,
    ) -> Self {
        let layers = (0..depth)
            .map(|l| {
                let d = if l == 0 { input } else { 2 * hidden };
                (
                    Gru::new(store, &format!("{name}.l{l}.fwd"), d, hidden, rng),
                    Gru::new(store, &format!("{name}.l{l}.bwd"), d, hidden, rng),
                )
            })
            .collect();
        Self { layers }
    }

    pub fn hidden(&self) -> usize {
        self.layers[0].0.hidden
    }

    pub fn forward(&self, g: &mut Graph<'_>, xs: Var) -> Result<BiStates> {
        let mut input = xs;
        let mut states = None;
        for (i, (f, b)) in self.layers.iter().enumerate() {
            let s = BiStates {
                forward: f.run(g, input, false)?,
                backward: b.run(g, input, true)?,
            };
            if i + 1 < self.layers.len() {
                input = s.rows(g)?;
            }
            states = Some(s);
        }
        states.ok_or(Error::Config("bidirectional GRU needs at least one layer".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_inputs, check_params};
    use crate::graph::Mode;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn readout(g: &mut Graph<'_>, y: Var, seed: u64) -> Result<Var> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let w = Tensor::uniform(g.shape(y), -1.0, 1.0, &mut r);
        let w = g.constant(w);
        g.dot(y, w)
    }

    /// Plain-loop GRU over `xs` used as an independent reference.
    fn gru_reference(store: &ParamStore, cell: &Gru, xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let (w, u, b) = (store.value(cell.w), store.value(cell.u), store.value(cell.b));
        let (hd, d) = (cell.hidden, cell.input);
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut h = vec![0.0; hd];
        let mut out = Vec::new();
        for x in xs {
            let lin = |row: usize, v: &[f64], m: &Tensor, cols: usize| -> f64 {
                (0..cols).map(|j| m.data()[row * cols + j] * v[j]).sum()
            };
            let z: Vec<f64> = (0..hd).map(|i| sig(lin(i, x, w, d) + lin(i, &h, u, hd) + b.data()[i])).collect();
            let r: Vec<f64> = (0..hd)
                .map(|i| sig(lin(hd + i, x, w, d) + lin(hd + i, &h, u, hd) + b.data()[hd + i]))
                .collect();
            let rh: Vec<f64> = r.iter().zip(&h).map(|(a, b)| a * b).collect();
            let n: Vec<f64> = (0..hd)
                .map(|i| (lin(2 * hd + i, x, w, d) + lin(2 * hd + i, &rh, u, hd) + b.data()[2 * hd + i]).tanh())
                .collect();
            h = (0..hd).map(|i| z[i] * h[i] + (1.0 - z[i]) * n[i]).collect();
            out.push(h.clone());
        }
        out
    }

    #[test]
    fn gru_matches_reference_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let cell = Gru::new(&mut store, "g", 4, 3, &mut rng);
        store.param_mut(cell.b).value = Tensor::uniform(&[9], -0.5, 0.5, &mut rng);
        let xs = Tensor::uniform(&[5, 4], -1.0, 1.0, &mut rng);
        let rows: Vec<Vec<f64>> = xs.data().chunks(4).map(<[f64]>::to_vec).collect();
        let expected = gru_reference(&store, &cell, &rows);
        let mut g = Graph::new(&store, Mode::Eval);
        let x = g.constant(xs.clone());
        let hs = cell.run(&mut g, x, false).unwrap();
        for (t, v) in hs.iter().enumerate() {
            for (a, e) in g.value(*v).data().iter().zip(&expected[t]) {
                assert!((a - e).abs() < 1e-12);
            }
        }
        // reverse direction equals forward over the reversed sequence
        let rev_rows: Vec<Vec<f64>> = rows.iter().rev().cloned().collect();
        let rev_expected = gru_reference(&store, &cell, &rev_rows);
        let hs = cell.run(&mut g, x, true).unwrap();
        for t in 0..5 {
            for (a, e) in g.value(hs[t]).data().iter().zip(&rev_expected[4 - t]) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_gru_outputs_zero() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cell = Gru::new(&mut store, "g", 3, 2, &mut rng);
        for id in [cell.w, cell.u] {
            store.param_mut(id).value.fill(0.0);
        }
        let mut g = Graph::new(&store, Mode::Eval);
        let x = g.constant(Tensor::zeros(&[4, 3]));
        for h in cell.run(&mut g, x, false).unwrap() {
            assert!(g.value(h).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn gru_gradients_match_finite_differences() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let cell = Gru::new(&mut store, "g", 5, 3, &mut rng);
            store.param_mut(cell.b).value = Tensor::uniform(&[9], -0.5, 0.5, &mut rng);
            let xs = Tensor::uniform(&[4, 5], -1.0, 1.0, &mut rng);
            let xc = xs.clone();
            let rep = check_params(&mut store, |g| {
                let x = g.constant(xc.clone());
                let hs = cell.run(g, x, false)?;
                let all = g.stack_rows(&hs)?;
                readout(g, all, seed)
            })
            .unwrap();
            assert!(rep.max_rel_err < 1e-4, "{rep:?}");
            let rep = check_inputs(&store, &[xs], |g, v| {
                let hs = cell.run(g, v[0], true)?;
                let all = g.stack_rows(&hs)?;
                readout(g, all, seed)
            })
            .unwrap();
            assert!(rep.max_rel_err < 1e-4, "{rep:?}");
        }
    }

    #[test]
    fn stacked_bigru_summary_and_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let net = BiGru::new(&mut store, "rnn", 5, 4, 2, &mut rng);
        let xs = Tensor::uniform(&[3, 5], -1.0, 1.0, &mut rng);
        {
            let mut g = Graph::new(&store, Mode::Eval);
            let x = g.constant(xs.clone());
            let st = net.forward(&mut g, x).unwrap();
            let s = st.summary(&mut g).unwrap();
            assert_eq!(g.shape(s), &[8]);
            let rows = st.rows(&mut g).unwrap();
            assert_eq!(g.shape(rows), &[3, 8]);
        }
        let rep = check_params(&mut store, |g| {
            let x = g.constant(xs.clone());
            let st = net.forward(g, x)?;
            let s = st.summary(g)?;
            readout(g, s, 1)
        })
        .unwrap();
        assert!(rep.max_rel_err < 1e-4, "{rep:?}");
    }

    #[test]
    fn single_step_bigru_reads_the_same_frame() {
        // T = 1: both directions see only frame 0, so identical cells agree.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let net = BiGru::new(&mut store, "rnn", 3, 2, 1, &mut rng);
        let (f, b) = &net.layers[0];
        for (src, dst) in [(f.w, b.w), (f.u, b.u), (f.b, b.b)] {
            store.param_mut(dst).value = store.value(src).clone();
        }
        let mut g = Graph::new(&store, Mode::Eval);
        let x = g.constant(Tensor::uniform(&[1, 3], -1.0, 1.0, &mut rng));
        let st = net.forward(&mut g, x).unwrap();
        let s = st.summary(&mut g).unwrap();
        let d = g.value(s).data();
        assert_eq!(d[..2], d[2..]);
    }

    #[test]
    fn conv_stage_shapes_and_clamp() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let stage = ConvBnPool::new(&mut store, "s", 1, 32, 3, (2, 2), &mut rng);
        let mut g = Graph::new(&store, Mode::Train);
        let x = g.constant(Tensor::uniform(&[1, 96, 216], -1.0, 1.0, &mut rng));
        let y = stage.forward(&mut g, x).unwrap();
        assert_eq!(g.shape(y), &[32, 48, 108]);
        let flat = g.constant(Tensor::uniform(&[1, 1, 9], -1.0, 1.0, &mut rng));
        let y = stage.forward(&mut g, flat).unwrap();
        assert_eq!(g.shape(y), &[32, 1, 5]);
    }

    #[test]
    fn conv_stage_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let stage = ConvBnPool::new(&mut store, "s", 1, 2, 3, (2, 2), &mut rng);
        let x = Tensor::uniform(&[1, 4, 4], -1.0, 1.0, &mut rng);
        let rep = check_params(&mut store, |g| {
            let xv = g.constant(x.clone());
            let y = stage.forward(g, xv)?;
            readout(g, y, 2)
        })
        .unwrap();
        assert!(rep.max_rel_err < 1e-5, "{rep:?}");
    }

    #[test]
    fn linear_vector_and_rows_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "fc", 3, 2, &mut rng);
        store.param_mut(lin.b).value = Tensor::vector(vec![0.5, -0.5]);
        let xs = Tensor::uniform(&[2, 3], -1.0, 1.0, &mut rng);
        let mut g = Graph::new(&store, Mode::Eval);
        let x = g.constant(xs.clone());
        let y = lin.forward(&mut g, x).unwrap();
        for i in 0..2 {
            let r = g.row(x, i).unwrap();
            let yi = lin.forward(&mut g, r).unwrap();
            assert_eq!(g.value(yi).data(), &g.value(y).data()[i * 2..i * 2 + 2]);
        }
    }
}
