//! Named parameter storage and the small learned layers shared by the
//! branches, encoders and heads.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{ConvPadding, Graph, Result, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    /// Position in the owning store.
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    /// Buffers (feature statistics, frozen filters) are stored and
    /// serialized but never updated by the optimizer.
    pub trainable: bool,
}

/// Ordered collection of named tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry {
            name,
            value,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count of trainable parameters.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }
}

/// Lazily records parameters on a graph, once per graph.
pub struct Binder<'a> {
    store: &'a ParamStore,
    vars: Vec<Option<Var>>,
    train: bool,
}

impl<'a> Binder<'a> {
    /// With `train` set, trainable parameters become gradient-carrying leaves.
    pub fn new(store: &'a ParamStore, train: bool) -> Self {
        Self {
            store,
            vars: vec![None; store.len()],
            train,
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn var(&mut self, g: &mut Graph, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let e = &self.store.entries[id.0];
        let v = g.leaf(e.value.clone(), self.train && e.trainable);
        self.vars[id.0] = Some(v);
        v
    }

    /// Gradients of every bound trainable parameter after a backward pass.
    pub fn grads(&self, g: &Graph) -> Vec<(ParamId, Tensor)> {
        self.vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.and_then(|v| g.grad(v)).map(|t| (ParamId(i), t)))
            .collect()
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (1.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("positive extents")
}

/// `y = x W + b` over rows of `x`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = store.add(format!("{name}.weight"), uniform(rng, &[fan_in, fan_out], fan_in), true);
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]), true);
        Self { w, b: Some(b) }
    }

    /// `y = x W`. Used where a bias is provably inert, such as attention
    /// keys: a shift shared by every logit of a row cancels in the softmax.
    pub fn without_bias(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = store.add(format!("{name}.weight"), uniform(rng, &[fan_in, fan_out], fan_in), true);
        Self { w, b: None }
    }

    pub fn forward(&self, g: &mut Graph, p: &mut Binder<'_>, x: Var) -> Result<Var> {
        let w = p.var(g, self.w);
        match self.b {
            Some(b) => {
                let b = p.var(g, b);
                g.affine(x, w, b)
            }
            None => g.matmul(x, w),
        }
    }
}

/// Learned 2-D convolution over `[H, W, Cin]` with a per-channel bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub k: ParamId,
    pub b: ParamId,
    pub padding: ConvPadding,
}

impl Conv {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        size: usize,
        cin: usize,
        cout: usize,
    ) -> Self {
        let fan_in = size * size * cin;
        let k = store.add(format!("{name}.kernel"), uniform(rng, &[size, size, cin, cout], fan_in), true);
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]), true);
        Self {
            k,
            b,
            padding: ConvPadding::Same,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &mut Binder<'_>, x: Var) -> Result<Var> {
        let (k, b) = (p.var(g, self.k), p.var(g, self.b));
        let y = g.conv2d(x, k, 1, self.padding)?;
        g.add_cols(y, b)
    }
}

/// Layer normalization with a learned affine `(gamma, beta)`, initialized to `(1, 0)`.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::ones(&[dim]), true);
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[dim]), true);
        Self { gamma, beta }
    }

    pub fn forward(&self, g: &mut Graph, p: &mut Binder<'_>, x: Var) -> Result<Var> {
        let (gm, bt) = (p.var(g, self.gamma), p.var(g, self.beta));
        let n = g.layer_norm(x);
        let y = g.mul_cols(n, gm)?;
        g.add_cols(y, bt)
    }
}

/// Fixed per-channel standardization `(x - mean) / std`, stored as buffers
/// and fitted from training features.
#[derive(Clone, Debug)]
pub struct Standardize {
    pub mean: ParamId,
    pub inv_std: ParamId,
}

impl Standardize {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let mean = store.add(format!("{name}.mean"), Tensor::zeros(&[channels]), false);
        let inv_std = store.add(format!("{name}.inv_std"), Tensor::ones(&[channels]), false);
        Self { mean, inv_std }
    }

    pub fn forward(&self, g: &mut Graph, p: &mut Binder<'_>, x: Var) -> Result<Var> {
        let store = p.store();
        let neg_mean: Vec<f64> = store.get(self.mean).data().iter().map(|v| -v).collect();
        let shift = g.constant(Tensor::new(vec![neg_mean.len()], neg_mean)?);
        let scale = p.var(g, self.inv_std);
        let y = g.add_cols(x, shift)?;
        g.mul_cols(y, scale)
    }

    /// Sets the statistics from samples laid out with channels last.
    pub fn fit<'t>(&self, store: &mut ParamStore, samples: impl IntoIterator<Item = &'t Tensor>) {
        let c = store.get(self.mean).len();
        let mut sum = vec![0.0; c];
        let mut sq = vec![0.0; c];
        let mut n = 0usize;
        for t in samples {
            for row in t.data().chunks_exact(c) {
                for j in 0..c {
                    sum[j] += row[j];
                    sq[j] += row[j] * row[j];
                }
                n += 1;
            }
        }
        if n == 0 {
            return;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let inv: Vec<f64> = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let sd = (q / n as f64 - m * m).max(0.0).sqrt();
                // Channels that never vary are only centred.
                if sd < 1e-6 {
                    1.0
                } else {
                    1.0 / sd
                }
            })
            .collect();
        store.get_mut(self.mean).data_mut().copy_from_slice(&mean);
        store.get_mut(self.inv_std).data_mut().copy_from_slice(&inv);
    }
}

/// Compares analytic parameter gradients of `loss` with central differences
/// on up to `per_param` evenly spaced coordinates of every trainable tensor.
/// Returns the worst [`relative_error`](crate::tensor::relative_error) and the
/// name of the tensor where it occurred.
pub fn param_grad_check<F, E>(
    store: &ParamStore,
    loss: F,
    per_param: usize,
    h: f64,
) -> std::result::Result<(f64, String), E>
where
    F: Fn(&mut Graph, &mut Binder<'_>) -> std::result::Result<Var, E>,
    E: From<crate::tensor::TensorError>,
{
    param_grad_check_faulted(store, loss, per_param, h, None)
}

/// [`param_grad_check`] with the backward rule of op `fault` corrupted in
/// the analytic pass.
pub fn param_grad_check_faulted<F, E>(
    store: &ParamStore,
    loss: F,
    per_param: usize,
    h: f64,
    fault: Option<&str>,
) -> std::result::Result<(f64, String), E>
where
    F: Fn(&mut Graph, &mut Binder<'_>) -> std::result::Result<Var, E>,
    E: From<crate::tensor::TensorError>,
{
    let mut g = Graph::new();
    if let Some(op) = fault {
        g.inject_fault(op);
    }
    let mut binder = Binder::new(store, true);
    let out = loss(&mut g, &mut binder)?;
    g.backward(out)?;
    let grads: HashMap<ParamId, Tensor> = binder.grads(&g).into_iter().collect();

    let eval = |s: &ParamStore| -> std::result::Result<f64, E> {
        let mut g = Graph::new();
        let mut b = Binder::new(s, false);
        let out = loss(&mut g, &mut b)?;
        Ok(g.value(out).item()?)
    };

    let mut work = store.clone();
    let mut worst = (0.0, String::new());
    for id in store.ids() {
        let e = store.entry(id);
        if !e.trainable {
            continue;
        }
        let n = e.value.len();
        let step = (n / per_param.max(1)).max(1);
        for j in (0..n).step_by(step).take(per_param) {
            let orig = e.value.data()[j];
            work.get_mut(id).data_mut()[j] = orig + h;
            let fp = eval(&work)?;
            work.get_mut(id).data_mut()[j] = orig - h;
            let fm = eval(&work)?;
            work.get_mut(id).data_mut()[j] = orig;
            let analytic = grads.get(&id).map_or(0.0, |t| t.data()[j]);
            let err = crate::tensor::relative_error(analytic, (fp - fm) / (2.0 * h));
            if err > worst.0 {
                worst = (err, e.name.clone());
            }
        }
    }
    Ok(worst)
}
