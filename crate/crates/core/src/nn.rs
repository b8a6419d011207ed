//! Small fully connected networks with hand-written backpropagation and Adam.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activation output `y`.
    #[inline]
    fn derivative_from_output<T: Real>(self, y: T) -> T {
        match self {
            Activation::Identity => T::one(),
            Activation::Tanh => T::one() - y * y,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Layer<T: Real> {
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
    /// Row-major `outputs x inputs`.
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Layer<T> {
    fn forward(&self, x: &[T]) -> Vec<T> {
        (0..self.outputs)
            .map(|o| {
                let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
                let s: T = row.iter().zip(x).map(|(&w, &v)| w * v).sum();
                self.activation.apply(s + self.bias[o])
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Mlp<T: Real> {
    pub layers: Vec<Layer<T>>,
}

/// Layer outputs of one forward pass, input first.
#[derive(Debug, Clone)]
pub struct Trace<T> {
    pub values: Vec<Vec<T>>,
}

impl<T: Clone> Trace<T> {
    pub fn output(&self) -> &[T] {
        self.values.last().expect("trace has the input")
    }
}

/// Parameter gradients with the same shapes as an [`Mlp`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub layers: Vec<(Vec<T>, Vec<T>)>,
}

impl<T: Real> Gradients<T> {
    pub fn zeros_like(net: &Mlp<T>) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| (vec![T::zero(); l.weights.len()], vec![T::zero(); l.bias.len()]))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            for (a, &c) in w.iter_mut().zip(ow) {
                *a += c;
            }
            for (a, &c) in b.iter_mut().zip(ob) {
                *a += c;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for (w, b) in &mut self.layers {
            for a in w.iter_mut().chain(b.iter_mut()) {
                *a *= s;
            }
        }
    }

    pub fn flat(&self) -> Vec<T> {
        self.layers
            .iter()
            .flat_map(|(w, b)| w.iter().chain(b).copied())
            .collect()
    }
}

impl<T: Real> Mlp<T> {
    /// Glorot-uniform weights and zero biases. `sizes` lists the layer widths
    /// from input to output.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], hidden: Activation, output: Activation, rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least an input and an output width");
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (n_in, n_out) = (w[0], w[1]);
                let limit = (6.0 / (n_in + n_out) as f64).sqrt();
                let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
                Layer {
                    inputs: n_in,
                    outputs: n_out,
                    activation: if i + 2 == sizes.len() { output } else { hidden },
                    weights: (0..n_in * n_out).map(|_| T::lit(dist.sample(rng))).collect(),
                    bias: vec![T::zero(); n_out],
                }
            })
            .collect();
        Self { layers }
    }

    /// Same shapes with every parameter zero.
    pub fn zeroed(&self) -> Self {
        let mut z = self.clone();
        for l in &mut z.layers {
            l.weights.iter_mut().for_each(|w| *w = T::zero());
            l.bias.iter_mut().for_each(|b| *b = T::zero());
        }
        z
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").outputs
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::input("network has no layers"));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.weights.len() != l.inputs * l.outputs || l.bias.len() != l.outputs {
                return Err(Error::input(format!("layer {i} parameter shape mismatch")));
            }
            if i > 0 && self.layers[i - 1].outputs != l.inputs {
                return Err(Error::input(format!("layer {i} input width does not match layer {}", i - 1)));
            }
            if l.weights.iter().chain(&l.bias).any(|v| !v.is_finite()) {
                return Err(Error::input(format!("layer {i} has non-finite parameters")));
            }
        }
        Ok(())
    }

    pub fn forward(&self, x: &[T]) -> Vec<T> {
        assert_eq!(x.len(), self.input_dim(), "network input width");
        let mut h = x.to_vec();
        for l in &self.layers {
            h = l.forward(&h);
        }
        h
    }

    pub fn forward_trace(&self, x: &[T]) -> Trace<T> {
        assert_eq!(x.len(), self.input_dim(), "network input width");
        let mut values = Vec::with_capacity(self.layers.len() + 1);
        values.push(x.to_vec());
        for l in &self.layers {
            let next = l.forward(values.last().expect("non-empty"));
            values.push(next);
        }
        Trace { values }
    }

    /// Accumulates `dL/dθ` into `grads` given `dL/d(output)` and returns `dL/d(input)`.
    pub fn backward(&self, trace: &Trace<T>, grad_out: &[T], grads: &mut Gradients<T>) -> Vec<T> {
        let mut delta: Vec<T> = grad_out.to_vec();
        for (li, l) in self.layers.iter().enumerate().rev() {
            let y = &trace.values[li + 1];
            let x = &trace.values[li];
            for (d, &yo) in delta.iter_mut().zip(y) {
                *d *= l.activation.derivative_from_output(yo);
            }
            let (gw, gb) = &mut grads.layers[li];
            let mut dx = vec![T::zero(); l.inputs];
            for o in 0..l.outputs {
                let d = delta[o];
                gb[o] += d;
                if d == T::zero() {
                    continue;
                }
                let row = o * l.inputs;
                for i in 0..l.inputs {
                    gw[row + i] += d * x[i];
                    dx[i] += d * l.weights[row + i];
                }
            }
            delta = dx;
        }
        delta
    }

    pub fn params(&self) -> Vec<T> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
            .collect()
    }

    pub fn param_mut(&mut self, mut index: usize) -> &mut T {
        for l in &mut self.layers {
            if index < l.weights.len() {
                return &mut l.weights[index];
            }
            index -= l.weights.len();
            if index < l.bias.len() {
                return &mut l.bias[index];
            }
            index -= l.bias.len();
        }
        panic!("parameter index out of range");
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("network serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let net: Self = serde_json::from_str(text).map_err(|source| Error::Json {
            context: "network weights".into(),
            source,
        })?;
        net.validate()?;
        Ok(net)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam<T: Real> {
    cfg: AdamConfig,
    m: Gradients<T>,
    v: Gradients<T>,
    step: i32,
}

impl<T: Real> Adam<T> {
    pub fn new(net: &Mlp<T>, cfg: AdamConfig) -> Self {
        Self {
            cfg,
            m: Gradients::zeros_like(net),
            v: Gradients::zeros_like(net),
            step: 0,
        }
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.cfg.learning_rate = lr;
    }

    pub fn step(&mut self, net: &mut Mlp<T>, grads: &Gradients<T>) {
        if self.cfg.learning_rate == 0.0 {
            return;
        }
        self.step += 1;
        let (b1, b2) = (T::lit(self.cfg.beta1), T::lit(self.cfg.beta2));
        let c1 = T::one() - b1.powi(self.step);
        let c2 = T::one() - b2.powi(self.step);
        let lr = T::lit(self.cfg.learning_rate);
        let eps = T::lit(self.cfg.epsilon);
        for (li, l) in net.layers.iter_mut().enumerate() {
            let (gw, gb) = &grads.layers[li];
            let (mw, mb) = &mut self.m.layers[li];
            let (vw, vb) = &mut self.v.layers[li];
            let params = l.weights.iter_mut().chain(l.bias.iter_mut());
            let g = gw.iter().chain(gb.iter());
            let m = mw.iter_mut().chain(mb.iter_mut());
            let v = vw.iter_mut().chain(vb.iter_mut());
            for (((p, &g), m), v) in params.zip(g).zip(m).zip(v) {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *p -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Final learning rate as a fraction of the initial one (cosine schedule).
    pub final_lr_fraction: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 32,
            adam: AdamConfig::default(),
            final_lr_fraction: 1.0,
        }
    }
}

/// Cosine annealing factor from 1 at the first epoch to `final_fraction` at the last.
pub fn cosine_factor(epoch: usize, epochs: usize, final_fraction: f64) -> f64 {
    let progress = epoch as f64 / (epochs.max(2) - 1) as f64;
    final_fraction + (1.0 - final_fraction) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Trains `net` on `(input, target)` pairs with mean squared error, Adam and
/// shuffled mini-batches. Returns the per-epoch mean loss (mean over samples
/// of the summed squared error).
pub fn fit_mse<T: Real, R: Rng + ?Sized>(
    net: &mut Mlp<T>,
    inputs: &[Vec<T>],
    targets: &[Vec<T>],
    fit: &FitConfig,
    rng: &mut R,
    mut perturb: impl FnMut(&mut Vec<T>, &mut R),
) -> Result<Vec<f64>> {
    if inputs.len() != targets.len() || inputs.is_empty() {
        return Err(Error::input("training set is empty or inputs and targets differ in length"));
    }
    let mut opt = Adam::new(net, fit.adam);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut curve = Vec::with_capacity(fit.epochs);
    for epoch in 0..fit.epochs {
        opt.set_learning_rate(fit.adam.learning_rate * cosine_factor(epoch, fit.epochs, fit.final_lr_fraction));
        shuffle(&mut order, rng);
        let mut total = 0.0;
        for batch in order.chunks(fit.batch_size.max(1)) {
            let mut grads = Gradients::zeros_like(net);
            for &i in batch {
                let mut x = inputs[i].clone();
                perturb(&mut x, rng);
                let trace = net.forward_trace(&x);
                let out = trace.output();
                let mut g = Vec::with_capacity(out.len());
                for (o, t) in out.iter().zip(&targets[i]) {
                    let d = *o - *t;
                    total += (d * d).as_f64();
                    g.push(d + d);
                }
                net.backward(&trace, &g, &mut grads);
            }
            grads.scale(T::one() / T::lit(batch.len() as f64));
            opt.step(net, &grads);
        }
        let mean = total / inputs.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Divergence { epoch, loss: mean });
        }
        curve.push(mean);
    }
    Ok(curve)
}

/// Fisher-Yates shuffle driven by `rng`.
pub fn shuffle<R: Rng + ?Sized>(v: &mut [usize], rng: &mut R) {
    for i in (1..v.len()).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
}
