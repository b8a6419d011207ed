//! Piano-state signed distance field and the SDF-supervised goal autoencoder.
//!
//! The encoder maps the 88 key flags to a latent code `z`; the decoder maps
//! `z` and a positional encoding of a query point `x` to the distance from `x`
//! to the nearest pressed key. Only the encoder is used downstream.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, Adam, AdamConfig, Gradients, Mlp};
use crate::real::Real;
use crate::retarget::KeyGeometry;
use crate::score::{PianoState, NUM_KEYS};

/// Distance from `x` to the nearest pressed key, or the sentinel with `empty` set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SdfValue<T> {
    pub distance: T,
    pub empty: bool,
}

/// Distance from `x` to the closest top-surface centre among the pressed keys.
pub fn sdf<T: Real>(x: [T; 3], state: &PianoState, geom: &KeyGeometry<T>, d_max: T) -> SdfValue<T> {
    let mut best: Option<T> = None;
    for k in state.pressed_keys().filter(|&k| k < geom.len()) {
        let p = geom.key(k).top_center();
        let d = ((x[0] - p[0]).powi(2) + (x[1] - p[1]).powi(2) + (x[2] - p[2]).powi(2)).sqrt();
        best = Some(best.map_or(d, |b: T| b.min(d)));
    }
    match best {
        Some(distance) => SdfValue { distance, empty: false },
        None => SdfValue { distance: d_max, empty: true },
    }
}

/// Axis-aligned box used to normalise query coordinates into `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct QueryBox<T: Real> {
    pub lo: [T; 3],
    pub hi: [T; 3],
}

impl<T: Real> QueryBox<T> {
    /// The key-top box (from the key tops to `2 * h_key`) grown by `inflation`
    /// of its size on every axis, split evenly between both sides.
    pub fn around_keyboard(geom: &KeyGeometry<T>, inflation: T) -> Self {
        let (lo, hi) = geom.bounding_box(T::lit(2.0));
        let half = T::lit(0.5);
        let grow = |a: T, b: T| {
            let pad = (b - a) * inflation * half;
            (a - pad, b + pad)
        };
        let mut out = Self { lo, hi };
        for d in 0..3 {
            let (a, b) = grow(lo[d], hi[d]);
            out.lo[d] = a;
            out.hi[d] = b;
        }
        out
    }

    pub fn center(&self) -> [T; 3] {
        std::array::from_fn(|d| (self.lo[d] + self.hi[d]) * T::lit(0.5))
    }

    pub fn normalize(&self, x: [T; 3]) -> [T; 3] {
        std::array::from_fn(|d| {
            let c = (self.lo[d] + self.hi[d]) * T::lit(0.5);
            let h = (self.hi[d] - self.lo[d]) * T::lit(0.5);
            (x[d] - c) / h
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> [T; 3] {
        std::array::from_fn(|d| {
            let u: f64 = rng.random();
            self.lo[d] + (self.hi[d] - self.lo[d]) * T::lit(u)
        })
    }
}

/// `[sin(2^k π u_d), cos(2^k π u_d)]` for each axis `d` and `k < n_freq`,
/// axis-major, where `u` is `x` normalised by `qbox`.
pub fn positional_encoding<T: Real>(x: [T; 3], n_freq: usize, qbox: &QueryBox<T>) -> Vec<T> {
    let u = qbox.normalize(x);
    let pi = T::lit(std::f64::consts::PI);
    let mut out = Vec::with_capacity(6 * n_freq);
    for ud in u {
        let mut f = pi;
        for _ in 0..n_freq {
            out.push((f * ud).sin());
            out.push((f * ud).cos());
            f = f + f;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecSpec {
    pub encoder_hidden: Vec<usize>,
    pub latent_dim: usize,
    pub decoder_hidden: Vec<usize>,
    pub n_freq: usize,
    pub learning_rate: f64,
    /// Learning rate at the last epoch as a fraction of `learning_rate`,
    /// reached by cosine annealing.
    pub final_lr_fraction: f64,
    pub epochs: usize,
    /// States per mini-batch.
    pub batch_size: usize,
    /// Query points drawn per state and step.
    pub queries_per_state: usize,
    /// Growth of the key-top box for query sampling, as a fraction of its size.
    pub box_inflation: f64,
    /// Sentinel distance for states with no pressed key.
    pub d_max: f64,
    pub seed: u64,
}

impl Default for CodecSpec {
    fn default() -> Self {
        Self {
            encoder_hidden: vec![64, 32],
            latent_dim: 16,
            decoder_hidden: vec![32, 32],
            n_freq: 6,
            learning_rate: 3e-3,
            final_lr_fraction: 0.05,
            epochs: 800,
            batch_size: 16,
            queries_per_state: 32,
            box_inflation: 0.2,
            d_max: 2.0,
            seed: 0,
        }
    }
}

impl CodecSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: &str| {
            Err(Error::Config {
                field: format!("codec.{field}"),
                message: message.into(),
            })
        };
        if self.n_freq == 0 {
            return bad("n_freq", "must be at least 1");
        }
        if self.latent_dim == 0 {
            return bad("latent_dim", "must be at least 1");
        }
        if self.encoder_hidden.contains(&0) || self.decoder_hidden.contains(&0) {
            return bad("encoder_hidden", "layer widths must be positive");
        }
        if self.batch_size == 0 || self.queries_per_state == 0 {
            return bad("batch_size", "batch and query counts must be positive");
        }
        if !(self.learning_rate >= 0.0) {
            return bad("learning_rate", "must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return bad("final_lr_fraction", "must lie in [0, 1]");
        }
        if !(self.box_inflation >= 0.0) {
            return bad("box_inflation", "must be non-negative");
        }
        Ok(())
    }

    fn encoder_sizes(&self) -> Vec<usize> {
        let mut v = vec![NUM_KEYS];
        v.extend(&self.encoder_hidden);
        v.push(self.latent_dim);
        v
    }

    fn decoder_sizes(&self) -> Vec<usize> {
        let mut v = vec![self.latent_dim + 6 * self.n_freq];
        v.extend(&self.decoder_hidden);
        v.push(1);
        v
    }
}

/// A trained (or freshly initialised) goal autoencoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct GoalCodec<T: Real> {
    pub spec: CodecSpec,
    pub query_box: QueryBox<T>,
    pub encoder: Mlp<T>,
    pub decoder: Mlp<T>,
    pub trained: bool,
}

/// One training sample: a state and a query point with its SDF target.
#[derive(Debug, Clone, Copy)]
pub struct SdfSample<T> {
    pub state: usize,
    pub x: [T; 3],
    pub target: T,
}

impl<T: Real> GoalCodec<T> {
    pub fn new(spec: CodecSpec, geom: &KeyGeometry<T>) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let encoder = Mlp::new(&spec.encoder_sizes(), Activation::Tanh, Activation::Identity, &mut rng);
        let decoder = Mlp::new(&spec.decoder_sizes(), Activation::Tanh, Activation::Identity, &mut rng);
        Ok(Self {
            query_box: QueryBox::around_keyboard(geom, T::lit(spec.box_inflation)),
            spec,
            encoder,
            decoder,
            trained: false,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.spec.latent_dim
    }

    /// Latent code of a piano state (the pedal is ignored).
    pub fn encode(&self, state: &PianoState) -> Result<Vec<T>> {
        if !self.trained {
            return Err(Error::State("goal codec has not been trained".into()));
        }
        Ok(self.encode_raw(state))
    }

    fn encode_raw(&self, state: &PianoState) -> Vec<T> {
        let v: Vec<T> = (0..NUM_KEYS)
            .map(|k| if state.is_pressed(k) { T::one() } else { T::zero() })
            .collect();
        self.encoder.forward(&v)
    }

    fn decoder_input(&self, z: &[T], x: [T; 3]) -> Vec<T> {
        let mut inp = z.to_vec();
        inp.extend(positional_encoding(x, self.spec.n_freq, &self.query_box));
        inp
    }

    /// Predicted SDF at `x` for `state`.
    pub fn predict(&self, state: &PianoState, x: [T; 3]) -> T {
        let z = self.encode_raw(state);
        self.decoder.forward(&self.decoder_input(&z, x))[0]
    }

    /// Summed squared error over `samples` and its gradient with respect to
    /// every encoder and decoder parameter.
    pub fn loss_and_gradients(
        &self,
        states: &[PianoState],
        samples: &[SdfSample<T>],
    ) -> (T, Gradients<T>, Gradients<T>) {
        let mut by_state: Vec<(usize, Vec<&SdfSample<T>>)> = Vec::new();
        for s in samples {
            match by_state.iter_mut().find(|(k, _)| *k == s.state) {
                Some((_, v)) => v.push(s),
                None => by_state.push((s.state, vec![s])),
            }
        }
        let parts: Vec<(T, Gradients<T>, Gradients<T>)> = by_state
            .par_iter()
            .map(|(si, qs)| {
                let mut ge = Gradients::zeros_like(&self.encoder);
                let mut gd = Gradients::zeros_like(&self.decoder);
                let v: Vec<T> = (0..NUM_KEYS)
                    .map(|k| if states[*si].is_pressed(k) { T::one() } else { T::zero() })
                    .collect();
                let et = self.encoder.forward_trace(&v);
                let z = et.output().to_vec();
                let mut dz = vec![T::zero(); z.len()];
                let mut loss = T::zero();
                for q in qs {
                    let dt = self.decoder.forward_trace(&self.decoder_input(&z, q.x));
                    let r = dt.output()[0] - q.target;
                    loss += r * r;
                    let dinp = self.decoder.backward(&dt, &[r + r], &mut gd);
                    for (a, &b) in dz.iter_mut().zip(&dinp) {
                        *a += b;
                    }
                }
                self.encoder.backward(&et, &dz, &mut ge);
                (loss, ge, gd)
            })
            .collect();
        let mut ge = Gradients::zeros_like(&self.encoder);
        let mut gd = Gradients::zeros_like(&self.decoder);
        let mut loss = T::zero();
        for (l, e, d) in &parts {
            loss += *l;
            ge.add_assign(e);
            gd.add_assign(d);
        }
        (loss, ge, gd)
    }

    pub fn sample_queries<R: Rng + ?Sized>(
        &self,
        states: &[PianoState],
        indices: &[usize],
        geom: &KeyGeometry<T>,
        rng: &mut R,
    ) -> Vec<SdfSample<T>> {
        let d_max = T::lit(self.spec.d_max);
        let mut out = Vec::with_capacity(indices.len() * self.spec.queries_per_state);
        for &i in indices {
            for _ in 0..self.spec.queries_per_state {
                let x = self.query_box.sample(rng);
                out.push(SdfSample {
                    state: i,
                    x,
                    target: sdf(x, &states[i], geom, d_max).distance,
                });
            }
        }
        out
    }

    /// Root-mean-square SDF error on the given samples.
    pub fn rmse(&self, states: &[PianoState], samples: &[SdfSample<T>]) -> f64 {
        let se: f64 = samples
            .par_iter()
            .map(|s| (self.predict(&states[s.state], s.x) - s.target).as_f64().powi(2))
            .sum();
        (se / samples.len().max(1) as f64).sqrt()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("codec serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|source| Error::Json {
            context: "codec weights".into(),
            source,
        })?;
        c.spec.validate()?;
        c.encoder.validate()?;
        c.decoder.validate()?;
        if c.encoder.input_dim() != NUM_KEYS
            || c.encoder.output_dim() != c.spec.latent_dim
            || c.decoder.input_dim() != c.spec.latent_dim + 6 * c.spec.n_freq
        {
            return Err(Error::input("codec layer shapes do not match its spec"));
        }
        Ok(c)
    }
}

/// Per-epoch mean squared SDF error.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub epochs: Vec<f64>,
}

impl LossCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss\n");
        for (i, l) in self.epochs.iter().enumerate() {
            out.push_str(&format!("{i},{l}\n"));
        }
        out
    }
}

/// Mini-batch Adam on the squared SDF error with fresh uniform queries each step.
pub fn train_autoencoder<T: Real>(
    states: &[PianoState],
    geom: &KeyGeometry<T>,
    spec: &CodecSpec,
) -> Result<(GoalCodec<T>, LossCurve)> {
    if !states.iter().any(|s| !s.is_empty()) {
        return Err(Error::input("codec training needs at least one state with a pressed key"));
    }
    let mut codec = GoalCodec::new(spec.clone(), geom)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(1));
    let adam = AdamConfig {
        learning_rate: spec.learning_rate,
        ..Default::default()
    };
    let mut opt_e = Adam::new(&codec.encoder, adam);
    let mut opt_d = Adam::new(&codec.decoder, adam);
    let mut order: Vec<usize> = (0..states.len()).collect();
    let mut curve = LossCurve::default();
    for epoch in 0..spec.epochs {
        let anneal = crate::nn::cosine_factor(epoch, spec.epochs, spec.final_lr_fraction);
        opt_e.set_learning_rate(spec.learning_rate * anneal);
        opt_d.set_learning_rate(spec.learning_rate * anneal);
        crate::nn::shuffle(&mut order, &mut rng);
        let mut total = 0.0;
        let mut count = 0usize;
        for batch in order.chunks(spec.batch_size) {
            let samples = codec.sample_queries(states, batch, geom, &mut rng);
            let (loss, mut ge, mut gd) = codec.loss_and_gradients(states, &samples);
            let n = T::lit(samples.len() as f64);
            ge.scale(T::one() / n);
            gd.scale(T::one() / n);
            opt_e.step(&mut codec.encoder, &ge);
            opt_d.step(&mut codec.decoder, &gd);
            total += loss.as_f64();
            count += samples.len();
        }
        let mean = total / count as f64;
        if !mean.is_finite() {
            return Err(Error::Divergence { epoch, loss: mean });
        }
        curve.epochs.push(mean);
    }
    codec.trained = true;
    Ok((codec, curve))
}
