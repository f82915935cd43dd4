//! Compatible feature modulation: turns current-modality features into
//! inputs the previous-phase model can consume, using rows of the frozen
//! classifier as class prototypes and an input-conditioned mixture of
//! Gaussian perturbations.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::config::ModelConfig;
use crate::error::{MilError, Result};
use crate::model::FeatureSequence;
use crate::params::{as_slice_mut2, visit_matrix, Binder, Linear};
use crate::tape::{Tape, Var};

pub const SIGMA_MIN: f64 = 1e-4;
pub const SIGMA_MAX: f64 = 10.0;

/// Learnable perturbation components plus the two small networks that
/// drive them: `transform` maps a prototype into feature space and the
/// two-layer mixer turns pooled current features into mixture weights.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationBank {
    pub transform: Linear,
    pub mixer_hidden: Linear,
    pub mixer_out: Linear,
    /// `[K, d]` log standard deviations.
    pub log_sigma: Array2<f64>,
}

/// Initial per-component scales: `{0.1, 0.5, 1.0}` for three components,
/// otherwise geometric between 0.1 and 1.0.
pub fn initial_scales(k: usize) -> Vec<f64> {
    match k {
        1 => vec![0.5],
        3 => vec![0.1, 0.5, 1.0],
        _ => (0..k).map(|i| 0.1 * 10f64.powf(i as f64 / (k - 1) as f64)).collect(),
    }
}

impl PerturbationBank {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.width;
        let k = cfg.perturbation_components;
        let hidden = (d / 2).max(1);
        let scales = initial_scales(k);
        let mut log_sigma = Array2::zeros((k, d));
        for (mut row, s) in log_sigma.rows_mut().into_iter().zip(scales) {
            row.fill(s.ln());
        }
        Self {
            transform: Linear::identity(d),
            mixer_hidden: Linear::new(d, hidden, rng),
            mixer_out: Linear::new(hidden, k, rng),
            log_sigma,
        }
    }

    pub fn components(&self) -> usize {
        self.log_sigma.nrows()
    }

    pub fn width(&self) -> usize {
        self.log_sigma.ncols()
    }

    /// Effective standard deviations, `exp(log_sigma)` clamped to
    /// `[SIGMA_MIN, SIGMA_MAX]`.
    pub fn sigmas(&self) -> Array2<f64> {
        self.log_sigma.mapv(|v| v.exp().clamp(SIGMA_MIN, SIGMA_MAX))
    }

    /// Mixture weights `softmax(mixer(pooled))` for pooled features `[N, d]`.
    pub fn mixture_var(&self, tape: &mut Tape, binder: &mut Binder, name: &str, pooled: Var) -> Var {
        let h = self.mixer_hidden.forward(tape, binder, &format!("{name}.mixer_hidden"), pooled);
        let h = tape.tanh(h);
        let logits = self.mixer_out.forward(tape, binder, &format!("{name}.mixer_out"), h);
        tape.softmax_rows(logits)
    }

    /// `transform(P) + λ_g · Σ_k α_k ⊙ σ_k ⊙ ε_k` for prototypes `[N, d]`,
    /// mixture weights `[N, K]` and standard-normal draws `noise[k]: [N, d]`.
    pub fn perturb_var(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        name: &str,
        prototypes: Var,
        alpha: Var,
        noise: &[Array2<f64>],
        lambda_g: f64,
    ) -> Var {
        let base = self.transform.forward(tape, binder, &format!("{name}.transform"), prototypes);
        if lambda_g == 0.0 {
            return base;
        }
        let log_sigma = binder.bind(tape, &format!("{name}.log_sigma"), self.log_sigma.view());
        let sig = tape.exp(log_sigma);
        let sig = tape.clamp(sig, SIGMA_MIN, SIGMA_MAX);
        let mut acc: Option<Var> = None;
        for (k, eps) in noise.iter().enumerate() {
            let eps = tape.constant(eps.clone());
            let sk = tape.row(sig, k);
            let z = tape.mul_row(eps, sk);
            let ak = tape.column(alpha, k);
            let term = tape.mul_col(z, ak);
            acc = Some(match acc {
                Some(a) => tape.add(a, term),
                None => term,
            });
        }
        let mix = acc.expect("at least one component");
        let mix = tape.scale(mix, lambda_g);
        tape.add(base, mix)
    }

    pub fn visit(&self, name: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.transform.visit(&format!("{name}.transform"), f);
        self.mixer_hidden.visit(&format!("{name}.mixer_hidden"), f);
        self.mixer_out.visit(&format!("{name}.mixer_out"), f);
        visit_matrix(&format!("{name}.log_sigma"), &self.log_sigma, f);
    }

    pub fn visit_mut(&mut self, name: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.transform.visit_mut(&format!("{name}.transform"), f);
        self.mixer_hidden.visit_mut(&format!("{name}.mixer_hidden"), f);
        self.mixer_out.visit_mut(&format!("{name}.mixer_out"), f);
        f(&format!("{name}.log_sigma"), as_slice_mut2(&mut self.log_sigma));
    }
}

/// Standard-normal draws for `n` samples: `K` matrices of shape `[n, d]`,
/// filled sample by sample, component by component, coordinate by
/// coordinate. A batch of one consumes the stream exactly like
/// [`perturb_prototype`].
pub fn draw_noise<R: Rng + ?Sized>(components: usize, n: usize, d: usize, rng: &mut R) -> Vec<Array2<f64>> {
    let mut out = vec![Array2::zeros((n, d)); components];
    for i in 0..n {
        for comp in out.iter_mut() {
            for j in 0..d {
                comp[[i, j]] = rng.sample(StandardNormal);
            }
        }
    }
    out
}

/// Row `label` of the (frozen) classifier weight matrix.
pub fn extract_prototype(classifier_weights: ArrayView2<f64>, label: usize) -> Result<Array1<f64>> {
    if label >= classifier_weights.nrows() {
        return Err(MilError::Index {
            context: "classifier prototypes".into(),
            index: label,
            len: classifier_weights.nrows(),
        });
    }
    Ok(classifier_weights.row(label).to_owned())
}

/// Gather prototypes for a batch of labels: `[N, d]`.
pub fn gather_prototypes(classifier_weights: ArrayView2<f64>, labels: &[usize]) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((labels.len(), classifier_weights.ncols()));
    for (mut row, &y) in out.rows_mut().into_iter().zip(labels) {
        row.assign(&extract_prototype(classifier_weights, y)?);
    }
    Ok(out)
}

/// Mixture coefficients for one sequence; mean-pools tokens first.
pub fn mixture_coefficients(bank: &PerturbationBank, current: &FeatureSequence) -> Result<Array1<f64>> {
    if current.width() != bank.width() {
        return Err(MilError::shape("mixture_coefficients", bank.width(), current.width()));
    }
    let mut tape = Tape::new();
    let mut binder = Binder::frozen();
    let pooled = current.tokens().mean_axis(Axis(0)).expect("non-empty").insert_axis(Axis(0));
    let pooled = tape.constant(pooled);
    let alpha = bank.mixture_var(&mut tape, &mut binder, "modulation", pooled);
    Ok(tape.value(alpha).row(0).to_owned())
}

/// One perturbed prototype. Draws `K·d` standard normals from `rng`.
pub fn perturb_prototype<R: Rng + ?Sized>(
    bank: &PerturbationBank,
    prototype: ArrayView1<f64>,
    alpha: ArrayView1<f64>,
    lambda_g: f64,
    rng: &mut R,
) -> Result<Array1<f64>> {
    let d = bank.width();
    if prototype.len() != d {
        return Err(MilError::shape("perturb_prototype prototype", d, prototype.len()));
    }
    if alpha.len() != bank.components() {
        return Err(MilError::shape("perturb_prototype alpha", bank.components(), alpha.len()));
    }
    let noise = draw_noise(bank.components(), 1, d, rng);
    let mut tape = Tape::new();
    let mut binder = Binder::frozen();
    let p = tape.constant(prototype.to_owned().insert_axis(Axis(0)));
    let a = tape.constant(alpha.to_owned().insert_axis(Axis(0)));
    let out = bank.perturb_var(&mut tape, &mut binder, "modulation", p, a, &noise, lambda_g);
    Ok(tape.value(out).row(0).to_owned())
}

/// Adds the perturbed prototype to every token of `current`.
pub fn modulate(perturbed_prototype: ArrayView1<f64>, current: &FeatureSequence) -> Result<FeatureSequence> {
    if perturbed_prototype.len() != current.width() {
        return Err(MilError::shape("modulate", current.width(), perturbed_prototype.len()));
    }
    FeatureSequence::new(&current.tokens() + &perturbed_prototype)
}

/// Batched [`modulate`]: `current [N * len, d] + tile(perturbed [N, d])`.
pub fn modulate_var(tape: &mut Tape, perturbed: Var, current: Var, len: usize) -> Var {
    let tiled = tape.tile_rows(perturbed, len);
    tape.add(current, tiled)
}
