#![allow(dead_code)]

use mil_core::alignment::{contrastive_align_var, direct_align_var, distribution_align_var, hybrid_align_var, AlignWeights, ProxyScorer};
use mil_core::model::names;
use mil_core::modulation::{draw_noise, gather_prototypes, modulate_var};
use mil_core::params::{derive_rng, gaussian, Binder};
use mil_core::tape::{Tape, Var};
use mil_core::{init_model, ContrastiveForm, ModelState, Parameters};
use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use super::{fd_check, rel_err, small_config};

const H: f64 = 1e-5;

fn jitter(model: &mut ModelState, prefix: &str, std: f64, seed: u64) {
    let mut rng = derive_rng(seed, "test.jitter", 0);
    model.visit_params_mut(&mut |name, v| {
        if name.starts_with(prefix) {
            for x in v {
                let e: f64 = rng.sample(StandardNormal);
                *x += std * e;
            }
        }
    });
}

/// Sum of logits of a depth-1 model against every inference parameter.
pub fn backbone_error(seed: u64) -> (f64, String) {
    let mut cfg = small_config(8, 1, 3);
    cfg.seed = seed;
    let model = init_model(&cfg).unwrap();
    let (n, len) = (2, 3);
    let x = gaussian(n * len, 8, 1.0, &mut derive_rng(seed, "test.input", 0));
    let loss = |m: &ModelState| -> (f64, mil_core::params::ParamGrads) {
        let mut tape = Tape::new();
        let mut binder = Binder::trainable();
        let xv = tape.constant(x.clone());
        let (_, logits) = m.forward_var(&mut tape, &mut binder, xv, n, len, false).unwrap();
        let total = tape.sum_all(logits);
        let g = tape.backward(total);
        (tape.scalar(total), binder.gradients(&tape, &g))
    };
    let (_, grads) = loss(&model);
    fd_check(&model, &grads, |name| !names::is_phase_module(name), |m| loss(m).0, H)
}

/// Hybrid alignment loss downstream of the perturbed prototype, with the
/// historical model frozen in between, against the perturbation bank.
pub fn modulation_error(seed: u64) -> (f64, String) {
    let mut cfg = small_config(8, 1, 3);
    cfg.seed = seed;
    let mut model = init_model(&cfg).unwrap();
    jitter(&mut model, names::MODULATION, 0.3, seed);
    let mut hist_cfg = cfg.clone();
    hist_cfg.seed = seed + 1;
    let hist = init_model(&hist_cfg).unwrap();
    let (n, len) = (4, 3);
    let labels = [0, 1, 2, 0];
    let x = gaussian(n * len, 8, 1.0, &mut derive_rng(seed, "test.input", 0));
    let cur_out = gaussian(n, 8, 1.0, &mut derive_rng(seed, "test.cur", 0));
    let noise = draw_noise(3, n, 8, &mut derive_rng(seed, "test.noise", 0));
    let weights = AlignWeights {
        lambda_con: cfg.lambda_con,
        lambda_dis: cfg.lambda_dis,
        margin: cfg.margin,
        form: ContrastiveForm::Hinge,
    };
    let loss = |m: &ModelState| -> (f64, mil_core::params::ParamGrads) {
        let mut tape = Tape::new();
        let mut binder = Binder::with_filter(|n| n.starts_with(names::MODULATION));
        let mut frozen = Binder::frozen();
        let cur = tape.constant(x.clone());
        let pooled = tape.mean_pool(cur, len);
        let alpha = m.modulation.mixture_var(&mut tape, &mut binder, names::MODULATION, pooled);
        let protos = tape.constant(gather_prototypes(hist.classifier.weight.view(), &labels).unwrap());
        let perturbed = m
            .modulation
            .perturb_var(&mut tape, &mut binder, names::MODULATION, protos, alpha, &noise, cfg.lambda_g);
        let modulated = modulate_var(&mut tape, perturbed, cur, len);
        let agg = hist.aggregation.forward(&mut tape, &mut frozen, names::AGGREGATION, modulated);
        let hist_out = hist.encode(&mut tape, &mut frozen, agg, n, len).unwrap();
        let c = tape.constant(cur_out.clone());
        let align = hybrid_align_var(&mut tape, &mut frozen, &m.scorer, names::SCORER, c, hist_out, weights);
        let g = tape.backward(align.total);
        (tape.scalar(align.total), binder.gradients(&tape, &g))
    };
    let (_, grads) = loss(&model);
    fd_check(&model, &grads, |name| name.starts_with(names::MODULATION), |m| loss(m).0, H)
}

/// Central differences of `f` over every entry of `x`.
pub fn numeric_gradient(x: &Array2<f64>, f: impl Fn(&Array2<f64>) -> f64) -> Array2<f64> {
    let mut out = Array2::zeros(x.raw_dim());
    for (idx, slot) in out.indexed_iter_mut() {
        let mut plus = x.clone();
        plus[idx] += H;
        let mut minus = x.clone();
        minus[idx] -= H;
        *slot = (f(&plus) - f(&minus)) / (2.0 * H);
    }
    out
}

#[derive(Clone, Copy, Debug)]
pub enum AlignTerm {
    Direct,
    Contrastive,
    Distribution,
}

fn align_term(term: AlignTerm, scorer: &ProxyScorer, tape: &mut Tape, cur: Var, hist: Var) -> Var {
    match term {
        AlignTerm::Direct => direct_align_var(tape, cur, hist),
        AlignTerm::Contrastive => contrastive_align_var(tape, cur, hist, 0.3, ContrastiveForm::Hinge),
        AlignTerm::Distribution => distribution_align_var(tape, &mut Binder::frozen(), scorer, names::SCORER, cur, hist),
    }
}

/// Gradient of one alignment term with respect to both feature batches.
pub fn align_error(term: AlignTerm, seed: u64) -> f64 {
    let (n, d) = (5, 6);
    let cur = gaussian(n, d, 1.0, &mut derive_rng(seed, "test.align.cur", 0));
    let hist = gaussian(n, d, 1.0, &mut derive_rng(seed, "test.align.hist", 0));
    let mut scorer = ProxyScorer::zeros(d);
    scorer.visit_mut("scorer", &mut |_, v| {
        let mut rng = derive_rng(seed, "test.align.scorer", 0);
        v.iter_mut().for_each(|x| *x = rng.sample::<f64, _>(StandardNormal) * 0.5);
    });
    let value = |c: &Array2<f64>, h: &Array2<f64>| {
        let mut tape = Tape::new();
        let cv = tape.constant(c.clone());
        let hv = tape.constant(h.clone());
        let l = align_term(term, &scorer, &mut tape, cv, hv);
        tape.scalar(l)
    };
    let mut tape = Tape::new();
    let cv = tape.param(cur.clone());
    let hv = tape.param(hist.clone());
    let l = align_term(term, &scorer, &mut tape, cv, hv);
    let g = tape.backward(l);
    let gc = g.get(cv).cloned().unwrap_or_else(|| Array2::zeros(cur.raw_dim()));
    let gh = g.get(hv).cloned().unwrap_or_else(|| Array2::zeros(hist.raw_dim()));
    let nc = numeric_gradient(&cur, |c| value(c, &hist));
    let nh = numeric_gradient(&hist, |h| value(&cur, h));
    let ec = rel_err(gc.as_slice().unwrap(), nc.as_slice().unwrap());
    let eh = rel_err(gh.as_slice().unwrap(), nh.as_slice().unwrap());
    ec.max(eh)
}

/// Gradient of the distribution term with respect to the scorer.
pub fn scorer_error(seed: u64) -> f64 {
    let (n, d) = (5, 6);
    let cur = gaussian(n, d, 1.0, &mut derive_rng(seed, "test.align.cur", 0));
    let hist = gaussian(n, d, 1.0, &mut derive_rng(seed, "test.align.hist", 0));
    let mut scorer = ProxyScorer::zeros(d);
    let mut rng = derive_rng(seed, "test.align.scorer", 0);
    scorer.visit_mut("scorer", &mut |_, v| v.iter_mut().for_each(|x| *x = rng.sample::<f64, _>(StandardNormal) * 0.5));
    let run = |s: &ProxyScorer| {
        let mut tape = Tape::new();
        let mut binder = Binder::trainable();
        let c = tape.constant(cur.clone());
        let h = tape.constant(hist.clone());
        let l = distribution_align_var(&mut tape, &mut binder, s, names::SCORER, c, h);
        let g = tape.backward(l);
        (tape.scalar(l), binder.gradients(&tape, &g))
    };
    let (_, grads) = run(&scorer);
    let mut worst: f64 = 0.0;
    let mut names_ = Vec::new();
    scorer.visit("scorer", &mut |n, _, v| names_.push((n.to_string(), v.len())));
    for (name, len) in names_ {
        let numeric: Vec<f64> = (0..len)
            .map(|i| {
                let shift = |delta: f64| {
                    let mut s = scorer.clone();
                    s.visit_mut("scorer", &mut |n, v| {
                        if n == name {
                            v[i] += delta;
                        }
                    });
                    run(&s).0
                };
                (shift(H) - shift(-H)) / (2.0 * H)
            })
            .collect();
        worst = worst.max(rel_err(&grads[&name], &numeric));
    }
    worst
}
