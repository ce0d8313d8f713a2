//! Transition mechanism learned with a bidirectional conditional GAN and
//! counterfactual dialogue generation by abduction.
//!
//! `G(s, a, eps) -> s'` plays the structural equation, `E(s') -> (s, a, eps)`
//! inverts it, and `D` scores joint tuples `(s, a, eps, s')`. Encoder tuples
//! `(E(s'), s')` are the "real" side of the game, generator tuples
//! `(z, G(z))` the "fake" side.

mod database;

use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::json;

pub use database::{
    build_cf_databases, next_state_distance, read_cf_databases, write_cf_databases, CfDatabase, CfDatabaseSet,
    CfDialogue, CfGenConfig,
};

use crate::corpus::Transition;
use crate::error::{ensure_dim, Error, Result};
use crate::numerics::{
    log_sigmoid, read_checkpoint, rng_from_seed, sigmoid, write_checkpoint, Activation, AdamConfig, AdamState,
    LayerSpec, Mlp, Objective, Rng,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BicoganConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Weight of the reconstruction terms tying `E(s')` to the real context
    /// and `G` to the observed next state.
    pub lambda: f64,
    /// Hidden width as a multiple of the embedding dimension.
    pub hidden_mult: usize,
    pub hidden_layers: usize,
    /// Fraction of transitions held out for the discriminator accuracy log.
    pub holdout: f64,
}

impl Default for BicoganConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            lr: 2e-4,
            lambda: 1.0,
            hidden_mult: 4,
            hidden_layers: 2,
            holdout: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BicoganParams {
    pub dim: usize,
    pub g: Mlp,
    pub e: Mlp,
    pub d: Mlp,
    pub lambda: f64,
}

fn mlp_shape(input: usize, hidden: usize, layers: usize, output: usize) -> (Vec<usize>, Vec<Activation>) {
    let mut widths = vec![input];
    widths.extend(std::iter::repeat_n(hidden, layers));
    widths.push(output);
    let mut acts = vec![Activation::Relu; layers];
    acts.push(Activation::Identity);
    (widths, acts)
}

impl BicoganParams {
    pub fn new(dim: usize, config: &BicoganConfig, rng: &mut Rng) -> Self {
        let h = config.hidden_mult.max(1) * dim;
        let l = config.hidden_layers;
        let (gw, ga) = mlp_shape(3 * dim, h, l, dim);
        let (ew, ea) = mlp_shape(dim, h, l, 3 * dim);
        let (dw, da) = mlp_shape(4 * dim, h, l, 1);
        Self {
            dim,
            g: Mlp::new(&gw, &ga, rng),
            e: Mlp::new(&ew, &ea, rng),
            d: Mlp::new(&dw, &da, rng),
            lambda: config.lambda,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = json!({
            "kind": "bicogan",
            "dim": self.dim,
            "lambda": self.lambda,
            "g": self.g.layers(),
            "e": self.e.layers(),
            "d": self.d.layers(),
        });
        let mut params = self.g.params().to_vec();
        params.extend_from_slice(self.e.params());
        params.extend_from_slice(self.d.params());
        write_checkpoint(path, &header, &params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = read_checkpoint(path)?;
        let bad = |m: String| Error::Format(format!("{}: {m}", path.display()));
        if ck.header["kind"] != "bicogan" {
            return Err(bad("not a bicogan checkpoint".into()));
        }
        let layers = |k: &str| -> Result<Vec<LayerSpec>> {
            serde_json::from_value(ck.header[k].clone()).map_err(|e| bad(e.to_string()))
        };
        let mut g = Mlp::from_layers(layers("g")?);
        let mut e = Mlp::from_layers(layers("e")?);
        let mut d = Mlp::from_layers(layers("d")?);
        let (ng, ne, nd) = (g.param_count(), e.param_count(), d.param_count());
        ensure_dim("bicogan checkpoint parameters", ng + ne + nd, ck.params.len())?;
        g.params_mut().copy_from_slice(&ck.params[..ng]);
        e.params_mut().copy_from_slice(&ck.params[ng..ng + ne]);
        d.params_mut().copy_from_slice(&ck.params[ng + ne..]);
        Ok(Self {
            dim: ck.header["dim"].as_u64().ok_or_else(|| bad("missing dim".into()))? as usize,
            g,
            e,
            d,
            lambda: ck.header["lambda"].as_f64().unwrap_or(1.0),
        })
    }
}

/// Splits the encoder output into `(s_hat, a_hat, eps_hat)`.
pub fn encode(params: &BicoganParams, s_next: &[f64]) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    ensure_dim("encoder input", params.dim, s_next.len())?;
    let out = params.e.forward(s_next)?;
    let d = params.dim;
    Ok((out[..d].to_vec(), out[d..2 * d].to_vec(), out[2 * d..].to_vec()))
}

pub fn generate_next(params: &BicoganParams, s: &[f64], a: &[f64], eps: &[f64]) -> Result<Vec<f64>> {
    let d = params.dim;
    ensure_dim("generator state", d, s.len())?;
    ensure_dim("generator action", d, a.len())?;
    ensure_dim("generator noise", d, eps.len())?;
    params.g.forward(&[s, a, eps].concat())
}

/// Abduction, action, prediction: noise inferred from the observed next
/// state, then pushed through the generator with the substituted action.
pub fn counterfactual_step(params: &BicoganParams, tr: &Transition, a_cf: &[f64]) -> Result<Vec<f64>> {
    let (_, _, eps) = encode(params, &tr.s_next)?;
    generate_next(params, &tr.s, a_cf, &eps)
}

/// `||counterfactual_step(tr, tr.a) - tr.s_next||` per transition.
pub fn factual_recovery_errors(params: &BicoganParams, transitions: &[Transition]) -> Result<Vec<f64>> {
    transitions
        .iter()
        .map(|tr| {
            let rec = counterfactual_step(params, tr, &tr.a)?;
            Ok(l2(&rec, &tr.s_next))
        })
        .collect()
}

pub(crate) fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

pub(crate) fn standard_normal(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// One training tuple with its prior noise draw.
#[derive(Debug, Clone)]
pub struct GanSample {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub eps: Vec<f64>,
    pub s_next: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub d_loss: f64,
    /// Generator and encoder loss including the reconstruction term.
    pub ge_loss: f64,
    /// `lambda` times the mean reconstruction error (part of `ge_loss`).
    pub recon_term: f64,
    /// Minimax value: mean log D(real) + log(1 - D(fake)) - recon_term.
    pub value: f64,
    /// Held-out discriminator accuracy on encoder versus generator tuples.
    pub disc_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedBicogan {
    pub params: BicoganParams,
    pub trace: Vec<EpochStats>,
}

struct Forward {
    enc: Vec<f64>,
    enc_trace: crate::numerics::MlpTrace,
    gen_trace: crate::numerics::MlpTrace,
    real_trace: crate::numerics::MlpTrace,
    fake_trace: crate::numerics::MlpTrace,
    /// Generator applied to the real context and the abducted noise.
    cyc_trace: crate::numerics::MlpTrace,
    real_logit: f64,
    fake_logit: f64,
}

fn forward(p: &BicoganParams, g: &[f64], e: &[f64], d: &[f64], x: &GanSample) -> Forward {
    let enc_trace = p.e.trace_with(e, &x.s_next);
    let enc = enc_trace.output().to_vec();
    let z = [x.s.as_slice(), &x.a, &x.eps].concat();
    let gen_trace = p.g.trace_with(g, &z);
    let real_trace = p.d.trace_with(d, &[enc.as_slice(), &x.s_next].concat());
    let fake_trace = p.d.trace_with(d, &[z.as_slice(), gen_trace.output()].concat());
    let cyc_trace = p.g.trace_with(g, &[x.s.as_slice(), &x.a, &enc[2 * p.dim..]].concat());
    Forward {
        real_logit: real_trace.output()[0],
        fake_logit: fake_trace.output()[0],
        enc,
        enc_trace,
        gen_trace,
        real_trace,
        fake_trace,
        cyc_trace,
    }
}

fn recon_error(dim: usize, f: &Forward, x: &GanSample) -> f64 {
    let sa = [x.s.as_slice(), &x.a].concat();
    let context: f64 = f.enc[..2 * dim].iter().zip(&sa).map(|(u, v)| (u - v).powi(2)).sum();
    let cycle: f64 = f.cyc_trace.output().iter().zip(&x.s_next).map(|(u, v)| (u - v).powi(2)).sum();
    context + cycle
}

/// Discriminator loss `-log D(real) - log(1 - D(fake))` averaged over the
/// batch, with its gradient in the discriminator parameters.
pub(crate) fn d_loss_grad(p: &BicoganParams, g: &[f64], e: &[f64], d: &[f64], batch: &[GanSample]) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; d.len()];
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for x in batch {
        let f = forward(p, g, e, d, x);
        loss -= (log_sigmoid(f.real_logit) + log_sigmoid(-f.fake_logit)) * scale;
        p.d.backward_with(d, &f.real_trace, &[(sigmoid(f.real_logit) - 1.0) * scale], &mut grad)
            .expect("fixed shapes");
        p.d.backward_with(d, &f.fake_trace, &[sigmoid(f.fake_logit) * scale], &mut grad)
            .expect("fixed shapes");
    }
    (loss, grad)
}

/// Non-saturating generator/encoder loss
/// `-log D(fake) - log(1 - D(real)) + lambda R` with
/// `R = ||(s, a) - (s_hat, a_hat)||^2 + ||s' - G(s, a, eps_hat)||^2`,
/// and its gradients in the generator and encoder parameters. Also returns
/// the `lambda R` contribution.
pub(crate) fn ge_loss_grad(
    p: &BicoganParams,
    g: &[f64],
    e: &[f64],
    d: &[f64],
    batch: &[GanSample],
) -> (f64, f64, Vec<f64>, Vec<f64>) {
    let dim = p.dim;
    let mut gg = vec![0.0; g.len()];
    let mut ge = vec![0.0; e.len()];
    let mut dd = vec![0.0; d.len()];
    let scale = 1.0 / batch.len() as f64;
    let (mut loss, mut recon) = (0.0, 0.0);
    for x in batch {
        let f = forward(p, g, e, d, x);
        let r = p.lambda * recon_error(dim, &f, x) * scale;
        recon += r;
        loss += -(log_sigmoid(f.fake_logit) + log_sigmoid(-f.real_logit)) * scale + r;
        let din_fake = p
            .d
            .backward_with(d, &f.fake_trace, &[(sigmoid(f.fake_logit) - 1.0) * scale], &mut dd)
            .expect("fixed shapes");
        p.g.backward_with(g, &f.gen_trace, &din_fake[3 * dim..], &mut gg)
            .expect("fixed shapes");
        let din_real = p
            .d
            .backward_with(d, &f.real_trace, &[sigmoid(f.real_logit) * scale], &mut dd)
            .expect("fixed shapes");
        let mut up = din_real[..3 * dim].to_vec();
        let sa = [x.s.as_slice(), &x.a].concat();
        for k in 0..2 * dim {
            up[k] += 2.0 * p.lambda * scale * (f.enc[k] - sa[k]);
        }
        if p.lambda != 0.0 {
            let dcyc: Vec<f64> = f
                .cyc_trace
                .output()
                .iter()
                .zip(&x.s_next)
                .map(|(u, v)| 2.0 * p.lambda * scale * (u - v))
                .collect();
            let din_cyc = p.g.backward_with(g, &f.cyc_trace, &dcyc, &mut gg).expect("fixed shapes");
            for k in 0..dim {
                up[2 * dim + k] += din_cyc[2 * dim + k];
            }
        }
        p.e.backward_with(e, &f.enc_trace, &up, &mut ge).expect("fixed shapes");
    }
    (loss, recon, gg, ge)
}

/// Which network a [`GanObjective`] differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GanNet {
    Generator,
    Encoder,
    Discriminator,
}

/// A network's training loss on a fixed batch, as a function of that
/// network's parameters (the other two held fixed).
pub struct GanObjective<'a> {
    pub params: &'a BicoganParams,
    pub batch: &'a [GanSample],
    pub net: GanNet,
}

impl GanObjective<'_> {
    fn split<'b>(&'b self, x: &'b [f64]) -> (&'b [f64], &'b [f64], &'b [f64]) {
        let p = self.params;
        match self.net {
            GanNet::Generator => (x, p.e.params(), p.d.params()),
            GanNet::Encoder => (p.g.params(), x, p.d.params()),
            GanNet::Discriminator => (p.g.params(), p.e.params(), x),
        }
    }
}

impl Objective for GanObjective<'_> {
    fn params(&self) -> &[f64] {
        match self.net {
            GanNet::Generator => self.params.g.params(),
            GanNet::Encoder => self.params.e.params(),
            GanNet::Discriminator => self.params.d.params(),
        }
    }

    fn loss_at(&self, x: &[f64]) -> f64 {
        let (g, e, d) = self.split(x);
        match self.net {
            GanNet::Discriminator => d_loss_grad(self.params, g, e, d, self.batch).0,
            _ => ge_loss_grad(self.params, g, e, d, self.batch).0,
        }
    }

    fn gradient_at(&self, x: &[f64]) -> Vec<f64> {
        let (g, e, d) = self.split(x);
        match self.net {
            GanNet::Discriminator => d_loss_grad(self.params, g, e, d, self.batch).1,
            GanNet::Generator => ge_loss_grad(self.params, g, e, d, self.batch).2,
            GanNet::Encoder => ge_loss_grad(self.params, g, e, d, self.batch).3,
        }
    }
}

pub fn gan_samples(transitions: &[Transition], rng: &mut Rng) -> Vec<GanSample> {
    transitions
        .iter()
        .map(|t| GanSample {
            s: t.s.clone(),
            a: t.a.clone(),
            eps: standard_normal(rng, t.s.len()),
            s_next: t.s_next.clone(),
        })
        .collect()
}

fn disc_accuracy(p: &BicoganParams, batch: &[GanSample]) -> f64 {
    if batch.is_empty() {
        return f64::NAN;
    }
    let mut hits = 0usize;
    for x in batch {
        let f = forward(p, p.g.params(), p.e.params(), p.d.params(), x);
        hits += usize::from(f.real_logit > 0.0) + usize::from(f.fake_logit < 0.0);
    }
    hits as f64 / (2 * batch.len()) as f64
}

/// Alternating adversarial training: one discriminator step, then one joint
/// generator/encoder step per mini-batch. Fresh prior noise is drawn for
/// every batch.
pub fn train_bicogan(transitions: &[Transition], config: &BicoganConfig, seed: u64) -> Result<TrainedBicogan> {
    if transitions.is_empty() {
        return Err(Error::Empty("transitions for adversarial training"));
    }
    let dim = transitions[0].s.len();
    for t in transitions {
        ensure_dim("transition state", dim, t.s.len())?;
        ensure_dim("transition action", dim, t.a.len())?;
        ensure_dim("transition next state", dim, t.s_next.len())?;
    }
    let mut rng = rng_from_seed(seed);
    let mut params = BicoganParams::new(dim, config, &mut rng);
    let mut order: Vec<usize> = (0..transitions.len()).collect();
    order.shuffle(&mut rng);
    let n_hold = ((transitions.len() as f64 * config.holdout) as usize).min(transitions.len() - 1);
    let (hold_idx, train_idx) = order.split_at(n_hold);
    let holdout: Vec<Transition> = hold_idx.iter().map(|&i| transitions[i].clone()).collect();
    let holdout = gan_samples(&holdout, &mut rng);
    let mut train_idx = train_idx.to_vec();

    let mut opt_g = AdamState::new(AdamConfig::gan(config.lr), params.g.param_count());
    let mut opt_e = AdamState::new(AdamConfig::gan(config.lr), params.e.param_count());
    let mut opt_d = AdamState::new(AdamConfig::gan(config.lr), params.d.param_count());
    let mut trace = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        train_idx.shuffle(&mut rng);
        let mut stats = EpochStats {
            d_loss: 0.0,
            ge_loss: 0.0,
            recon_term: 0.0,
            value: 0.0,
            disc_accuracy: 0.0,
        };
        let mut batches = 0usize;
        for chunk in train_idx.chunks(config.batch_size.max(1)) {
            let picked: Vec<Transition> = chunk.iter().map(|&i| transitions[i].clone()).collect();
            let batch = gan_samples(&picked, &mut rng);
            let (dl, dg) = d_loss_grad(&params, params.g.params(), params.e.params(), params.d.params(), &batch);
            if !dl.is_finite() {
                return Err(Error::NonFinite {
                    context: "discriminator loss",
                    epoch,
                });
            }
            opt_d.step(params.d.params_mut(), &dg)?;
            let (gl, rl, gg, ge) = ge_loss_grad(&params, params.g.params(), params.e.params(), params.d.params(), &batch);
            if !gl.is_finite() {
                return Err(Error::NonFinite {
                    context: "generator/encoder loss",
                    epoch,
                });
            }
            opt_g.step(params.g.params_mut(), &gg)?;
            opt_e.step(params.e.params_mut(), &ge)?;
            stats.d_loss += dl;
            stats.ge_loss += gl;
            stats.recon_term += rl;
            stats.value += -dl - rl;
            batches += 1;
        }
        let b = batches.max(1) as f64;
        stats.d_loss /= b;
        stats.ge_loss /= b;
        stats.recon_term /= b;
        stats.value /= b;
        stats.disc_accuracy = disc_accuracy(&params, &holdout);
        log::debug!(
            "bicogan epoch {epoch}: d {:.4} ge {:.4} recon {:.4} acc {:.3}",
            stats.d_loss,
            stats.ge_loss,
            stats.recon_term,
            stats.disc_accuracy
        );
        trace.push(stats);
    }
    Ok(TrainedBicogan { params, trace })
}

/// Held-out discriminator accuracy of `params` on `transitions`.
pub fn discriminator_accuracy(params: &BicoganParams, transitions: &[Transition], seed: u64) -> f64 {
    let batch = gan_samples(transitions, &mut rng_from_seed(seed));
    disc_accuracy(params, &batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;

    fn toy_transitions(n: usize, dim: usize, seed: u64) -> Vec<Transition> {
        let mut rng = rng_from_seed(seed);
        (0..n)
            .map(|t| Transition {
                s: standard_normal(&mut rng, dim),
                a: standard_normal(&mut rng, dim),
                s_next: standard_normal(&mut rng, dim),
                t,
                dialogue_id: "x".into(),
                is_terminal: false,
                state_pos: 0,
                action_pos: 1,
                next_pos: 2,
            })
            .collect()
    }

    #[test]
    fn zero_encoder_outputs_zeros() {
        let mut p = BicoganParams::new(3, &BicoganConfig::default(), &mut rng_from_seed(0));
        p.e.params_mut().iter_mut().for_each(|v| *v = 0.0);
        let (s, a, e) = encode(&p, &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((s, a, e), (vec![0.0; 3], vec![0.0; 3], vec![0.0; 3]));
        assert!(encode(&p, &[1.0]).is_err());
        let out = generate_next(&p, &[0.1; 3], &[0.2; 3], &[0.3; 3]).unwrap();
        assert_eq!(out.len(), 3);
        assert_eq!(out, generate_next(&p, &[0.1; 3], &[0.2; 3], &[0.3; 3]).unwrap());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = BicoganConfig {
            hidden_mult: 2,
            ..BicoganConfig::default()
        };
        let p = BicoganParams::new(3, &cfg, &mut rng_from_seed(1));
        let tr = toy_transitions(3, 3, 2);
        let batch = gan_samples(&tr, &mut rng_from_seed(3));
        for net in [GanNet::Generator, GanNet::Encoder, GanNet::Discriminator] {
            let obj = GanObjective {
                params: &p,
                batch: &batch,
                net,
            };
            let err = grad_check(&obj, 60, 1e-5, 4);
            assert!(err <= 1e-4, "{net:?}: {err}");
        }
    }

    #[test]
    fn zero_lambda_removes_reconstruction() {
        let cfg = BicoganConfig {
            epochs: 2,
            lambda: 0.0,
            hidden_mult: 1,
            ..BicoganConfig::default()
        };
        let trained = train_bicogan(&toy_transitions(40, 3, 5), &cfg, 6).unwrap();
        assert!(trained.trace.iter().all(|s| s.recon_term == 0.0));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = BicoganParams::new(2, &BicoganConfig::default(), &mut rng_from_seed(7));
        let path = dir.path().join("g.ckpt");
        p.save(&path).unwrap();
        let back = BicoganParams::load(&path).unwrap();
        assert_eq!(back.dim, 2);
        let x = [0.25, -0.5];
        let a = encode(&p, &x).unwrap().0;
        let b = encode(&back, &x).unwrap().0;
        assert!(a.iter().zip(&b).all(|(u, v)| (u - v).abs() < 1e-5));
    }
}
