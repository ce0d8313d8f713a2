//! Dialogue-level donation regressor used as the terminal reward.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::corpus::DialogueCorpus;
use crate::error::{ensure_dim, Error, Result};
use crate::numerics::{
    read_checkpoint, rng_from_seed, sigmoid, write_checkpoint, Activation, AdamConfig, AdamState, LayerSpec,
    LstmParams, Mlp, Objective,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DdpConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Upper end of the prediction range, in currency units.
    pub max_donation: f64,
    pub holdout: f64,
}

impl Default for DdpConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            epochs: 40,
            batch_size: 16,
            lr: 5e-3,
            max_donation: 20.0,
            holdout: 0.2,
        }
    }
}

/// LSTM over the utterance sequence, affine readout of the final hidden
/// state, `max_donation * sigmoid(.)` on top.
#[derive(Debug, Clone, PartialEq)]
pub struct DdpParams {
    pub lstm: LstmParams,
    pub readout: Mlp,
    pub max_donation: f64,
}

impl DdpParams {
    pub fn new(input: usize, hidden: usize, max_donation: f64, rng: &mut crate::numerics::Rng) -> Self {
        Self {
            lstm: LstmParams::new(input, hidden, rng),
            readout: Mlp::new(&[hidden, 1], &[Activation::Identity], rng),
            max_donation,
        }
    }

    pub fn input_size(&self) -> usize {
        self.lstm.input_size()
    }

    fn flat(&self) -> Vec<f64> {
        [self.lstm.params(), self.readout.params()].concat()
    }

    fn with_flat(&self, flat: &[f64]) -> Self {
        let n = self.lstm.params().len();
        let mut out = self.clone();
        out.lstm.params_mut().copy_from_slice(&flat[..n]);
        out.readout.params_mut().copy_from_slice(&flat[n..]);
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = json!({
            "kind": "ddp",
            "input": self.lstm.input_size(),
            "hidden": self.lstm.hidden_size(),
            "max_donation": self.max_donation,
            "readout": self.readout.layers(),
        });
        write_checkpoint(path, &header, &self.flat())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = read_checkpoint(path)?;
        let bad = |m: String| Error::Format(format!("{}: {m}", path.display()));
        if ck.header["kind"] != "ddp" {
            return Err(bad("not a donation-model checkpoint".into()));
        }
        let field = |k: &str| ck.header[k].as_u64().ok_or_else(|| bad(format!("missing {k}")));
        let (input, hidden) = (field("input")? as usize, field("hidden")? as usize);
        let layers: Vec<LayerSpec> =
            serde_json::from_value(ck.header["readout"].clone()).map_err(|e| bad(e.to_string()))?;
        let n = 4 * hidden * (input + hidden) + 4 * hidden;
        let mut readout = Mlp::from_layers(layers);
        ensure_dim("donation-model checkpoint parameters", n + readout.param_count(), ck.params.len())?;
        readout.params_mut().copy_from_slice(&ck.params[n..]);
        Ok(Self {
            lstm: LstmParams::with_params(input, hidden, ck.params[..n].to_vec())?,
            readout,
            max_donation: ck.header["max_donation"].as_f64().ok_or_else(|| bad("missing max_donation".into()))?,
        })
    }
}

/// Predicted donation in `[0, max_donation]`.
pub fn predict_donation<S: AsRef<[f64]>>(params: &DdpParams, sequence: &[S]) -> Result<f64> {
    let trace = params.lstm.forward(sequence)?;
    let z = params.readout.forward(trace.final_hidden())?[0];
    Ok(params.max_donation * sigmoid(z))
}

/// Terminal-only reward: zero before the last step `T - 1`, the predicted
/// donation of the whole sequence at it.
pub fn reward<S: AsRef<[f64]>>(params: &DdpParams, prefix: &[S], t: usize, horizon: usize) -> Result<f64> {
    if t >= horizon {
        return Err(Error::Contract(format!("reward step {t} outside horizon {horizon}")));
    }
    if t + 1 < horizon {
        return Ok(0.0);
    }
    predict_donation(params, prefix)
}

/// Running totals of the per-dialogue predictions.
pub fn cumulative_rewards<S: AsRef<[f64]>>(params: &DdpParams, dialogues: &[Vec<S>]) -> Result<Vec<f64>> {
    let mut total = 0.0;
    dialogues
        .iter()
        .map(|d| {
            total += predict_donation(params, d)?;
            Ok(total)
        })
        .collect()
}

/// `sum_i (p_i - y_i)^2 / n` with `p = sigmoid(z)` on the unit scale,
/// targets divided by `max_donation`.
struct DdpObjective<'a> {
    params: &'a DdpParams,
    flat: Vec<f64>,
    data: &'a [(Vec<Vec<f64>>, f64)],
}

fn ddp_loss_grad(params: &DdpParams, data: &[(Vec<Vec<f64>>, f64)]) -> (f64, Vec<f64>) {
    let n_lstm = params.lstm.params().len();
    let mut grad = vec![0.0; n_lstm + params.readout.param_count()];
    let scale = 1.0 / data.len().max(1) as f64;
    let mut loss = 0.0;
    for (seq, y) in data {
        let trace = params.lstm.forward_with(params.lstm.params(), seq);
        let rt = params.readout.trace_with(params.readout.params(), trace.final_hidden());
        let p = sigmoid(rt.output()[0]);
        let err = p - y / params.max_donation;
        loss += err * err * scale;
        let dz = 2.0 * err * p * (1.0 - p) * scale;
        let (gl, gr) = grad.split_at_mut(n_lstm);
        let dh = params
            .readout
            .backward_with(params.readout.params(), &rt, &[dz], gr)
            .expect("fixed shapes");
        params
            .lstm
            .backward_accumulate(&trace, &dh, None, gl)
            .expect("fixed shapes");
    }
    (loss, grad)
}

impl Objective for DdpObjective<'_> {
    fn params(&self) -> &[f64] {
        &self.flat
    }

    fn loss_at(&self, p: &[f64]) -> f64 {
        ddp_loss_grad(&self.params.with_flat(p), self.data).0
    }

    fn gradient_at(&self, p: &[f64]) -> Vec<f64> {
        ddp_loss_grad(&self.params.with_flat(p), self.data).1
    }
}

/// Max relative gradient error of the training loss on `data`
/// (`(sequence, donation)` pairs).
pub fn ddp_grad_check(params: &DdpParams, data: &[(Vec<Vec<f64>>, f64)], probes: usize, epsilon: f64, seed: u64) -> f64 {
    let obj = DdpObjective {
        params,
        flat: params.flat(),
        data,
    };
    crate::numerics::grad_check(&obj, probes, epsilon, seed)
}

#[derive(Debug, Clone)]
pub struct TrainedDdp {
    pub params: DdpParams,
    /// Mean training loss per epoch (unit scale).
    pub loss_trace: Vec<f64>,
    /// Held-out RMSE in currency units (`NaN` without a held-out split).
    pub heldout_rmse: f64,
    pub heldout_r2: f64,
}

fn sequences(corpus: &DialogueCorpus) -> Vec<(Vec<Vec<f64>>, f64)> {
    corpus
        .dialogues
        .iter()
        .filter(|d| !d.utterances.is_empty())
        .map(|d| (d.utterances.iter().map(|u| u.embedding_f64()).collect(), d.donation()))
        .collect()
}

/// RMSE and coefficient of determination of `params` on `data`.
pub fn regression_metrics(params: &DdpParams, data: &[(Vec<Vec<f64>>, f64)]) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let n = data.len() as f64;
    let mean = data.iter().map(|(_, y)| y).sum::<f64>() / n;
    let (mut sse, mut sst) = (0.0, 0.0);
    for (seq, y) in data {
        let p = predict_donation(params, seq)?;
        sse += (p - y).powi(2);
        sst += (y - mean).powi(2);
    }
    let r2 = if sst > 0.0 { 1.0 - sse / sst } else { f64::NAN };
    Ok(((sse / n).sqrt(), r2))
}

/// Mini-batch Adam on squared error. A seeded `holdout` fraction of the
/// dialogues is kept out of training for the reported metrics.
pub fn train_ddp(corpus: &DialogueCorpus, config: &DdpConfig, seed: u64) -> Result<TrainedDdp> {
    let mut data = sequences(corpus);
    if data.is_empty() {
        return Err(Error::Empty("dialogues for donation regression"));
    }
    if !(config.max_donation > 0.0) {
        return Err(Error::Config("max_donation must be positive".into()));
    }
    let mut rng = rng_from_seed(seed);
    data.shuffle(&mut rng);
    let n_hold = ((data.len() as f64 * config.holdout) as usize).min(data.len() - 1);
    let (held, train) = data.split_at(n_hold);
    let mut params = DdpParams::new(corpus.dim, config.hidden, config.max_donation, &mut rng);
    let mut flat = params.flat();
    let mut adam = AdamState::new(AdamConfig::with_lr(config.lr), flat.len());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut loss_trace = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size.max(1)) {
            let batch: Vec<(Vec<Vec<f64>>, f64)> = chunk.iter().map(|&i| train[i].clone()).collect();
            let (loss, grad) = ddp_loss_grad(&params, &batch);
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    context: "donation regression loss",
                    epoch,
                });
            }
            total += loss * batch.len() as f64;
            adam.step(&mut flat, &grad)?;
            params = params.with_flat(&flat);
        }
        let mean = total / train.len() as f64;
        log::debug!("ddp epoch {epoch}: loss {mean:.6}");
        loss_trace.push(mean);
    }
    let (heldout_rmse, heldout_r2) = regression_metrics(&params, held)?;
    Ok(TrainedDdp {
        params,
        loss_trace,
        heldout_rmse,
        heldout_r2,
    })
}
