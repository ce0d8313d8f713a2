use rand::Rng as _;

use super::{sigmoid, Rng};
use crate::error::{ensure_dim, Error, Result};

/// Single-layer LSTM. Parameters are one flat buffer: a row-major
/// `4h x (input + h)` weight block acting on `[x_t; h_{t-1}]`, followed by a
/// `4h` bias. Gate rows are ordered input, forget, candidate, output.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    input: usize,
    hidden: usize,
    params: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct LstmTrace {
    xs: Vec<Vec<f64>>,
    /// `hs[0]` is the zero initial state; `hs[t + 1]` follows step `t`.
    hs: Vec<Vec<f64>>,
    cs: Vec<Vec<f64>>,
    /// Post-nonlinearity gate values per step, laid out like the weight rows.
    gates: Vec<Vec<f64>>,
}

impl LstmTrace {
    pub fn final_hidden(&self) -> &[f64] {
        self.hs.last().unwrap()
    }

    /// Hidden state after each step.
    pub fn outputs(&self) -> &[Vec<f64>] {
        &self.hs[1..]
    }
}

impl LstmParams {
    pub fn new(input: usize, hidden: usize, rng: &mut Rng) -> Self {
        let mut p = Self::zeros(input, hidden);
        let bound = 1.0 / ((input + hidden) as f64).sqrt();
        for v in &mut p.params {
            *v = rng.random_range(-bound..bound);
        }
        p
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            input,
            hidden,
            params: vec![0.0; Self::count(input, hidden)],
        }
    }

    pub fn with_params(input: usize, hidden: usize, params: Vec<f64>) -> Result<Self> {
        ensure_dim("lstm parameters", Self::count(input, hidden), params.len())?;
        Ok(Self {
            input,
            hidden,
            params,
        })
    }

    fn count(input: usize, hidden: usize) -> usize {
        4 * hidden * (input + hidden) + 4 * hidden
    }

    pub fn input_size(&self) -> usize {
        self.input
    }

    pub fn hidden_size(&self) -> usize {
        self.hidden
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn check_sequence<S: AsRef<[f64]>>(&self, seq: &[S]) -> Result<()> {
        if seq.is_empty() {
            return Err(Error::Contract("lstm over an empty sequence".into()));
        }
        for x in seq {
            ensure_dim("lstm step input", self.input, x.as_ref().len())?;
        }
        Ok(())
    }

    /// Runs the recurrence from a zero state and returns the full trace.
    pub fn forward<S: AsRef<[f64]>>(&self, seq: &[S]) -> Result<LstmTrace> {
        self.check_sequence(seq)?;
        Ok(self.forward_with(&self.params, seq))
    }

    pub(crate) fn forward_with<S: AsRef<[f64]>>(&self, params: &[f64], seq: &[S]) -> LstmTrace {
        let h = self.hidden;
        let cols = self.input + h;
        let (w, b) = params.split_at(4 * h * cols);
        let mut trace = LstmTrace {
            xs: Vec::with_capacity(seq.len()),
            hs: vec![vec![0.0; h]],
            cs: vec![vec![0.0; h]],
            gates: Vec::with_capacity(seq.len()),
        };
        let mut joint = vec![0.0; cols];
        for x in seq {
            let x = x.as_ref();
            joint[..self.input].copy_from_slice(x);
            joint[self.input..].copy_from_slice(trace.hs.last().unwrap());
            let mut gate = vec![0.0; 4 * h];
            for (r, g) in gate.iter_mut().enumerate() {
                let row = &w[r * cols..(r + 1) * cols];
                let z: f64 = row.iter().zip(&joint).map(|(a, c)| a * c).sum::<f64>() + b[r];
                *g = if (2 * h..3 * h).contains(&r) {
                    z.tanh()
                } else {
                    sigmoid(z)
                };
            }
            let c_prev = trace.cs.last().unwrap();
            let mut c = vec![0.0; h];
            let mut hn = vec![0.0; h];
            for k in 0..h {
                c[k] = gate[h + k] * c_prev[k] + gate[k] * gate[2 * h + k];
                hn[k] = gate[3 * h + k] * c[k].tanh();
            }
            trace.xs.push(x.to_vec());
            trace.gates.push(gate);
            trace.cs.push(c);
            trace.hs.push(hn);
        }
        trace
    }

    /// Backpropagation through time. `dh_final` is dL/dh_T; `dh_steps`, when
    /// given, adds dL/dh_t for every step. Parameter gradients are added into
    /// `grad`; the per-step input gradients are returned.
    pub fn backward_accumulate(
        &self,
        trace: &LstmTrace,
        dh_final: &[f64],
        dh_steps: Option<&[Vec<f64>]>,
        grad: &mut [f64],
    ) -> Result<Vec<Vec<f64>>> {
        let h = self.hidden;
        ensure_dim("lstm hidden gradient", h, dh_final.len())?;
        ensure_dim("lstm gradient buffer", self.params.len(), grad.len())?;
        let steps = trace.xs.len();
        if let Some(d) = dh_steps {
            ensure_dim("lstm per-step gradients", steps, d.len())?;
        }
        let cols = self.input + h;
        let w = &self.params[..4 * h * cols];
        let (gw, gb) = grad.split_at_mut(4 * h * cols);

        let mut dh = dh_final.to_vec();
        if let Some(d) = dh_steps {
            for (a, b) in dh.iter_mut().zip(&d[steps - 1]) {
                *a += b;
            }
        }
        let mut dc = vec![0.0; h];
        let mut dz = vec![0.0; 4 * h];
        let mut joint = vec![0.0; cols];
        let mut dx_all = vec![Vec::new(); steps];
        for t in (0..steps).rev() {
            let gate = &trace.gates[t];
            let c = &trace.cs[t + 1];
            let c_prev = &trace.cs[t];
            for k in 0..h {
                let (i, f, g, o) = (gate[k], gate[h + k], gate[2 * h + k], gate[3 * h + k]);
                let tc = c[k].tanh();
                let d_o = dh[k] * tc;
                let dck = dc[k] + dh[k] * o * (1.0 - tc * tc);
                dz[k] = dck * g * i * (1.0 - i);
                dz[h + k] = dck * c_prev[k] * f * (1.0 - f);
                dz[2 * h + k] = dck * i * (1.0 - g * g);
                dz[3 * h + k] = d_o * o * (1.0 - o);
                dc[k] = dck * f;
            }
            joint[..self.input].copy_from_slice(&trace.xs[t]);
            joint[self.input..].copy_from_slice(&trace.hs[t]);
            let mut djoint = vec![0.0; cols];
            for (r, &d) in dz.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                gb[r] += d;
                let row = &w[r * cols..(r + 1) * cols];
                for ((gwv, &jv), (dj, &wv)) in gw[r * cols..(r + 1) * cols]
                    .iter_mut()
                    .zip(&joint)
                    .zip(djoint.iter_mut().zip(row))
                {
                    *gwv += d * jv;
                    *dj += d * wv;
                }
            }
            dh.copy_from_slice(&djoint[self.input..]);
            if t > 0 {
                if let Some(d) = dh_steps {
                    for (a, b) in dh.iter_mut().zip(&d[t - 1]) {
                        *a += b;
                    }
                }
            }
            djoint.truncate(self.input);
            dx_all[t] = djoint;
        }
        Ok(dx_all)
    }
}
