//! Synthetic dialogue world with a known structural causal model.
//!
//! States evolve as `s' = A s + B a + eps`. Persuadee utterances are the
//! states themselves; persuader utterances are noisy strategy centers. The
//! strategy graph decides which persuader strategies a persuadee strategy
//! tends to trigger, and those triggered strategies push the donation up.
//! A persona subspace persists across turns and ignores actions; goodwill
//! along the donation direction decays and is fed by effective actions.

use nalgebra::DMatrix;
use rand::seq::IndexedRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::corpus::{Dialogue, DialogueCorpus, Role, Transition, Utterance};
use crate::discovery::{ee_column, er_column, CausalDataset, CauseEffectMap, Dag, DONATION_COLUMN};
use crate::error::{ensure_dim, Error, Result};
use crate::numerics::{derive_seed, dot, rng_from_seed, sigmoid, to_f64, Rng};
use crate::strategy::argmax;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub dim: usize,
    pub k_ee: usize,
    pub k_er: usize,
    /// Expected number of edges touching a node of the strategy graph.
    pub avg_degree: f64,
    pub state_noise: f64,
    pub action_noise: f64,
    /// Noise multiplier for the second and third persuader turns.
    pub rapport_noise: f64,
    pub greeting_scale: f64,
    /// Offset of triggered persuader strategies along the donation direction.
    pub effect_shift: f64,
    /// Probability that the behavior policy answers with a triggered strategy.
    pub behavior_effect_prob: f64,
    /// Decay of the persuadee-strategy component of the state per step.
    pub persona_persistence: f64,
    /// Decay of the state's component along the donation direction.
    pub goodwill_persistence: f64,
    /// Gain from an action's donation component to the next state's.
    pub goodwill_gain: f64,
    pub a_norm: f64,
    pub b_norm: f64,
    /// Target standard deviation of the donation logit.
    pub donation_spread: f64,
    pub max_donation_cents: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            dim: 16,
            k_ee: 6,
            k_er: 8,
            avg_degree: 2.0,
            state_noise: 0.1,
            action_noise: 0.3,
            rapport_noise: 0.2,
            greeting_scale: 3.0,
            effect_shift: 0.5,
            behavior_effect_prob: 0.5,
            persona_persistence: 0.9,
            goodwill_persistence: 0.5,
            goodwill_gain: 0.5,
            a_norm: 0.5,
            b_norm: 0.5,
            donation_spread: 1.5,
            max_donation_cents: 2000,
        }
    }
}

/// Linear-Gaussian SCM over a DAG whose node index order is a topological
/// order. `weights[v][k]` belongs to `dag.parents(v)[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearGaussianScm {
    pub dag: Dag,
    pub weights: Vec<Vec<f64>>,
    pub noise_sd: f64,
}

impl LinearGaussianScm {
    /// Random forward edges with probability `avg_degree / (p - 1)`,
    /// weights uniform in `±[0.5, 1.5]`.
    pub fn random(names: Vec<String>, avg_degree: f64, rng: &mut Rng) -> Result<Self> {
        let p = names.len();
        if !(avg_degree >= 0.0) || (p > 1 && avg_degree > (p - 1) as f64) || (p <= 1 && avg_degree > 0.0) {
            return Err(Error::Config(format!("average degree {avg_degree} infeasible for {p} nodes")));
        }
        let prob = if p > 1 { avg_degree / (p - 1) as f64 } else { 0.0 };
        let mut parents = vec![Vec::new(); p];
        let mut weights = vec![Vec::new(); p];
        for v in 0..p {
            for u in 0..v {
                if rng.random::<f64>() < prob {
                    let mag: f64 = rng.random_range(0.5..1.5);
                    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                    parents[v].push(u);
                    weights[v].push(sign * mag);
                }
            }
        }
        Ok(Self {
            dag: Dag::from_parents(names, parents)?,
            weights,
            noise_sd: 1.0,
        })
    }

    pub fn sample(&self, n: usize, seed: u64) -> CausalDataset {
        let mut rng = rng_from_seed(seed);
        let p = self.dag.len();
        let rows = (0..n)
            .map(|_| {
                let mut x = vec![0.0; p];
                for v in 0..p {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    x[v] = self.noise_sd * e
                        + self
                            .dag
                            .parents(v)
                            .iter()
                            .zip(&self.weights[v])
                            .map(|(&u, w)| w * x[u])
                            .sum::<f64>();
                }
                x
            })
            .collect();
        CausalDataset::from_rows(self.dag.nodes.clone(), rows).expect("finite rows of matching width")
    }
}

#[derive(Debug, Clone)]
pub struct SynthScm {
    pub spec: SynthSpec,
    pub graph: LinearGaussianScm,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub ee_centers: Vec<Vec<f64>>,
    pub er_centers: Vec<Vec<f64>>,
    pub greeting: Vec<f64>,
    pub donation_w: Vec<f64>,
    pub donation_bias: f64,
    /// Persuader strategies triggered by each persuadee strategy.
    pub effects: Vec<Vec<usize>>,
}

pub fn ee_label(k: usize) -> String {
    format!("ee{k}")
}

pub fn er_label(j: usize) -> String {
    format!("er{j}")
}

fn gaussian_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = dot(&v, &v).sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    v
}

/// Random `d x d` matrix acting on the first `d - 1` coordinates, scaled to
/// spectral norm `norm`.
fn contraction(rng: &mut Rng, d: usize, norm: f64) -> DMatrix<f64> {
    let k = d - 1;
    let m: DMatrix<f64> = DMatrix::from_fn(k, k, |_, _| StandardNormal.sample(rng));
    let s: f64 = m.singular_values().max();
    let scaled: DMatrix<f64> = m * (norm / s);
    let mut out: DMatrix<f64> = DMatrix::zeros(d, d);
    out.view_mut((0, 0), (k, k)).copy_from(&scaled);
    out
}

/// Orthogonal projector onto the span of `vs`, padded with a zero last
/// coordinate.
fn projector(vs: &[Vec<f64>], d: usize) -> DMatrix<f64> {
    let k = d - 1;
    let m: DMatrix<f64> = DMatrix::from_fn(k, vs.len().min(k), |i, j| vs[j][i]);
    let q = m.qr().q();
    let mut out: DMatrix<f64> = DMatrix::zeros(d, d);
    out.view_mut((0, 0), (k, k)).copy_from(&(&q * q.transpose()));
    out
}

/// `m` restricted to the complement of `p`, rescaled to spectral norm `norm`.
fn off_subspace(m: DMatrix<f64>, p: &DMatrix<f64>, norm: f64) -> DMatrix<f64> {
    let d = m.nrows();
    let mut c: DMatrix<f64> = DMatrix::identity(d, d) - p;
    c[(d - 1, d - 1)] = 0.0;
    let r = &c * m * &c;
    let s = r.singular_values().max();
    r * (norm / s)
}

fn mat_vec(m: &DMatrix<f64>, v: &[f64]) -> Vec<f64> {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)] * v[j]).sum()).collect()
}

pub fn sample_scm(spec: &SynthSpec, seed: u64) -> Result<SynthScm> {
    if spec.dim < 2 || spec.k_ee == 0 || spec.k_er == 0 || spec.k_ee + 2 >= spec.dim {
        return Err(Error::Config(
            "synthetic world needs non-empty vocabularies and dim > k_ee + 2".into(),
        ));
    }
    if [spec.persona_persistence, spec.goodwill_persistence, spec.goodwill_gain]
        .iter()
        .any(|v| !(0.0..1.0).contains(v))
    {
        return Err(Error::Config("persistence and gain terms must lie in [0, 1)".into()));
    }
    let mut rng = rng_from_seed(seed);
    let d = spec.dim;
    let mut names: Vec<String> = (0..spec.k_ee).map(|k| ee_column(&ee_label(k))).collect();
    names.extend((0..spec.k_er).map(|j| er_column(&er_label(j))));
    names.push(DONATION_COLUMN.into());
    let graph = LinearGaussianScm::random(names, spec.avg_degree, &mut rng)?;
    let mut effects = vec![Vec::new(); spec.k_ee];
    for j in 0..spec.k_er {
        for &u in graph.dag.parents(spec.k_ee + j) {
            if u < spec.k_ee {
                effects[u].push(j);
            }
        }
    }
    let triggered: Vec<bool> = (0..spec.k_er).map(|j| effects.iter().any(|e| e.contains(&j))).collect();

    let lift = |v: Vec<f64>| {
        let mut out = v;
        out.push(0.0);
        out
    };
    let w_hat = lift(unit(gaussian_vec(&mut rng, d - 1)));
    let off_w = |r: Vec<f64>| {
        let along = dot(&r, &w_hat[..d - 1]);
        lift(unit(r.iter().zip(&w_hat).map(|(x, w)| x - along * w).collect()))
    };
    let ee_centers: Vec<Vec<f64>> = (0..spec.k_ee).map(|_| off_w(gaussian_vec(&mut rng, d - 1))).collect();
    let er_centers: Vec<Vec<f64>> = (0..spec.k_er)
        .map(|j| {
            // Only the shift moves a persuader strategy along the donation
            // direction, so strategies differ in donation by trigger status.
            let c = off_w(gaussian_vec(&mut rng, d - 1));
            let shift = if triggered[j] { spec.effect_shift } else { -spec.effect_shift };
            c.iter().zip(&w_hat).map(|(x, w)| x + shift * w).collect()
        })
        .collect();
    // The persuadee-strategy subspace decays slowly and is untouched by
    // actions, so each dialogue keeps a dominant persuadee strategy and the
    // persuader's choices do not feed back into it. Along the donation
    // direction the state accumulates the persuader's past actions.
    let persona = projector(&ee_centers, d);
    let goodwill = projector(std::slice::from_ref(&w_hat), d);
    let fixed = &persona + &goodwill;
    let a = &persona * spec.persona_persistence
        + &goodwill * spec.goodwill_persistence
        + off_subspace(contraction(&mut rng, d, 1.0), &fixed, spec.a_norm);
    let b = &goodwill * spec.goodwill_gain + off_subspace(contraction(&mut rng, d, 1.0), &fixed, spec.b_norm);
    let mut greeting = vec![0.0; d];
    greeting[d - 1] = spec.greeting_scale;

    let mut scm = SynthScm {
        spec: spec.clone(),
        graph,
        a,
        b,
        ee_centers,
        er_centers,
        greeting,
        donation_w: w_hat.clone(),
        donation_bias: 0.0,
        effects,
    };
    // Calibrate the donation logit to zero mean and the requested spread
    // on a pilot sample.
    let mut pilot = rng_from_seed(derive_seed(seed, 1));
    let z: Vec<f64> = (0..200)
        .map(|i| {
            let (d, _) = scm.simulate_dialogue(&format!("pilot-{i}"), 25, &mut pilot);
            dot(&w_hat, &sequence_mean(&d))
        })
        .collect();
    let mean = z.iter().sum::<f64>() / z.len() as f64;
    let sd = (z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / z.len() as f64).sqrt();
    let kappa = if sd > 1e-9 { spec.donation_spread / sd } else { 1.0 };
    scm.donation_w = w_hat.iter().map(|w| w * kappa).collect();
    scm.donation_bias = -kappa * mean;
    Ok(scm)
}

/// Mean of a dialogue's utterance embeddings.
pub fn sequence_mean(d: &Dialogue) -> Vec<f64> {
    let dim = d.utterances.first().map_or(0, |u| u.embedding.len());
    let mut m = vec![0.0; dim];
    for u in &d.utterances {
        for (a, &v) in m.iter_mut().zip(&u.embedding) {
            *a += v as f64;
        }
    }
    let n = d.utterances.len().max(1) as f64;
    m.iter_mut().for_each(|a| *a /= n);
    m
}

impl SynthScm {
    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    pub fn ee_strategy(&self, s: &[f64]) -> usize {
        let scores: Vec<f64> = self.ee_centers.iter().map(|c| dot(c, s)).collect();
        argmax(&scores)
    }

    pub fn next_state(&self, s: &[f64], a: &[f64], eps: &[f64]) -> Vec<f64> {
        let mut out = mat_vec(&self.a, s);
        for ((o, ba), e) in out.iter_mut().zip(mat_vec(&self.b, a)).zip(eps) {
            *o += ba + e;
        }
        out
    }

    /// Noise of a transition generated by this model.
    pub fn transition_noise(&self, tr: &Transition) -> Vec<f64> {
        let pred = self.next_state(&tr.s, &tr.a, &vec![0.0; self.dim()]);
        tr.s_next.iter().zip(pred).map(|(x, p)| x - p).collect()
    }

    /// Donation in cents for a sequence of f32 embeddings.
    pub fn donation_cents(&self, d: &Dialogue) -> u64 {
        let z = dot(&self.donation_w, &sequence_mean(d)) + self.donation_bias;
        (self.spec.max_donation_cents as f64 * sigmoid(z)).round() as u64
    }

    /// The true persuadee-to-persuader map of the strategy graph.
    pub fn true_effect_map(&self) -> CauseEffectMap {
        let mut map = CauseEffectMap::default();
        for (k, js) in self.effects.iter().enumerate() {
            if !js.is_empty() {
                map.effects.insert(ee_label(k), js.iter().map(|&j| er_label(j)).collect());
            }
        }
        map
    }

    fn state_noise(&self, rng: &mut Rng) -> Vec<f64> {
        let mut e: Vec<f64> = gaussian_vec(rng, self.dim()).iter().map(|x| x * self.spec.state_noise).collect();
        e[self.dim() - 1] = 0.0;
        e
    }

    fn action(&self, j: usize, noise_scale: f64, rng: &mut Rng) -> Vec<f64> {
        let z = gaussian_vec(rng, self.dim());
        let mut a: Vec<f64> = self.er_centers[j]
            .iter()
            .zip(&z)
            .map(|(c, e)| c + noise_scale * self.spec.action_noise * e)
            .collect();
        a[self.dim() - 1] = 0.0;
        a
    }

    /// A persuadee strategy without effects is answered like a uniformly
    /// drawn strategy that has some, so its reply distribution equals the
    /// average one and carries no dependence on the persuader side.
    fn behavior(&self, ee: usize, rng: &mut Rng) -> usize {
        let with_effects: Vec<usize> = (0..self.spec.k_ee).filter(|&k| !self.effects[k].is_empty()).collect();
        let ee = if self.effects[ee].is_empty() {
            with_effects.choose(rng).copied().unwrap_or(ee)
        } else {
            ee
        };
        let fx = &self.effects[ee];
        if !fx.is_empty() && rng.random::<f64>() < self.spec.behavior_effect_prob {
            *fx.choose(rng).expect("non-empty")
        } else {
            rng.random_range(0..self.spec.k_er)
        }
    }

    /// One dialogue of `t_slots` utterances opening with a persuader
    /// greeting. Returns the dialogue (donation filled in) and the noise
    /// vectors used for each state after the first.
    pub fn simulate_dialogue(&self, id: &str, t_slots: usize, rng: &mut Rng) -> (Dialogue, Vec<Vec<f64>>) {
        let mut utterances = Vec::with_capacity(t_slots);
        let mut noises = Vec::new();
        let push = |utterances: &mut Vec<Utterance>, role: Role, emb: &[f64], label: String| {
            utterances.push(Utterance {
                dialogue_id: id.to_string(),
                turn: utterances.len(),
                role,
                text: String::new(),
                embedding: emb.iter().map(|&x| x as f32).collect(),
                strategy: Some(label),
                strategy_dist: None,
            });
        };
        if t_slots > 0 {
            let j = rng.random_range(0..self.spec.k_er);
            let mut g = self.action(j, 1.0, rng);
            for (x, m) in g.iter_mut().zip(&self.greeting) {
                *x += m;
            }
            push(&mut utterances, Role::ER, &g, er_label(j));
        }
        let k0 = rng.random_range(0..self.spec.k_ee);
        let mut s: Vec<f64> = self.ee_centers[k0]
            .iter()
            .zip(self.state_noise(rng))
            .map(|(c, e)| c + e)
            .collect();
        let mut er_index = 1;
        while utterances.len() < t_slots {
            let s32 = to_f64(&s.iter().map(|&x| x as f32).collect::<Vec<f32>>());
            let ee = self.ee_strategy(&s32);
            push(&mut utterances, Role::EE, &s32, ee_label(ee));
            if utterances.len() == t_slots {
                break;
            }
            let j = self.behavior(ee, rng);
            let scale = if er_index == 1 || er_index == 2 { self.spec.rapport_noise } else { 1.0 };
            let a = self.action(j, scale, rng);
            let a32 = to_f64(&a.iter().map(|&x| x as f32).collect::<Vec<f32>>());
            push(&mut utterances, Role::ER, &a32, er_label(j));
            er_index += 1;
            let eps = self.state_noise(rng);
            s = self.next_state(&s32, &a32, &eps);
            noises.push(eps);
        }
        let mut dialogue = Dialogue {
            id: id.to_string(),
            utterances,
            donation_cents: 0,
            donation_norm: None,
        };
        dialogue.donation_cents = self.donation_cents(&dialogue);
        (dialogue, noises)
    }
}

/// `m` dialogues of `t_slots` utterances each.
pub fn simulate_corpus(scm: &SynthScm, m: usize, t_slots: usize, seed: u64) -> DialogueCorpus {
    let mut rng = rng_from_seed(seed);
    let dialogues = (0..m)
        .map(|i| scm.simulate_dialogue(&format!("synth-{i:05}"), t_slots, &mut rng).0)
        .collect();
    DialogueCorpus::new(scm.dim(), dialogues).expect("simulated dialogues satisfy corpus invariants")
}

/// Exact counterfactual by abduction: `s_next + B (a' - a)`.
pub fn oracle_counterfactual(scm: &SynthScm, tr: &Transition, a_cf: &[f64]) -> Result<Vec<f64>> {
    let d = scm.dim();
    ensure_dim("transition state", d, tr.s.len())?;
    ensure_dim("transition action", d, tr.a.len())?;
    ensure_dim("transition next state", d, tr.s_next.len())?;
    ensure_dim("counterfactual action", d, a_cf.len())?;
    let delta: Vec<f64> = a_cf.iter().zip(&tr.a).map(|(x, y)| x - y).collect();
    Ok(tr.s_next.iter().zip(mat_vec(&scm.b, &delta)).map(|(s, b)| s + b).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::to_transitions;

    #[test]
    fn degree_zero_gives_empty_graph() {
        let spec = SynthSpec {
            avg_degree: 0.0,
            ..SynthSpec::default()
        };
        let scm = sample_scm(&spec, 1).unwrap();
        assert_eq!(scm.graph.dag.edge_count(), 0);
        assert!(scm.true_effect_map().is_empty());
    }

    #[test]
    fn infeasible_degree_is_rejected() {
        let names: Vec<String> = (0..3).map(|i| i.to_string()).collect();
        assert!(LinearGaussianScm::random(names.clone(), 2.5, &mut rng_from_seed(0)).is_err());
        assert!(LinearGaussianScm::random(names, -1.0, &mut rng_from_seed(0)).is_err());
    }

    #[test]
    fn contractions_are_stable() {
        let scm = sample_scm(&SynthSpec::default(), 3).unwrap();
        assert!(scm.a.singular_values().max() < 1.0);
        assert!(scm.b.singular_values().max() < 1.0);
    }

    #[test]
    fn simulation_is_reproducible_and_self_consistent() {
        let scm = sample_scm(&SynthSpec::default(), 4).unwrap();
        let a = simulate_corpus(&scm, 5, 25, 9);
        let b = simulate_corpus(&scm, 5, 25, 9);
        assert_eq!(a, b);
        for d in &a.dialogues {
            assert_eq!(d.utterances.len(), 25);
            assert_eq!(d.utterances[0].role, Role::ER);
            assert_eq!(scm.donation_cents(d), d.donation_cents);
            assert_eq!(to_transitions(d).len(), 11);
        }
    }

    #[test]
    fn oracle_identity_and_noise_recovery() {
        let scm = sample_scm(&SynthSpec::default(), 5).unwrap();
        let mut rng = rng_from_seed(2);
        let (d, noises) = scm.simulate_dialogue("x", 9, &mut rng);
        for (tr, eps) in to_transitions(&d).iter().zip(&noises) {
            assert_eq!(oracle_counterfactual(&scm, tr, &tr.a).unwrap(), tr.s_next);
            let rec = scm.transition_noise(tr);
            // States are stored in single precision.
            assert!(rec.iter().zip(eps).all(|(r, e)| (r - e).abs() < 1e-5));
        }
    }
}
