use rand::Rng as _;

use super::rng_from_seed;

/// A scalar function of a flat parameter vector with an analytic gradient.
pub trait Objective {
    fn params(&self) -> &[f64];
    fn loss_at(&self, params: &[f64]) -> f64;
    fn gradient_at(&self, params: &[f64]) -> Vec<f64>;
}

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares the analytic gradient with central differences on `probes`
/// randomly chosen coordinates (all coordinates when `probes` exceeds the
/// parameter count) and returns the largest relative error.
pub fn grad_check<O: Objective + ?Sized>(obj: &O, probes: usize, epsilon: f64, seed: u64) -> f64 {
    let base = obj.params().to_vec();
    let analytic = obj.gradient_at(&base);
    let n = base.len();
    let coords: Vec<usize> = if probes >= n {
        (0..n).collect()
    } else {
        let mut rng = rng_from_seed(seed);
        (0..probes).map(|_| rng.random_range(0..n)).collect()
    };
    let mut work = base.clone();
    let mut worst = 0.0f64;
    for i in coords {
        work[i] = base[i] + epsilon;
        let up = obj.loss_at(&work);
        work[i] = base[i] - epsilon;
        let down = obj.loss_at(&work);
        work[i] = base[i];
        let numeric = (up - down) / (2.0 * epsilon);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Activation, Mlp};

    struct Probe {
        net: Mlp,
        input: Vec<f64>,
        upstream: Vec<f64>,
        corrupt: bool,
    }

    impl Objective for Probe {
        fn params(&self) -> &[f64] {
            self.net.params()
        }
        fn loss_at(&self, p: &[f64]) -> f64 {
            let y = self.net.forward_with(p, &self.input);
            y.iter().zip(&self.upstream).map(|(a, b)| a * b).sum()
        }
        fn gradient_at(&self, p: &[f64]) -> Vec<f64> {
            let mut net = self.net.clone();
            net.params_mut().copy_from_slice(p);
            let (mut g, _) = net.backward(&self.input, &self.upstream).unwrap();
            if self.corrupt {
                for v in g.iter_mut().step_by(3) {
                    *v *= 1.1;
                }
            }
            g
        }
    }

    fn probe(widths: &[usize], acts: &[Activation], corrupt: bool) -> Probe {
        let mut rng = rng_from_seed(17);
        let net = Mlp::new(widths, acts, &mut rng);
        let input = (0..widths[0]).map(|i| 0.3 + 0.2 * i as f64).collect();
        let upstream = (0..*widths.last().unwrap()).map(|i| 1.0 - 0.4 * i as f64).collect();
        Probe {
            net,
            input,
            upstream,
            corrupt,
        }
    }

    #[test]
    fn linear_net_is_exact() {
        let p = probe(&[4, 3], &[Activation::Identity], false);
        assert!(grad_check(&p, 1000, 1e-3, 1) <= 1e-8);
    }

    #[test]
    fn two_layer_tanh_net_within_tolerance() {
        let p = probe(&[5, 7, 3], &[Activation::Tanh, Activation::Tanh], false);
        assert!(grad_check(&p, 1000, 1e-5, 1) <= 1e-4);
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let p = probe(&[5, 7, 3], &[Activation::Tanh, Activation::Tanh], true);
        assert!(grad_check(&p, 1000, 1e-5, 1) > 1e-2);
    }
}
