//! Adam with classic L2 weight decay folded into the gradient.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-3,
        }
    }
}

/// First/second moment accumulators for one flat parameter block plus the
/// shared step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
    pub hyper: AdamHyper,
}

impl AdamState {
    /// Moments start at zero, one (m, v) pair per parameter block.
    pub fn new(block_sizes: &[usize], hyper: AdamHyper) -> Self {
        AdamState {
            m: block_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: block_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
            hyper,
        }
    }

    /// One Adam update over all blocks. `params` and `grads` must be in the
    /// same block order as construction. `label` names the owner for
    /// non-finite gradient reports.
    pub fn step(
        &mut self,
        params: &mut [&mut [f64]],
        grads: &[&[f64]],
        labels: &[String],
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::dimension("parameter blocks", self.m.len(), params.len()));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Training(format!("gradient of {}", labels[i])));
            }
        }
        self.t += 1;
        let h = self.hyper;
        let bc1 = 1.0 - h.beta1.powi(self.t as i32);
        let bc2 = 1.0 - h.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            if p.len() != m.len() || g.len() != m.len() {
                return Err(Error::dimension("parameter block size", m.len(), p.len()));
            }
            for j in 0..p.len() {
                let grad = g[j] + h.weight_decay * p[j];
                m[j] = h.beta1 * m[j] + (1.0 - h.beta1) * grad;
                v[j] = h.beta2 * v[j] + (1.0 - h.beta2) * grad * grad;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= h.lr * m_hat / (v_hat.sqrt() + h.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hyper(wd: f64) -> AdamHyper {
        AdamHyper {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: wd,
        }
    }

    #[test]
    fn zero_gradient_zero_decay_leaves_params() {
        let mut state = AdamState::new(&[3], hyper(0.0));
        let mut p = vec![1.0, -2.0, 0.5];
        let g = vec![0.0; 3];
        let before = p.clone();
        state
            .step(&mut [&mut p], &[&g], &[String::from("block")])
            .unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn single_step_matches_closed_form() {
        // Scalar case from zero moments: m = (1-b1) g, v = (1-b2) g^2,
        // m_hat = g, v_hat = g^2, update = -lr * g / (|g| + eps).
        let g = 0.37;
        let h = hyper(0.0);
        let mut state = AdamState::new(&[1], h);
        let mut p = vec![2.0];
        state
            .step(&mut [&mut p[..]], &[&[g]], &[String::from("s")])
            .unwrap();
        let expected = 2.0 - h.lr * g / (g.abs() + h.eps);
        assert!((p[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn two_steps_differ_from_one_doubled_step() {
        let g = 0.5;
        let h = hyper(0.0);

        let mut s2 = AdamState::new(&[1], h);
        let mut p2 = vec![1.0];
        s2.step(&mut [&mut p2[..]], &[&[g]], &[String::from("s")])
            .unwrap();
        s2.step(&mut [&mut p2[..]], &[&[g]], &[String::from("s")])
            .unwrap();

        let mut s1 = AdamState::new(&[1], h);
        let mut p1 = vec![1.0];
        s1.step(&mut [&mut p1[..]], &[&[2.0 * g]], &[String::from("s")])
            .unwrap();

        assert!((p1[0] - p2[0]).abs() > 1e-9);
    }

    #[test]
    fn non_finite_gradient_names_block() {
        let mut state = AdamState::new(&[1], hyper(0.0));
        let mut p = vec![1.0];
        let err = state
            .step(&mut [&mut p[..]], &[&[f64::NAN]], &[String::from("layer-7")])
            .unwrap_err();
        assert!(err.to_string().contains("layer-7"));
    }

    #[test]
    fn weight_decay_pulls_toward_zero() {
        let mut state = AdamState::new(&[1], hyper(0.01));
        let mut p = vec![5.0];
        state
            .step(&mut [&mut p[..]], &[&[0.0]], &[String::from("s")])
            .unwrap();
        assert!(p[0] < 5.0);
    }
}
