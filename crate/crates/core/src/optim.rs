//! Adam with per-element learning rates.

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// Some gradient was NaN or infinite; nothing changed except the flag.
    SkippedNonFinite,
}

/// Moment buffers and step counter for one flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// Extends or truncates the buffers; new entries start at zero.
    pub fn resize(&mut self, n: usize) {
        self.m.resize(n, 0.0);
        self.v.resize(n, 0.0);
    }

    pub fn update(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> StepOutcome {
        self.update_with(params, grads, |_| lr)
    }

    /// `lr(i)` gives the learning rate of element `i`.
    pub fn update_with(
        &mut self,
        params: &mut [f64],
        grads: &[f64],
        lr: impl Fn(usize) -> f64,
    ) -> StepOutcome {
        assert_eq!(
            params.len(),
            grads.len(),
            "parameter/gradient length mismatch"
        );
        assert_eq!(
            params.len(),
            self.m.len(),
            "optimizer state length mismatch"
        );
        if grads.iter().any(|g| !g.is_finite()) {
            return StepOutcome::SkippedNonFinite;
        }
        self.step += 1;
        let bc1 = 1.0 - BETA1.powi(self.step as i32);
        let bc2 = 1.0 - BETA2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = BETA1 * self.m[i] + (1.0 - BETA1) * g;
            self.v[i] = BETA2 * self.v[i] + (1.0 - BETA2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr(i) * m_hat / (v_hat.sqrt() + EPSILON);
        }
        StepOutcome::Applied
    }
}

/// A named parameter vector with its own learning rate and Adam state.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub params: Vec<f64>,
    pub lr: f64,
    pub state: Adam,
}

impl ParamGroup {
    pub fn new(name: impl Into<String>, params: Vec<f64>, lr: f64) -> Self {
        let n = params.len();
        Self {
            name: name.into(),
            params,
            lr,
            state: Adam::new(n),
        }
    }

    pub fn step(&mut self, grads: &[f64]) -> StepOutcome {
        let outcome = self.state.update(&mut self.params, grads, self.lr);
        if outcome == StepOutcome::SkippedNonFinite {
            log::warn!(
                "param group '{}': non-finite gradient, step skipped",
                self.name
            );
        }
        outcome
    }

    pub fn steps(&self) -> u64 {
        self.state.step
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters_and_counts_the_step() {
        let mut g = ParamGroup::new("x", vec![1.0, -2.0], 0.1);
        assert_eq!(g.step(&[0.0, 0.0]), StepOutcome::Applied);
        assert_eq!(g.params, vec![1.0, -2.0]);
        assert_eq!(g.steps(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate_against_the_sign() {
        let mut g = ParamGroup::new("x", vec![0.0; 4], 0.01);
        g.step(&[3.0, -0.2, 1e-3, -50.0]);
        let expect = [-0.01, 0.01, -0.01, 0.01];
        for (p, e) in g.params.iter().zip(expect) {
            assert!((p - e).abs() < 1e-4 * 0.01, "{p} vs {e}");
        }
    }

    #[test]
    fn non_finite_gradient_is_skipped() {
        let mut g = ParamGroup::new("x", vec![1.0, 1.0], 0.1);
        assert_eq!(g.step(&[f64::NAN, 1.0]), StepOutcome::SkippedNonFinite);
        assert_eq!(g.params, vec![1.0, 1.0]);
        assert_eq!(g.steps(), 0);
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut g = ParamGroup::new("x", vec![0.5, -0.25, 2.0], 0.03);
            for k in 0..50 {
                let grads: Vec<f64> = g
                    .params
                    .iter()
                    .map(|p| 2.0 * p + (k as f64).sin())
                    .collect();
                g.step(&grads);
            }
            g.params
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut g = ParamGroup::new("x", vec![3.0, -4.0], 0.1);
        for _ in 0..500 {
            let grads: Vec<f64> = g.params.iter().map(|p| 2.0 * (p - 1.0)).collect();
            g.step(&grads);
        }
        assert!(g.params.iter().all(|p| (p - 1.0).abs() < 1e-2));
    }
}
