use serde::{Deserialize, Serialize};

use crate::constants::JumpBound;
use crate::error::{Error, Result};

/// Choice of the deterministic driving clock `B`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BSpec {
    /// `B(t) = t`, continuous; the usual Ito setting.
    Ito,
    /// Piecewise-constant `B` given by its values at the grid points; each
    /// increment is a jump of the clock.
    Steps(Vec<f64>),
}

/// Input to [`Clock::build`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClockSpec {
    /// Strictly increasing grid `t_0 = 0 < ... < t_N = T`.
    pub times: Vec<f64>,
    pub b: BSpec,
    /// Per-interval weight values `alpha_i > 0` (length `N`).
    pub alpha: Vec<f64>,
}

impl ClockSpec {
    /// Uniform Ito grid on `[0, horizon]` with `alpha = 1`.
    pub fn ito_uniform(horizon: f64, n_steps: usize) -> Self {
        let times = (0..=n_steps)
            .map(|i| horizon * i as f64 / n_steps as f64)
            .collect();
        ClockSpec {
            times,
            b: BSpec::Ito,
            alpha: vec![1.0; n_steps],
        }
    }
}

/// Deterministic time grid with the clock `A = int alpha^2 dB` computed by
/// the left rule, and the resulting jump bound `frak_f`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clock {
    times: Vec<f64>,
    b: Vec<f64>,
    alpha: Vec<f64>,
    a: Vec<f64>,
    frak_f: f64,
    ito: bool,
}

impl Clock {
    pub fn build(spec: &ClockSpec) -> Result<Self> {
        let n = spec.times.len();
        if n < 2 {
            return Err(Error::Invalid("grid needs at least two points".into()));
        }
        if spec.times[0] != 0.0 {
            return Err(Error::Invalid("grid must start at 0".into()));
        }
        if spec.times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Invalid("grid must be strictly increasing".into()));
        }
        if spec.alpha.len() != n - 1 {
            return Err(Error::Invalid(format!(
                "alpha must have one value per interval ({} expected, got {})",
                n - 1,
                spec.alpha.len()
            )));
        }
        if spec.alpha.iter().any(|&a| !(a > 0.0)) {
            return Err(Error::Invalid("alpha values must be positive".into()));
        }
        let (b, ito) = match &spec.b {
            BSpec::Ito => (spec.times.clone(), true),
            BSpec::Steps(values) => {
                if values.len() != n {
                    return Err(Error::Invalid(
                        "step clock needs one B value per grid point".into(),
                    ));
                }
                if values.windows(2).any(|w| w[1] < w[0]) {
                    return Err(Error::Invalid("B must be nondecreasing".into()));
                }
                (values.clone(), false)
            }
        };
        let mut a = vec![0.0; n];
        let mut frak_f = 0.0f64;
        for i in 0..n - 1 {
            let db = b[i + 1] - b[i];
            let da = spec.alpha[i] * spec.alpha[i] * db;
            a[i + 1] = a[i] + da;
            if !ito && db > 0.0 {
                frak_f = frak_f.max(da);
            }
        }
        Ok(Clock {
            times: spec.times.clone(),
            b,
            alpha: spec.alpha.clone(),
            a,
            frak_f,
            ito,
        })
    }

    pub fn ito_uniform(horizon: f64, n_steps: usize) -> Self {
        Clock::build(&ClockSpec::ito_uniform(horizon, n_steps)).expect("valid uniform spec")
    }

    pub fn n_steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn time(&self, i: usize) -> f64 {
        self.times[i]
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn dt(&self, i: usize) -> f64 {
        self.times[i + 1] - self.times[i]
    }

    pub fn db(&self, i: usize) -> f64 {
        self.b[i + 1] - self.b[i]
    }

    pub fn b_values(&self) -> &[f64] {
        &self.b
    }

    pub fn a_values(&self) -> &[f64] {
        &self.a
    }

    pub fn a(&self, i: usize) -> f64 {
        self.a[i]
    }

    pub fn da(&self, i: usize) -> f64 {
        self.a[i + 1] - self.a[i]
    }

    pub fn alpha(&self, i: usize) -> f64 {
        self.alpha[i]
    }

    pub fn frak_f(&self) -> JumpBound {
        JumpBound::new(self.frak_f).expect("clock jump bound is nonnegative")
    }

    pub fn is_ito(&self) -> bool {
        self.ito
    }
}
