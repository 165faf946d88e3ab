//! SGD and Adadelta with a round-keyed learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Params, Real};
use crate::schema::ParameterSchema;

/// Piecewise-constant learning-rate multipliers keyed by round. The
/// multiplier for round `r` comes from the entry with the largest start
/// round `<= r`, or `1.0` before the first entry.
///
/// In config files a schedule is either a list of `[round, multiplier]`
/// pairs or one of the preset names `"constant"` and `"step-decay"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleRepr", into = "Vec<(u64, f64)>")]
pub struct LrSchedule(Vec<(u64, f64)>);

#[derive(Deserialize)]
#[serde(untagged)]
enum ScheduleRepr {
    Preset(String),
    Steps(Vec<(u64, f64)>),
}

impl TryFrom<ScheduleRepr> for LrSchedule {
    type Error = String;
    fn try_from(r: ScheduleRepr) -> std::result::Result<Self, String> {
        match r {
            ScheduleRepr::Steps(steps) => {
                if steps.iter().any(|&(_, m)| !(m.is_finite() && m >= 0.0)) {
                    return Err("schedule multipliers must be finite and non-negative".into());
                }
                Ok(Self::new(steps))
            }
            ScheduleRepr::Preset(name) => match name.as_str() {
                "constant" => Ok(Self::constant()),
                "step-decay" => Ok(Self::step_decay()),
                other => Err(format!("unknown schedule preset `{other}`")),
            },
        }
    }
}

impl From<LrSchedule> for Vec<(u64, f64)> {
    fn from(s: LrSchedule) -> Self {
        s.0
    }
}

impl LrSchedule {
    pub fn new(mut steps: Vec<(u64, f64)>) -> Self {
        steps.sort_by_key(|&(r, _)| r);
        Self(steps)
    }

    pub fn constant() -> Self {
        Self(vec![(0, 1.0)])
    }

    /// `{(0, 1.0), (5, 0.1), (30, 0.01)}`.
    pub fn step_decay() -> Self {
        Self(vec![(0, 1.0), (5, 0.1), (30, 0.01)])
    }

    pub fn multiplier(&self, round: u64) -> f64 {
        self.0
            .iter()
            .take_while(|&&(r, _)| r <= round)
            .last()
            .map_or(1.0, |&(_, m)| m)
    }

    pub fn steps(&self) -> &[(u64, f64)] {
        &self.0
    }
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self::constant()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adadelta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    #[serde(default = "default_rho")]
    pub rho: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub schedule: LrSchedule,
}

fn default_rho() -> f64 {
    0.9
}

fn default_eps() -> f64 {
    1e-6
}

impl OptimizerConfig {
    pub fn sgd(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr,
            rho: default_rho(),
            eps: default_eps(),
            schedule: LrSchedule::constant(),
        }
    }

    pub fn adadelta(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Adadelta,
            ..Self::sgd(lr)
        }
    }

    pub fn with_schedule(mut self, schedule: LrSchedule) -> Self {
        self.schedule = schedule;
        self
    }
}

/// Per-client optimizer state; never transmitted.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState<T> {
    pub config: OptimizerConfig,
    layer_names: Vec<String>,
    /// Running average of squared gradients (Adadelta only).
    sq_grad: Option<Params<T>>,
    /// Running average of squared updates (Adadelta only).
    sq_delta: Option<Params<T>>,
}

impl<T: Real> OptState<T> {
    pub fn new(config: OptimizerConfig, schema: &ParameterSchema) -> Self {
        let (sq_grad, sq_delta) = match config.kind {
            OptimizerKind::Sgd => (None, None),
            OptimizerKind::Adadelta => (Some(Params::zeros(schema)), Some(Params::zeros(schema))),
        };
        Self {
            config,
            layer_names: schema.layers().iter().map(|l| l.name.clone()).collect(),
            sq_grad,
            sq_delta,
        }
    }

    /// One update of `params` in place.
    ///
    /// SGD: `p -= lr * mult(round) * g`.
    /// Adadelta: `Eg = rho Eg + (1-rho) g^2`,
    /// `d = sqrt(Edx + eps) / sqrt(Eg + eps) * g`,
    /// `Edx = rho Edx + (1-rho) d^2`, `p -= lr * mult(round) * d`.
    pub fn step(&mut self, params: &mut Params<T>, grad: &Params<T>, round: u64) -> Result<()> {
        params.ensure_compatible(grad.digest())?;
        for (l, g) in grad.layers().iter().enumerate() {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric {
                    layer: self.layer_names.get(l).cloned().unwrap_or_else(|| format!("#{l}")),
                });
            }
            if g.len() != params.layers()[l].len() {
                return Err(Error::Shape(format!("gradient layer {l} has the wrong length")));
            }
        }
        let lr = T::from_f64(self.config.lr * self.config.schedule.multiplier(round));
        match self.config.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.layers_mut().iter_mut().zip(grad.layers()) {
                    for (x, &gi) in p.iter_mut().zip(g) {
                        *x = *x - lr * gi;
                    }
                }
            }
            OptimizerKind::Adadelta => {
                let rho = T::from_f64(self.config.rho);
                let one_minus_rho = T::one() - rho;
                let eps = T::from_f64(self.config.eps);
                let sq_grad = self.sq_grad.as_mut().expect("adadelta state");
                let sq_delta = self.sq_delta.as_mut().expect("adadelta state");
                for l in 0..grad.layers().len() {
                    let g = &grad.layers()[l];
                    let eg = &mut sq_grad.layers_mut()[l];
                    let edx = &mut sq_delta.layers_mut()[l];
                    let p = &mut params.layers_mut()[l];
                    for k in 0..g.len() {
                        eg[k] = rho * eg[k] + one_minus_rho * g[k] * g[k];
                        let d = (edx[k] + eps).sqrt() / (eg[k] + eps).sqrt() * g[k];
                        edx[k] = rho * edx[k] + one_minus_rho * d * d;
                        p[k] = p[k] - lr * d;
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{build_schema, Gamma, LayerSpec};

    fn schema() -> ParameterSchema {
        build_schema(&[LayerSpec::new("b", &[1], true)], Gamma::ONE, 0).unwrap()
    }

    #[test]
    fn sgd_step() {
        let s = schema();
        let mut st = OptState::<f64>::new(OptimizerConfig::sgd(0.1), &s);
        let mut p = Params::from_layers(&s, vec![vec![1.0]]).unwrap();
        st.step(&mut p, &Params::from_layers(&s, vec![vec![2.0]]).unwrap(), 0)
            .unwrap();
        assert!((p.layers()[0][0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn schedule_lookup() {
        let s = LrSchedule::new(vec![(5, 0.1)]);
        assert_eq!(s.multiplier(4), 1.0);
        assert_eq!(s.multiplier(5), 0.1);
        let p = LrSchedule::step_decay();
        assert_eq!(p.multiplier(0), 1.0);
        assert_eq!(p.multiplier(29), 0.1);
        assert_eq!(p.multiplier(30), 0.01);
        assert_eq!(p.multiplier(1000), 0.01);
    }

    #[test]
    fn schedule_from_config() {
        #[derive(Deserialize)]
        struct W {
            s: LrSchedule,
        }
        let w: W = toml::from_str("s = \"step-decay\"").unwrap();
        assert_eq!(w.s, LrSchedule::step_decay());
        let w: W = toml::from_str("s = [[10, 0.5], [0, 1.0]]").unwrap();
        assert_eq!(w.s.steps(), &[(0, 1.0), (10, 0.5)]);
        assert!(toml::from_str::<W>("s = \"cosine\"").is_err());
    }

    #[test]
    fn adadelta_first_step() {
        let s = schema();
        for (round, mult) in [(0u64, 1.0f64), (5, 0.1)] {
            let cfg = OptimizerConfig::adadelta(1.0).with_schedule(LrSchedule::new(vec![(5, 0.1)]));
            let mut st = OptState::<f64>::new(cfg, &s);
            let mut p = Params::from_layers(&s, vec![vec![0.0]]).unwrap();
            st.step(&mut p, &Params::from_layers(&s, vec![vec![1.0]]).unwrap(), round)
                .unwrap();
            let expected = -(1e-6f64 / (0.1 + 1e-6)).sqrt() * mult;
            assert!(
                (p.layers()[0][0] - expected).abs() <= 1e-15,
                "{} vs {expected}",
                p.layers()[0][0]
            );
        }
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let s = schema();
        let mut st = OptState::<f32>::new(OptimizerConfig::adadelta(1.0), &s);
        let mut p = Params::zeros(&s);
        let g = Params::from_layers(&s, vec![vec![f32::NAN]]).unwrap();
        assert!(matches!(st.step(&mut p, &g, 0), Err(Error::Numeric { .. })));
    }
}
