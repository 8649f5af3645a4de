//! Declarative run configuration (TOML).
//!
//! Everything the CLI can do is drivable from one config file; flags
//! override fields. Parsing is strict (unknown keys rejected) and numeric
//! domains are validated when the config is lowered into domain types.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use hypotube::bounds::BoundConstants;
use hypotube::models::{instantiate_model, ModelSpec};
use hypotube::skeleton::{Control, RegularityEnvelope, TimeFn};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: Option<ModelConfig>,
    /// Horizon T of simulations and bounds.
    pub horizon: Option<f64>,
    pub radius: Option<RadiusConfig>,
    pub envelope: Option<EnvelopeConfig>,
    pub control: Option<ControlConfig>,
    pub constants: Option<ConstantsConfig>,
    pub mc: Option<McConfig>,
    pub out_dir: Option<String>,
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    #[serde(default)]
    pub params: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields)]
pub struct RadiusConfig {
    /// Constant radius, or a piecewise-constant table.
    pub value: Option<f64>,
    pub times: Option<Vec<f64>>,
    pub values: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields)]
pub struct EnvelopeConfig {
    pub mu: Option<f64>,
    pub h: Option<f64>,
    pub n_t: Option<f64>,
    pub lambda_t: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ControlConfig {
    /// Piecewise-constant rows (uniform grid over [0, T]), d entries each.
    pub rows: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields)]
pub struct ConstantsConfig {
    pub k: Option<f64>,
    pub q: Option<f64>,
    pub k_star: Option<f64>,
    pub q_star: Option<f64>,
    pub k1: Option<f64>,
    pub q1: Option<f64>,
    pub k2: Option<f64>,
    pub q2: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields)]
pub struct McConfig {
    pub paths: Option<usize>,
    pub steps: Option<usize>,
    pub seed: Option<u64>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).context("config parse error")?;
        cfg.validate()?;
        Ok(cfg)
    }

    #[allow(dead_code)] // exercised by the round-trip test
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialization cannot fail")
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(t) = self.horizon {
            if !(t > 0.0 && t.is_finite()) {
                bail!("horizon must be positive, got {t}");
            }
        }
        if let Some(r) = &self.radius {
            for v in r.value.iter().chain(r.values.iter().flatten()) {
                if !(*v > 0.0 && *v <= 1.0) {
                    bail!("radius values must lie in (0,1], got {v}");
                }
            }
            if r.times.is_some() != r.values.is_some() {
                bail!("radius table needs both times and values");
            }
        }
        if let Some(e) = &self.envelope {
            if let Some(mu) = e.mu {
                if mu < 1.0 {
                    bail!("envelope mu must be >= 1, got {mu}");
                }
            }
            if let Some(h) = e.h {
                if !(h > 0.0 && h <= 1.0) {
                    bail!("envelope h must lie in (0,1], got {h}");
                }
            }
            if let Some(n) = e.n_t {
                if n < 1.0 {
                    bail!("envelope n_t must be >= 1, got {n}");
                }
            }
            if let Some(l) = e.lambda_t {
                if !(l > 0.0 && l <= 1.0) {
                    bail!("envelope lambda_t must lie in (0,1], got {l}");
                }
            }
        }
        if let Some(mc) = &self.mc {
            if let Some(p) = mc.paths {
                if p < 100 {
                    bail!("mc.paths must be >= 100, got {p}");
                }
            }
            if let Some(s) = mc.steps {
                if s < 1 {
                    bail!("mc.steps must be >= 1");
                }
            }
        }
        Ok(())
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        let m = self
            .model
            .as_ref()
            .ok_or_else(|| anyhow::anyhow!("no model configured (use --model or [model])"))?;
        Ok(instantiate_model(&m.name, &m.params)?)
    }

    pub fn radius_fn(&self, default: f64) -> Result<TimeFn> {
        match &self.radius {
            None => Ok(TimeFn::constant(default)),
            Some(RadiusConfig { value: Some(v), .. }) => Ok(TimeFn::constant(*v)),
            Some(RadiusConfig {
                times: Some(ts),
                values: Some(vs),
                ..
            }) => Ok(TimeFn::table(ts.clone(), vs.clone())?),
            Some(_) => Ok(TimeFn::constant(default)),
        }
    }

    /// Envelope: explicit config wins, otherwise the model default.
    pub fn envelope_for(&self, spec: &ModelSpec) -> Result<RegularityEnvelope> {
        let base = &spec.envelope;
        let e = match &self.envelope {
            None => return Ok(base.clone()),
            Some(e) => e,
        };
        Ok(RegularityEnvelope::new(
            e.mu.unwrap_or(base.mu),
            e.h.unwrap_or(base.h),
            e.n_t.map(TimeFn::constant).unwrap_or_else(|| base.n_t.clone()),
            e.lambda_t
                .map(TimeFn::constant)
                .unwrap_or_else(|| base.lambda_t.clone()),
        )?)
    }

    pub fn control_for(&self, d: usize, horizon: f64) -> Result<Control> {
        match &self.control {
            None => Ok(Control::zero(d, horizon)),
            Some(c) => Ok(Control::piecewise(d, horizon, &c.rows)?),
        }
    }

    pub fn bound_constants(&self) -> Result<BoundConstants> {
        let mut out = BoundConstants::default();
        if let Some(c) = &self.constants {
            if let Some(v) = c.k {
                out.k = v;
            }
            if let Some(v) = c.q {
                out.q = v;
            }
            if let Some(v) = c.k_star {
                out.k_star = v;
            }
            if let Some(v) = c.q_star {
                out.q_star = v;
            }
            if let Some(v) = c.k1 {
                out.k1 = v;
            }
            if let Some(v) = c.q1 {
                out.q1 = v;
            }
            if let Some(v) = c.k2 {
                out.k2 = v;
            }
            if let Some(v) = c.q2 {
                out.q2 = v;
            }
        }
        out.validate()?;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
horizon = 1.0
out_dir = "out"

[model]
name = "grushin"

[radius]
value = 0.1

[envelope]
mu = 1.0
h = 1.0

[mc]
paths = 10000
steps = 1000
seed = 7
"#;

    #[test]
    fn round_trip_is_lossless() {
        let cfg = RunConfig::parse(SAMPLE).unwrap();
        let text = cfg.to_toml();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn domains_validated() {
        assert!(RunConfig::parse("horizon = -2.0").is_err());
        assert!(RunConfig::parse("[radius]\nvalue = 1.5").is_err());
        assert!(RunConfig::parse("[envelope]\nmu = 0.5").is_err());
        assert!(RunConfig::parse("[mc]\npaths = 10").is_err());
        assert!(RunConfig::parse("nonsense_key = 1").is_err());
    }

    #[test]
    fn dsl_model_through_config() {
        let text = r#"
[model]
name = "dsl"
[model.params]
n = "1"
d = "1"
sigma_1_1 = "1"
"#;
        let cfg = RunConfig::parse(text).unwrap();
        let spec = cfg.model_spec().unwrap();
        assert_eq!(spec.fields.dim_state(), 1);
    }
}
