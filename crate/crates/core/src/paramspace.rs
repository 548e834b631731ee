//! Tunable parameter spaces and the transform between user parameter values and
//! the unconstrained coordinates the optimizer works in.
//!
//! Log-scaled parameters are mapped with the natural log, linear ones with the
//! identity. Bounds are enforced only when decoding a [`SearchPoint`] back into a
//! [`Configuration`], so the optimizer itself stays unconstrained.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_SIGMA0: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    #[default]
    Log,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub init: f64,
    pub scale: Scale,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
}

impl ParamSpec {
    pub fn new(
        name: impl Into<String>,
        init: f64,
        scale: Scale,
        lower: Option<f64>,
        upper: Option<f64>,
    ) -> Result<Self> {
        let spec = ParamSpec {
            name: name.into(),
            init,
            scale,
            lower,
            upper,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn log(name: impl Into<String>, init: f64) -> Result<Self> {
        Self::new(name, init, Scale::Log, None, None)
    }

    pub fn linear(name: impl Into<String>, init: f64) -> Result<Self> {
        Self::new(name, init, Scale::Linear, None, None)
    }

    fn validate(&self) -> Result<()> {
        if !self.init.is_finite() {
            return Err(Error::parse(format!("{}.init", self.name), "must be finite"));
        }
        if self.scale == Scale::Log && self.init <= 0.0 {
            return Err(Error::Domain(format!(
                "parameter `{}` is log-scaled but init = {} is not positive",
                self.name, self.init
            )));
        }
        if let (Some(lo), Some(hi)) = (self.lower, self.upper) {
            if !(lo < hi) {
                return Err(Error::parse(
                    format!("{}.min", self.name),
                    format!("min {lo} must be below max {hi}"),
                ));
            }
        }
        if let Some(lo) = self.lower {
            if self.init < lo {
                return Err(Error::parse(
                    format!("{}.init", self.name),
                    format!("init {} below min {lo}", self.init),
                ));
            }
        }
        if let Some(hi) = self.upper {
            if self.init > hi {
                return Err(Error::parse(
                    format!("{}.init", self.name),
                    format!("init {} above max {hi}", self.init),
                ));
            }
        }
        Ok(())
    }

    fn encode(&self, value: f64) -> Result<f64> {
        match self.scale {
            Scale::Linear => Ok(value),
            Scale::Log if value > 0.0 => Ok(value.ln()),
            Scale::Log => Err(Error::Domain(format!(
                "parameter `{}` is log-scaled but value {value} is not positive",
                self.name
            ))),
        }
    }

    fn decode(&self, coord: f64) -> f64 {
        let mut value = match self.scale {
            Scale::Linear => coord,
            // keep strictly positive and finite whatever the coordinate
            Scale::Log => coord.exp().clamp(f64::MIN_POSITIVE, f64::MAX),
        };
        if value.is_nan() {
            value = self.init;
        }
        if let Some(lo) = self.lower {
            value = value.max(lo);
        }
        if let Some(hi) = self.upper {
            value = value.min(hi);
        }
        if self.scale == Scale::Linear {
            value = value.clamp(f64::MIN, f64::MAX);
        }
        value
    }
}

/// An ordered set of parameters plus the initial step size in transformed space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpace {
    params: Vec<ParamSpec>,
    sigma0: f64,
}

impl ParamSpace {
    pub fn new(params: Vec<ParamSpec>, sigma0: f64) -> Result<Self> {
        if params.is_empty() {
            return Err(Error::parse("params", "at least one parameter is required"));
        }
        if !(sigma0 > 0.0 && sigma0.is_finite()) {
            return Err(Error::parse("sigma", format!("must be positive, got {sigma0}")));
        }
        let mut seen = HashSet::new();
        for (i, p) in params.iter().enumerate() {
            if !seen.insert(p.name.as_str()) {
                return Err(Error::parse(
                    format!("params[{i}].name"),
                    format!("duplicate parameter name `{}`", p.name),
                ));
            }
            p.validate()?;
        }
        Ok(ParamSpace { params, sigma0 })
    }

    /// `d` linear parameters `x0..x{d-1}` initialised at the origin.
    pub fn linear_origin(dim: usize, sigma0: f64) -> Result<Self> {
        let params = (0..dim)
            .map(|i| ParamSpec::linear(format!("x{i}"), 0.0))
            .collect::<Result<Vec<_>>>()?;
        Self::new(params, sigma0)
    }

    pub fn params(&self) -> &[ParamSpec] {
        &self.params
    }

    pub fn dim(&self) -> usize {
        self.params.len()
    }

    pub fn sigma0(&self) -> f64 {
        self.sigma0
    }

    pub fn initial(&self) -> Configuration {
        Configuration(
            self.params
                .iter()
                .map(|p| (p.name.clone(), p.init))
                .collect(),
        )
    }

    pub fn to_search_space(&self, cfg: &Configuration) -> Result<SearchPoint> {
        if cfg.0.len() != self.params.len() {
            return Err(Error::Argument(format!(
                "configuration has {} values, space has {} parameters",
                cfg.0.len(),
                self.params.len()
            )));
        }
        self.params
            .iter()
            .map(|p| {
                let v = cfg.get(&p.name).ok_or_else(|| {
                    Error::Argument(format!("configuration is missing parameter `{}`", p.name))
                })?;
                p.encode(v)
            })
            .collect::<Result<Vec<_>>>()
            .map(SearchPoint)
    }

    /// Decodes a point, clamping into declared bounds. Total for any input of length `d`.
    pub fn from_search_space(&self, pt: &SearchPoint) -> Configuration {
        assert_eq!(pt.len(), self.dim(), "search point dimension mismatch");
        Configuration(
            self.params
                .iter()
                .zip(pt.coords())
                .map(|(p, &c)| (p.name.clone(), p.decode(c)))
                .collect(),
        )
    }

    pub fn initial_point(&self) -> SearchPoint {
        self.to_search_space(&self.initial())
            .expect("initial configuration is valid by construction")
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSpace {
    sigma: Option<f64>,
    params: Vec<RawParam>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawParam {
    name: String,
    init: f64,
    #[serde(default)]
    scale: Scale,
    min: Option<f64>,
    max: Option<f64>,
}

/// Parses a space file: `{"sigma": 0.5, "params": [{"name": "reg", "init": 10, "scale": "log"}]}`.
pub fn parse_space_file(text: &str) -> Result<ParamSpace> {
    let raw: RawSpace =
        serde_json::from_str(text).map_err(|e| Error::parse("space file", e.to_string()))?;
    let mut seen = HashSet::new();
    let mut params = Vec::with_capacity(raw.params.len());
    for (i, p) in raw.params.into_iter().enumerate() {
        if !seen.insert(p.name.clone()) {
            return Err(Error::parse(
                format!("params[{i}].name"),
                format!("duplicate parameter name `{}`", p.name),
            ));
        }
        params.push(ParamSpec::new(p.name, p.init, p.scale, p.min, p.max)?);
    }
    ParamSpace::new(params, raw.sigma.unwrap_or(DEFAULT_SIGMA0))
}

/// Parameter values in user units, keyed by name.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Configuration(BTreeMap<String, f64>);

impl Configuration {
    pub fn new(values: BTreeMap<String, f64>) -> Self {
        Configuration(values)
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.0.get(name).copied()
    }

    pub fn values(&self) -> &BTreeMap<String, f64> {
        &self.0
    }

    /// Values in the order of `space`'s parameters.
    pub fn ordered(&self, space: &ParamSpace) -> Vec<f64> {
        space
            .params()
            .iter()
            .map(|p| self.0.get(&p.name).copied().unwrap_or(f64::NAN))
            .collect()
    }

    /// Canonical full-precision key: `name=value` pairs sorted by name, values in
    /// shortest round-trip form.
    pub fn fingerprint(&self) -> String {
        let mut out = String::new();
        for (i, (k, v)) in self.0.iter().enumerate() {
            if i > 0 {
                out.push(';');
            }
            out.push_str(k);
            out.push('=');
            out.push_str(&format!("{v:?}"));
        }
        out
    }
}

impl FromIterator<(String, f64)> for Configuration {
    fn from_iter<I: IntoIterator<Item = (String, f64)>>(iter: I) -> Self {
        Configuration(iter.into_iter().collect())
    }
}

impl fmt::Display for Configuration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.fingerprint())
    }
}

/// Optimizer-facing image of a [`Configuration`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SearchPoint(Vec<f64>);

impl SearchPoint {
    pub fn new(coords: Vec<f64>) -> Self {
        SearchPoint(coords)
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}
