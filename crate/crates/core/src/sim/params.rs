use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Car-following exponent; fixed, never inferred.
pub const IDM_DELTA: f64 = 4.0;

/// Parameters of the deterministic IDM core.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdmParams {
    /// Desired speed (m/s).
    pub v0: f64,
    /// Jam distance (m).
    pub s0: f64,
    /// Desired time headway (s).
    pub t_headway: f64,
    /// Maximum acceleration (m/s²).
    pub a_max: f64,
    /// Comfortable deceleration (m/s²).
    pub b: f64,
    pub delta: f64,
}

impl IdmParams {
    pub fn new(v0: f64, s0: f64, t_headway: f64, a_max: f64, b: f64) -> Self {
        Self {
            v0,
            s0,
            t_headway,
            a_max,
            b,
            delta: IDM_DELTA,
        }
    }

    pub fn as_array(&self) -> [f64; 5] {
        [self.v0, self.s0, self.t_headway, self.a_max, self.b]
    }
}

/// Residual acceleration process.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualKind {
    IidGaussian,
    Matern52,
}

const NAMES_GAUSSIAN: [&str; 6] = ["v0", "s0", "T", "a_max", "b", "sigma"];
const NAMES_MATERN: [&str; 7] = ["v0", "s0", "T", "a_max", "b", "sigma", "ell"];

impl ResidualKind {
    /// Dimension of the full parameter vector.
    pub fn dim(self) -> usize {
        match self {
            Self::IidGaussian => 6,
            Self::Matern52 => 7,
        }
    }

    pub fn param_names(self) -> &'static [&'static str] {
        match self {
            Self::IidGaussian => &NAMES_GAUSSIAN,
            Self::Matern52 => &NAMES_MATERN,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::IidGaussian => "iid_gaussian",
            Self::Matern52 => "matern52",
        }
    }
}

impl std::str::FromStr for ResidualKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iid_gaussian" | "gaussian" => Ok(Self::IidGaussian),
            "matern52" | "matern" => Ok(Self::Matern52),
            other => Err(Error::Config(format!("unknown residual kind `{other}`"))),
        }
    }
}

impl std::fmt::Display for ResidualKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Full physical parameter vector `[v0, s0, T, a_max, b, sigma(, ell)]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub idm: IdmParams,
    /// Residual acceleration scale (m/s²).
    pub sigma: f64,
    /// Matérn length scale (s); absent for the i.i.d. variant.
    pub ell: Option<f64>,
}

impl ParamVector {
    pub fn kind(&self) -> ResidualKind {
        if self.ell.is_some() {
            ResidualKind::Matern52
        } else {
            ResidualKind::IidGaussian
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.idm.as_array().to_vec();
        v.push(self.sigma);
        if let Some(ell) = self.ell {
            v.push(ell);
        }
        v
    }

    pub fn from_slice(kind: ResidualKind, x: &[f64]) -> Result<Self> {
        if x.len() != kind.dim() {
            return Err(Error::Shape(format!(
                "{kind} parameter vector needs {} entries, got {}",
                kind.dim(),
                x.len()
            )));
        }
        Ok(Self {
            idm: IdmParams::new(x[0], x[1], x[2], x[3], x[4]),
            sigma: x[5],
            ell: (kind == ResidualKind::Matern52).then(|| x[6]),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.to_vec();
        if v.iter().all(|x| x.is_finite() && *x > 0.0) {
            Ok(())
        } else {
            Err(Error::Domain(format!("parameters must be positive and finite: {v:?}")))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vector_layout_round_trips() {
        let x = [30.0, 2.0, 1.5, 1.2, 1.8, 0.3, 2.5];
        let p = ParamVector::from_slice(ResidualKind::Matern52, &x).unwrap();
        assert_eq!(p.to_vec(), x.to_vec());
        assert_eq!(p.kind(), ResidualKind::Matern52);
        assert!(ParamVector::from_slice(ResidualKind::IidGaussian, &x).is_err());
        assert_eq!(p.idm.delta, 4.0);
    }
}
