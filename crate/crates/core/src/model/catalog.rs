use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{Family, ParamHmm};
use crate::error::{Error, Result};

/// Reference models with known identifiability status.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CatalogModel {
    /// Two-state Bernoulli HMM, identifiable at its default point.
    M1,
    /// Two-state Bernoulli HMM with an exactly redundant parameter pair.
    M2,
    /// M1 at equal emission probabilities: observations carry no state information.
    #[serde(rename = "M3-point")]
    M3Point,
    /// Two-state HMM with unit-variance Gaussian emissions.
    M4,
}

impl CatalogModel {
    pub const ALL: [CatalogModel; 4] = [
        CatalogModel::M1,
        CatalogModel::M2,
        CatalogModel::M3Point,
        CatalogModel::M4,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            CatalogModel::M1 => "M1",
            CatalogModel::M2 => "M2",
            CatalogModel::M3Point => "M3-point",
            CatalogModel::M4 => "M4",
        }
    }

    pub fn family(&self) -> Family {
        match self {
            CatalogModel::M1 | CatalogModel::M3Point => Family::Bernoulli2,
            CatalogModel::M2 => Family::RedundantBernoulli2,
            CatalogModel::M4 => Family::Gaussian2,
        }
    }

    pub fn default_theta(&self) -> Vec<f64> {
        match self {
            CatalogModel::M1 => vec![0.3, 0.4, 0.2, 0.8],
            CatalogModel::M2 => vec![0.3, 0.4, 0.1, 0.1],
            CatalogModel::M3Point => vec![0.3, 0.4, 0.5, 0.5],
            CatalogModel::M4 => vec![0.3, 0.4, -1.0, 1.0],
        }
    }

    /// Declared identifiability status (A3 is not checked algorithmically).
    pub fn identifiability(&self) -> &'static str {
        match self {
            CatalogModel::M1 => {
                "identifiable on a box around the default point excluding the label swap"
            }
            CatalogModel::M2 => "not identifiable: likelihood depends on t1 + t2 only",
            CatalogModel::M3Point => {
                "not identifiable: with e1 = e2 the observation law does not depend on (a, b)"
            }
            CatalogModel::M4 => {
                "identifiable on a box around the default point excluding the label swap"
            }
        }
    }
}

impl fmt::Display for CatalogModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CatalogModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "M1" => Ok(CatalogModel::M1),
            "M2" => Ok(CatalogModel::M2),
            "M3-point" | "M3" => Ok(CatalogModel::M3Point),
            "M4" => Ok(CatalogModel::M4),
            other => Err(Error::UnknownModel(other.to_string())),
        }
    }
}

/// Builds a catalog model at `theta` (or its default point).
///
/// The returned model's derivative callbacks are the analytic ones of its
/// family.
pub fn build_catalog_model(name: &str, theta: Option<&[f64]>) -> Result<ParamHmm> {
    let entry: CatalogModel = name.parse()?;
    let theta = theta.map(<[f64]>::to_vec).unwrap_or_else(|| entry.default_theta());
    if entry == CatalogModel::M3Point && theta.len() == 4 && theta[2] != theta[3] {
        return Err(Error::Inadmissible {
            param: "e2".into(),
            value: theta[3],
            reason: "M3-point requires e1 = e2".into(),
        });
    }
    ParamHmm::new(entry.name(), entry.family(), theta)
}

impl CatalogModel {
    /// Like [`build_catalog_model`] but accepts the closed parameter region.
    pub fn build_closed(&self, theta: Option<&[f64]>) -> Result<ParamHmm> {
        let theta = theta.map(<[f64]>::to_vec).unwrap_or_else(|| self.default_theta());
        ParamHmm::new_closed(self.name(), self.family(), theta)
    }
}
