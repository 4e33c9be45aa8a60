//! JSON model descriptions: environment, vector fields, observable and the
//! optional invader / initial-condition blocks used by the experiment runner.

use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::env_chain::{EnvGenerator, EnvKind, StationaryDist};
use crate::error::{Error, Result};
use crate::flows::{FieldFn, JacobianFn, Region, VectorFieldSet};
use crate::lotka::LVCoefficients;
use crate::lyapunov::SwitchedLinearSystem;
use crate::observable::ObservableF;
use crate::pdmp_sim::ModulatedModel;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvSpec {
    Rates {
        rates: Vec<Vec<f64>>,
    },
    /// Q = [[−p, p], [q, −q]].
    TwoState {
        p: f64,
        q: f64,
    },
    Resample {
        pi: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RegionSpec {
    Box { lo: Vec<f64>, hi: Vec<f64> },
    Interval { lo: f64, hi: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FieldSpec {
    /// x' = A_s x.
    Linear {
        matrices: Vec<Vec<Vec<f64>>>,
        region: RegionSpec,
    },
    /// x' = b_s + A_s x.
    Affine {
        offsets: Vec<Vec<f64>>,
        matrices: Vec<Vec<Vec<f64>>>,
        region: RegionSpec,
    },
    /// x' = x(a10_s − a11_s x); region defaults to [p₀, p₁].
    Logistic {
        a10: Vec<f64>,
        a11: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        region: Option<RegionSpec>,
    },
    /// θ' = A_s θ − (1·A_s θ)θ on the simplex.
    Projective { matrices: Vec<Vec<Vec<f64>>> },
}

/// f(x, s) = c_s + b_s·x + xᵀM_s x.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservableSpec {
    pub c: Vec<f64>,
    pub b: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<Vec<Vec<Vec<f64>>>>,
}

/// Invader coefficients a₂₀ + a₂₁x for logistic residents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InvaderSpec {
    pub a20: Vec<f64>,
    pub a21: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub schema_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub env: EnvSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fields: Option<FieldSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observable: Option<ObservableSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub invader: Option<InvaderSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s0: Option<usize>,
}

fn matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if n == 0 || m == 0 || rows.iter().any(|r| r.len() != m) {
        return Err(Error::invalid(format!("{what}: ragged or empty matrix")));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(DMatrix::from_row_slice(n, m, &flat))
}

fn matrices(ms: &[Vec<Vec<f64>>], what: &str) -> Result<Vec<DMatrix<f64>>> {
    ms.iter().map(|m| matrix(m, what)).collect()
}

impl RegionSpec {
    fn build(&self) -> Region {
        match self {
            RegionSpec::Box { lo, hi } => Region::Box {
                lo: lo.clone(),
                hi: hi.clone(),
            },
            RegionSpec::Interval { lo, hi } => Region::Interval { lo: *lo, hi: *hi },
        }
    }
}

impl EnvSpec {
    pub fn build(&self) -> Result<EnvKind> {
        Ok(match self {
            EnvSpec::Rates { rates } => EnvKind::RateMatrix(EnvGenerator::from_rows(rates)?),
            EnvSpec::TwoState { p, q } => EnvKind::RateMatrix(EnvGenerator::two_state(*p, *q)?),
            EnvSpec::Resample { pi } => EnvKind::Resample(StationaryDist::new(pi.clone())?),
        })
    }
}

fn affine_fields(offsets: &[Vec<f64>], ms: Vec<DMatrix<f64>>, region: Region) -> Result<VectorFieldSet> {
    if offsets.len() != ms.len() {
        return Err(Error::invalid("affine fields need one offset per matrix"));
    }
    let d = ms[0].nrows();
    if ms.iter().any(|m| m.nrows() != d || m.ncols() != d) || offsets.iter().any(|b| b.len() != d) {
        return Err(Error::invalid("affine fields have inconsistent dimensions"));
    }
    let mut fields: Vec<FieldFn> = Vec::new();
    let mut jacs: Vec<JacobianFn> = Vec::new();
    for (b, m) in offsets.iter().zip(ms) {
        let b = DVector::from_column_slice(b);
        let mj = m.clone();
        fields.push(Arc::new(move |x: &DVector<f64>| &b + &m * x));
        jacs.push(Arc::new(move |_x: &DVector<f64>| mj.clone()));
    }
    VectorFieldSet::general_with_jacobians(d, fields, jacs, region)
}

impl FieldSpec {
    pub fn build(&self) -> Result<VectorFieldSet> {
        match self {
            FieldSpec::Linear { matrices: ms, region } => {
                VectorFieldSet::linear(matrices(ms, "fields")?, region.build())
            }
            FieldSpec::Affine {
                offsets,
                matrices: ms,
                region,
            } => affine_fields(offsets, matrices(ms, "fields")?, region.build()),
            FieldSpec::Logistic { a10, a11, region: None } => VectorFieldSet::logistic(a10.clone(), a11.clone()),
            FieldSpec::Logistic {
                a10,
                a11,
                region: Some(r),
            } => VectorFieldSet::logistic_on(a10.clone(), a11.clone(), r.build()),
            FieldSpec::Projective { matrices: ms } => VectorFieldSet::projective(matrices(ms, "fields")?),
        }
    }
}

impl ObservableSpec {
    pub fn build(&self) -> Result<ObservableF> {
        let b = self.b.iter().map(|v| DVector::from_column_slice(v)).collect();
        let m = self.m.as_ref().map(|ms| matrices(ms, "observable")).transpose()?;
        ObservableF::quadratic(self.c.clone(), b, m)
    }
}

impl ModelFile {
    pub fn parse(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text).map_err(|e| Error::invalid(format!("model file: {e}")))?;
        file.validate()?;
        Ok(file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::invalid(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model files serialize")
    }

    /// Schema and cross-block consistency; builds every present block once.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::invalid(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let env = self.env.build()?;
        if let Some(spec) = &self.fields {
            let fields = spec.build()?;
            ModulatedModel::new(fields.clone(), env.clone())?;
            if let Some(x0) = &self.x0 {
                if x0.len() != fields.dim() || !fields.region().contains(&DVector::from_column_slice(x0)) {
                    return Err(Error::invalid("x0 does not lie in the declared region"));
                }
            }
        }
        if let Some(s0) = self.s0 {
            if s0 >= env.n() {
                return Err(Error::invalid(format!("s0 = {s0} out of range")));
            }
        }
        if let Some(obs) = &self.observable {
            if obs.build()?.n_states() != env.n() {
                return Err(Error::invalid("observable has the wrong number of states"));
            }
        }
        if self.invader.is_some() {
            self.lv_coefficients()?;
        }
        Ok(())
    }

    pub fn env(&self) -> Result<EnvKind> {
        self.env.build()
    }

    fn field_spec(&self) -> Result<&FieldSpec> {
        self.fields
            .as_ref()
            .ok_or_else(|| Error::invalid("model file has no fields block"))
    }

    pub fn model(&self) -> Result<ModulatedModel> {
        ModulatedModel::new(self.field_spec()?.build()?, self.env()?)
    }

    /// The declared observable; projective models default to the growth
    /// observable 1·A(s)θ and logistic models with an invader to a₂₀ + a₂₁x.
    pub fn observable(&self) -> Result<ObservableF> {
        if let Some(obs) = &self.observable {
            return obs.build();
        }
        if self.invader.is_some() {
            return Ok(self.lv_coefficients()?.invasion_observable());
        }
        if let FieldSpec::Projective { .. } = self.field_spec()? {
            return Ok(self.switched_linear()?.growth_observable());
        }
        Err(Error::invalid("model file has no observable"))
    }

    pub fn projective_matrices(&self) -> Result<Vec<DMatrix<f64>>> {
        match self.field_spec()? {
            FieldSpec::Projective { matrices: ms } | FieldSpec::Linear { matrices: ms, .. } => matrices(ms, "fields"),
            _ => Err(Error::invalid("fields are not linear")),
        }
    }

    pub fn switched_linear(&self) -> Result<SwitchedLinearSystem> {
        SwitchedLinearSystem::new(self.projective_matrices()?, self.env()?)
    }

    pub fn lv_coefficients(&self) -> Result<LVCoefficients> {
        let (a10, a11) = match self.field_spec()? {
            FieldSpec::Logistic { a10, a11, .. } => (a10, a11),
            _ => return Err(Error::invalid("invader block needs logistic fields")),
        };
        let inv = self
            .invader
            .as_ref()
            .ok_or_else(|| Error::invalid("model file has no invader block"))?;
        LVCoefficients::new(a10.clone(), a11.clone(), inv.a20.clone(), inv.a21.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const FMC: &str = r#"{
        "schema_version": 1,
        "env": {"kind": "two_state", "p": 0.4, "q": 0.6},
        "fields": {"kind": "projective", "matrices": [
            [[-1, 0, 0], [10, -1, 0], [0, 0, -10]],
            [[-10, 0, 10], [0, -10, 0], [0, 10, -1]]
        ]}
    }"#;

    #[test]
    fn round_trip_is_identity() {
        let a = ModelFile::parse(FMC).unwrap();
        let b = ModelFile::parse(&a.to_json()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_json(), b.to_json());
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = FMC.replace("\"schema_version\": 1,", "\"schema_version\": 1, \"colour\": 3,");
        assert!(matches!(ModelFile::parse(&text), Err(Error::InvalidInput(_))));
        let text = FMC.replace("\"q\": 0.6", "\"q\": 0.6, \"r\": 1");
        assert!(ModelFile::parse(&text).is_err());
    }

    #[test]
    fn wrong_version_rejected() {
        assert!(ModelFile::parse(&FMC.replace("\"schema_version\": 1", "\"schema_version\": 2")).is_err());
    }

    #[test]
    fn reducible_env_reports_irreducibility() {
        let text = r#"{"schema_version": 1, "env": {"kind": "rates", "rates": [[-1, 1], [0, 0]]}}"#;
        assert!(matches!(ModelFile::parse(text), Err(Error::NotIrreducible { .. })));
    }

    #[test]
    fn defaults_to_growth_observable() {
        let m = ModelFile::parse(FMC).unwrap();
        let f = m.observable().unwrap();
        let th = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        assert_eq!(f.eval(&th, 0), 9.0);
    }

    #[test]
    fn affine_field_evaluates() {
        let text = r#"{
            "schema_version": 1,
            "env": {"kind": "two_state", "p": 1, "q": 2},
            "fields": {"kind": "affine", "offsets": [[0], [2]], "matrices": [[[-1]], [[-1]]],
                       "region": {"kind": "interval", "lo": -1, "hi": 3}},
            "x0": [0.5], "s0": 0
        }"#;
        let model = ModelFile::parse(text).unwrap().model().unwrap();
        let v = model.fields.eval(1, &DVector::from_element(1, 0.5));
        assert_eq!(v[0], 1.5);
    }
}
