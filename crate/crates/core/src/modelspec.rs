//! JSON model files.
//!
//! A model file is discriminated by "type": pairwise models carry named
//! built-in V and K plus a coupling matrix (dense or generated), quadratic
//! models carry a precision matrix, bayes models carry the regression data,
//! and "blackbox-builtin" wraps another spec and evaluates it opaquely
//! through the Monte Carlo code paths.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::SymMatrix;
use crate::models::{
    BayesLinReg, BlackBoxModel, CouplingMatrix, InteractionKernel, KernelSpec, Model,
    PairwiseGibbs, PotentialSpec, QuadraticModel, ScalarPotential,
};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CouplingSpec {
    Dense {
        dense: Vec<Vec<f64>>,
    },
    Cycle {
        cycle: usize,
    },
    Complete {
        complete: usize,
    },
    DRegular {
        dregular: DRegularSpec,
    },
    Block {
        block: BlockSpec,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DRegularSpec {
    pub n: usize,
    pub d: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockSpec {
    pub sizes: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
}

/// Top-level model file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum ModelSpec {
    #[serde(rename = "pairwise")]
    Pairwise {
        #[serde(rename = "V")]
        v: PotentialSpec,
        #[serde(rename = "K")]
        k: KernelSpec,
        #[serde(rename = "J")]
        j: CouplingSpec,
        /// Divide each row of J by its sum before use.
        #[serde(default)]
        row_normalize: bool,
        /// Multiply J by this factor after any row normalization.
        #[serde(default)]
        scale: Option<f64>,
    },
    #[serde(rename = "quadratic")]
    Quadratic {
        #[serde(rename = "A")]
        a: Vec<Vec<f64>>,
        #[serde(default)]
        b: Option<Vec<f64>>,
        #[serde(default)]
        c: Option<f64>,
    },
    #[serde(rename = "bayes")]
    Bayes {
        #[serde(rename = "X")]
        x: Vec<Vec<f64>>,
        y: Vec<f64>,
        sigma2: f64,
        prior: PotentialSpec,
    },
    #[serde(rename = "blackbox-builtin")]
    BlackBoxBuiltin {
        inner: Box<ModelSpec>,
        #[serde(default)]
        kappa: Option<f64>,
    },
}

/// Where a model is used; control objectives only need plain concavity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelRole {
    Gibbs,
    ControlObjective,
}

pub fn build_coupling(spec: &CouplingSpec, row_normalize: bool, scale: Option<f64>) -> Result<CouplingMatrix> {
    let base = match spec {
        CouplingSpec::Dense { dense } => CouplingMatrix::from_rows(dense)?,
        CouplingSpec::Cycle { cycle } => CouplingMatrix::cycle(*cycle)?,
        CouplingSpec::Complete { complete } => CouplingMatrix::complete(*complete)?,
        CouplingSpec::DRegular { dregular } => {
            CouplingMatrix::d_regular(dregular.n, dregular.d, dregular.seed)?
        }
        CouplingSpec::Block { block } => CouplingMatrix::block(&block.sizes, &block.weights)?,
    };
    let normalized = if row_normalize { base.row_normalized()? } else { base };
    match scale {
        Some(c) => normalized.scale(c),
        None => Ok(normalized),
    }
}

pub fn build_model(spec: &ModelSpec, role: ModelRole) -> Result<Model> {
    match spec {
        ModelSpec::Pairwise { v, k, j, row_normalize, scale } => {
            let v = ScalarPotential::from_spec(v)?;
            let k = InteractionKernel::from_spec(k);
            let j = build_coupling(j, *row_normalize, *scale)?;
            Ok(Model::Pairwise(PairwiseGibbs::new(v, k, j)?))
        }
        ModelSpec::Quadratic { a, b, c } => {
            let a = SymMatrix::from_rows(a)?;
            let n = a.n();
            let b = b.clone().unwrap_or_else(|| vec![0.0; n]);
            let c = c.unwrap_or(0.0);
            let q = match role {
                ModelRole::Gibbs => QuadraticModel::with_linear(a, b, c)?,
                ModelRole::ControlObjective => QuadraticModel::psd(a, b, c)?,
            };
            Ok(Model::Quadratic(q))
        }
        ModelSpec::Bayes { x, y, sigma2, prior } => {
            let prior = ScalarPotential::from_spec(prior)?;
            Ok(Model::Bayes(BayesLinReg::new(x.clone(), y.clone(), *sigma2, prior)?))
        }
        ModelSpec::BlackBoxBuiltin { inner, kappa } => {
            let inner_model = Arc::new(build_model(inner, role)?);
            let kappa = match kappa {
                Some(k) => *k,
                None => inner_model.kappa()?,
            };
            let dim = inner_model.dim();
            let f_model = inner_model.clone();
            let g_model = inner_model.clone();
            let c_model = inner_model.clone();
            let bb = BlackBoxModel::new(
                dim,
                Arc::new(move |x: &[f64]| f_model.eval_f(x).unwrap_or(f64::NAN)),
                Arc::new(move |x: &[f64], i: usize| g_model.partial_i(x, i).unwrap_or(f64::NAN)),
                Arc::new(move |x: &[f64], i: usize, j: usize| {
                    c_model.cross_ij(x, i, j).unwrap_or(f64::NAN)
                }),
                kappa,
            )?;
            Ok(Model::BlackBox(bb))
        }
    }
}

pub fn parse_model(json: &str, role: ModelRole) -> Result<Model> {
    let spec: ModelSpec =
        serde_json::from_str(json).map_err(|e| Error::InvalidSpec(e.to_string()))?;
    build_model(&spec, role)
}
