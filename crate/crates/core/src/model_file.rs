//! Model persistence. A model file is a flat JSON document holding the
//! coefficient map architecture, the model orders it was trained for, and
//! the flattened parameters. Serialization uses the shortest round-tripping
//! decimal form, so write/read/write is byte stable.

use serde::{Deserialize, Serialize};

use nalgebra::{DMatrix, DVector};

use crate::coeffs::{Activation, CoefficientBasisMap, CoefficientMap, SchedulingNet};
use crate::delta::ModelOrders;
use crate::error::{Error, Result};

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrdersRecord {
    pub n_a: usize,
    pub n_b: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelRecord {
    pub format_version: u32,
    /// "scheduling_net" or "polynomial_basis".
    pub kind: String,
    pub orders: OrdersRecord,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layer_sizes: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub activation: Option<Activation>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub degrees: Option<Vec<usize>>,
    pub params: Vec<f64>,
}

/// Either coefficient map architecture behind one type, so readers do not
/// need to know in advance what a file contains.
#[derive(Debug, Clone)]
pub enum AnyCoefficientMap {
    Net(SchedulingNet),
    Basis(CoefficientBasisMap),
}

impl CoefficientMap for AnyCoefficientMap {
    fn scheduling_dim(&self) -> usize {
        match self {
            AnyCoefficientMap::Net(m) => m.scheduling_dim(),
            AnyCoefficientMap::Basis(m) => m.scheduling_dim(),
        }
    }

    fn output_width(&self) -> usize {
        match self {
            AnyCoefficientMap::Net(m) => m.output_width(),
            AnyCoefficientMap::Basis(m) => m.output_width(),
        }
    }

    fn param_count(&self) -> usize {
        match self {
            AnyCoefficientMap::Net(m) => m.param_count(),
            AnyCoefficientMap::Basis(m) => m.param_count(),
        }
    }

    fn params(&self) -> DVector<f64> {
        match self {
            AnyCoefficientMap::Net(m) => m.params(),
            AnyCoefficientMap::Basis(m) => m.params(),
        }
    }

    fn set_params(&mut self, values: &DVector<f64>) -> Result<()> {
        match self {
            AnyCoefficientMap::Net(m) => m.set_params(values),
            AnyCoefficientMap::Basis(m) => m.set_params(values),
        }
    }

    fn eval(&self, rho: &[f64]) -> Result<DVector<f64>> {
        match self {
            AnyCoefficientMap::Net(m) => m.eval(rho),
            AnyCoefficientMap::Basis(m) => m.eval(rho),
        }
    }

    fn eval_with_param_jacobian(&self, rho: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
        match self {
            AnyCoefficientMap::Net(m) => m.eval_with_param_jacobian(rho),
            AnyCoefficientMap::Basis(m) => m.eval_with_param_jacobian(rho),
        }
    }
}

pub fn model_to_record(map: &AnyCoefficientMap, orders: ModelOrders) -> Result<ModelRecord> {
    if map.output_width() != orders.coefficient_width() {
        return Err(Error::DimensionMismatch(format!(
            "map produces {} coefficients but the orders need {}",
            map.output_width(),
            orders.coefficient_width()
        )));
    }
    let params = map.params().iter().copied().collect();
    let orders_rec = OrdersRecord {
        n_a: orders.n_a(),
        n_b: orders.n_b(),
    };
    Ok(match map {
        AnyCoefficientMap::Net(net) => ModelRecord {
            format_version: MODEL_FORMAT_VERSION,
            kind: "scheduling_net".into(),
            orders: orders_rec,
            layer_sizes: Some(net.layer_sizes().to_vec()),
            activation: Some(net.activation()),
            degrees: None,
            params,
        },
        AnyCoefficientMap::Basis(basis) => ModelRecord {
            format_version: MODEL_FORMAT_VERSION,
            kind: "polynomial_basis".into(),
            orders: orders_rec,
            layer_sizes: None,
            activation: None,
            degrees: Some(basis.degrees().to_vec()),
            params,
        },
    })
}

pub fn record_to_model(record: &ModelRecord) -> Result<(AnyCoefficientMap, ModelOrders)> {
    if record.format_version != MODEL_FORMAT_VERSION {
        return Err(Error::InvalidInput(format!(
            "unsupported model format version {}",
            record.format_version
        )));
    }
    let orders = ModelOrders::new(record.orders.n_a, record.orders.n_b)?;
    let mut map = match record.kind.as_str() {
        "scheduling_net" => {
            let sizes = record.layer_sizes.as_ref().ok_or_else(|| {
                Error::InvalidInput("scheduling_net model needs layer_sizes".into())
            })?;
            let activation = record.activation.ok_or_else(|| {
                Error::InvalidInput("scheduling_net model needs an activation".into())
            })?;
            AnyCoefficientMap::Net(SchedulingNet::zeros(sizes, activation)?)
        }
        "polynomial_basis" => {
            let degrees = record.degrees.as_ref().ok_or_else(|| {
                Error::InvalidInput("polynomial_basis model needs degrees".into())
            })?;
            AnyCoefficientMap::Basis(CoefficientBasisMap::new(degrees.clone())?)
        }
        other => {
            return Err(Error::InvalidInput(format!("unknown model kind {other:?}")));
        }
    };
    if map.output_width() != orders.coefficient_width() {
        return Err(Error::DimensionMismatch(format!(
            "model produces {} coefficients but its orders need {}",
            map.output_width(),
            orders.coefficient_width()
        )));
    }
    if record.params.len() != map.param_count() {
        return Err(Error::DimensionMismatch(format!(
            "model file carries {} parameters, architecture has {}",
            record.params.len(),
            map.param_count()
        )));
    }
    map.set_params(&DVector::from_column_slice(&record.params))?;
    Ok((map, orders))
}

pub fn model_to_json(map: &AnyCoefficientMap, orders: ModelOrders) -> Result<String> {
    let record = model_to_record(map, orders)?;
    serde_json::to_string_pretty(&record)
        .map_err(|e| Error::InvalidInput(format!("model serialization: {e}")))
}

pub fn model_from_json(text: &str) -> Result<(AnyCoefficientMap, ModelOrders)> {
    let record: ModelRecord = serde_json::from_str(text)
        .map_err(|e| Error::InvalidInput(format!("model file: {e}")))?;
    record_to_model(&record)
}
