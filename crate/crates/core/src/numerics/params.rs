//! Named parameter and gradient stores.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{NumericError, Tape, Tensor, Var};

pub const PARAMS_FORMAT: &str = "ctas-params";
pub const PARAMS_VERSION: u32 = 1;

/// Every trainable tensor, keyed by a stable name and iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamRecord {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

/// On-disk layout: a version tag followed by `{name, shape, values}` records
/// in name order. `f64` values are written in shortest round-trip form, so a
/// save/load cycle is bit-exact.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamFile {
    format: String,
    version: u32,
    params: Vec<ParamRecord>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new parameter; duplicate names are rejected.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<(), NumericError> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(NumericError::Contract(format!("duplicate parameter {name}")));
        }
        self.params.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor, NumericError> {
        self.params
            .get(name)
            .ok_or_else(|| NumericError::Contract(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar values.
    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn squared_norm(&self) -> f64 {
        self.params.values().map(Tensor::squared_norm).sum()
    }

    /// Records every parameter on `tape` and returns the handles by name.
    pub fn bind(&self, tape: &Tape) -> Result<BTreeMap<String, Var>, NumericError> {
        self.params
            .iter()
            .map(|(name, t)| Ok((name.clone(), tape.param(name, t)?)))
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_file()).expect("param serialization")
    }

    pub fn from_json(text: &str) -> Result<Self, NumericError> {
        let file: ParamFile =
            serde_json::from_str(text).map_err(|e| NumericError::Format(e.to_string()))?;
        Self::from_file(file)
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self.to_file()).expect("param serialization")
    }

    pub fn from_value(value: serde_json::Value) -> Result<Self, NumericError> {
        let file: ParamFile =
            serde_json::from_value(value).map_err(|e| NumericError::Format(e.to_string()))?;
        Self::from_file(file)
    }

    fn to_file(&self) -> ParamFile {
        ParamFile {
            format: PARAMS_FORMAT.into(),
            version: PARAMS_VERSION,
            params: self
                .params
                .iter()
                .map(|(name, t)| ParamRecord {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    values: t.values().to_vec(),
                })
                .collect(),
        }
    }

    fn from_file(file: ParamFile) -> Result<Self, NumericError> {
        if file.format != PARAMS_FORMAT || file.version != PARAMS_VERSION {
            return Err(NumericError::Format(format!(
                "unsupported parameter file {} v{}",
                file.format, file.version
            )));
        }
        let mut store = Self::new();
        for rec in file.params {
            store.insert(rec.name, Tensor::new(rec.shape, rec.values)?)?;
        }
        Ok(store)
    }
}

/// Accumulated gradients, one tensor per parameter.
///
/// Successive backward passes add into the same store until [`GradStore::zero`]
/// is called.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradStore {
    grads: BTreeMap<String, Tensor>,
}

impl GradStore {
    /// Zero gradients shaped like every parameter in `store`.
    pub fn zeros_like(store: &ParamStore) -> Self {
        let grads = store.iter().map(|(n, t)| (n.clone(), Tensor::zeros(t.shape()))).collect();
        Self { grads }
    }

    pub fn accumulate(&mut self, name: &str, g: &Tensor) -> Result<(), NumericError> {
        match self.grads.get_mut(name) {
            Some(slot) => slot.add_assign(g),
            None => {
                self.grads.insert(name.to_string(), g.clone());
                Ok(())
            }
        }
    }

    /// Adds all of `other` into `self`, in name order.
    pub fn merge(&mut self, other: &GradStore) -> Result<(), NumericError> {
        for (name, g) in &other.grads {
            self.accumulate(name, g)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.grads.values_mut() {
            g.values_mut().iter_mut().for_each(|v| *v *= c);
        }
    }

    pub fn zero(&mut self) {
        for g in self.grads.values_mut() {
            g.fill(0.0);
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.grads.iter()
    }

    pub fn all_finite(&self) -> bool {
        self.grads.values().all(Tensor::all_finite)
    }
}
