//! Global/local weight partitions.
//!
//! A [`Partition`] marks every coordinate of a [`WeightVector`] as global
//! (shared with the server) or local (reconstructed on the device and never
//! transmitted). Masks are layer-granular: a layer's weights and biases always
//! share a flag.
//!
//! Two index spaces appear throughout the crate. *Full* indices address the
//! whole weight vector; *global* indices address the dense vector of global
//! coordinates in layout order, which is what travels on the wire.

use std::fmt;
use std::str::FromStr;

use crate::nn::{NetworkSpec, WeightVector};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum PartitionPolicy {
    AllGlobal,
    LastLayerLocal,
    LocalLayers(Vec<usize>),
}

impl fmt::Display for PartitionPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::AllGlobal => f.write_str("all_global"),
            Self::LastLayerLocal => f.write_str("last_layer_local"),
            Self::LocalLayers(layers) => {
                let list: Vec<String> = layers.iter().map(|l| l.to_string()).collect();
                write!(f, "local_layers=[{}]", list.join(","))
            }
        }
    }
}

impl FromStr for PartitionPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "all_global" => return Ok(Self::AllGlobal),
            "last_layer_local" => return Ok(Self::LastLayerLocal),
            _ => {}
        }
        let list = s
            .strip_prefix("local_layers=")
            .and_then(|rest| rest.trim().strip_prefix('['))
            .and_then(|rest| rest.strip_suffix(']'))
            .ok_or_else(|| {
                Error::Partition(format!(
                    "unknown policy {s:?}; expected all_global, last_layer_local or local_layers=[i,j,...]"
                ))
            })?;
        let mut layers = Vec::new();
        for item in list.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            let idx = item
                .parse::<usize>()
                .map_err(|_| Error::Partition(format!("bad layer index {item:?} in {s:?}")))?;
            layers.push(idx);
        }
        layers.sort_unstable();
        layers.dedup();
        Ok(Self::LocalLayers(layers))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    policy: PartitionPolicy,
    global_mask: Vec<bool>,
    local_mask: Vec<bool>,
    global_indices: Vec<usize>,
    local_indices: Vec<usize>,
}

impl Partition {
    pub fn new(spec: &NetworkSpec, policy: PartitionPolicy) -> Result<Self> {
        let n_layers = spec.layers().len();
        let local_layers: Vec<usize> = match &policy {
            PartitionPolicy::AllGlobal => vec![],
            PartitionPolicy::LastLayerLocal => vec![n_layers - 1],
            PartitionPolicy::LocalLayers(layers) => {
                if let Some(&bad) = layers.iter().find(|&&l| l >= n_layers) {
                    return Err(Error::Partition(format!(
                        "layer {bad} does not exist (network has {n_layers} layers)"
                    )));
                }
                layers.clone()
            }
        };
        let mut global_mask = vec![true; spec.param_count()];
        for &layer in &local_layers {
            for flag in &mut global_mask[spec.layer_range(layer)] {
                *flag = false;
            }
        }
        let local_mask: Vec<bool> = global_mask.iter().map(|g| !g).collect();
        let global_indices = (0..global_mask.len()).filter(|&i| global_mask[i]).collect();
        let local_indices = (0..global_mask.len()).filter(|&i| local_mask[i]).collect();
        Ok(Self {
            policy,
            global_mask,
            local_mask,
            global_indices,
            local_indices,
        })
    }

    pub fn all_global(spec: &NetworkSpec) -> Self {
        Self::new(spec, PartitionPolicy::AllGlobal).expect("always valid")
    }

    pub fn policy(&self) -> &PartitionPolicy {
        &self.policy
    }

    pub fn param_count(&self) -> usize {
        self.global_mask.len()
    }

    pub fn global_count(&self) -> usize {
        self.global_indices.len()
    }

    pub fn local_count(&self) -> usize {
        self.local_indices.len()
    }

    /// `true` where the coordinate is global.
    pub fn global_mask(&self) -> &[bool] {
        &self.global_mask
    }

    /// `true` where the coordinate is local.
    pub fn local_mask(&self) -> &[bool] {
        &self.local_mask
    }

    /// Full-vector index of each global coordinate, in global-index order.
    pub fn global_indices(&self) -> &[usize] {
        &self.global_indices
    }

    pub fn local_indices(&self) -> &[usize] {
        &self.local_indices
    }

    fn check(&self, w: &WeightVector) -> Result<()> {
        if w.len() != self.param_count() {
            return Err(Error::Dimension {
                what: "weight vector",
                expected: self.param_count(),
                actual: w.len(),
            });
        }
        Ok(())
    }

    /// Dense global values in global-index order.
    pub fn gather_global(&self, w: &WeightVector) -> Result<Vec<f32>> {
        self.check(w)?;
        Ok(self.global_indices.iter().map(|&i| w.values()[i]).collect())
    }

    pub fn gather_local(&self, w: &WeightVector) -> Result<Vec<f32>> {
        self.check(w)?;
        Ok(self.local_indices.iter().map(|&i| w.values()[i]).collect())
    }

    /// Overwrites the global coordinates of `w` with `values`.
    pub fn scatter_global(&self, w: &mut WeightVector, values: &[f32]) -> Result<()> {
        self.check(w)?;
        scatter(w, &self.global_indices, values, "global values")
    }

    pub fn scatter_local(&self, w: &mut WeightVector, values: &[f32]) -> Result<()> {
        self.check(w)?;
        scatter(w, &self.local_indices, values, "local values")
    }
}

fn scatter(w: &mut WeightVector, indices: &[usize], values: &[f32], what: &'static str) -> Result<()> {
    if values.len() != indices.len() {
        return Err(Error::Dimension {
            what,
            expected: indices.len(),
            actual: values.len(),
        });
    }
    let dst = w.values_mut();
    for (&i, &v) in indices.iter().zip(values) {
        dst[i] = v;
    }
    Ok(())
}

/// `(full index, value)` pairs.
pub type IndexedValues = Vec<(usize, f32)>;

/// Splits `w` into its global and local coordinates, each in layout order.
pub fn split(w: &WeightVector, p: &Partition) -> Result<(IndexedValues, IndexedValues)> {
    p.check(w)?;
    let v = w.values();
    let global = p.global_indices.iter().map(|&i| (i, v[i])).collect();
    let local = p.local_indices.iter().map(|&i| (i, v[i])).collect();
    Ok((global, local))
}

/// Inverse of [`split`]. Order of the input pairs does not matter, but every
/// coordinate must be supplied exactly once and on the correct side.
pub fn merge(global: &[(usize, f32)], local: &[(usize, f32)], p: &Partition) -> Result<WeightVector> {
    let n = p.param_count();
    let mut values = vec![0.0f32; n];
    let mut seen = vec![false; n];
    for (part, want_global) in [(global, true), (local, false)] {
        for &(i, v) in part {
            if i >= n {
                return Err(Error::Partition(format!("index {i} out of range for {n} parameters")));
            }
            if p.global_mask[i] != want_global {
                let side = if want_global { "global" } else { "local" };
                return Err(Error::Partition(format!("index {i} does not belong to the {side} part")));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::Partition(format!("index {i} supplied twice")));
            }
            values[i] = v;
        }
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::Partition(format!("index {missing} missing")));
    }
    Ok(WeightVector::new(values))
}
