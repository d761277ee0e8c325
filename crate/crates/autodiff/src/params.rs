use std::collections::BTreeMap;
use std::sync::Arc;

use sha2::{Digest, Sha256};

use crate::{Error, Result, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Arc<Tensor>,
    pub frozen: bool,
}

/// Named parameters keyed by a unique path such as `mapper.layer0.wq`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet {
    entries: BTreeMap<String, Param>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, value: Tensor, frozen: bool) -> Result<()> {
        let path = path.into();
        if self.entries.contains_key(&path) {
            return Err(Error::Invalid(format!("duplicate parameter path `{path}`")));
        }
        self.entries.insert(path, Param { value: Arc::new(value), frozen });
        Ok(())
    }

    pub fn get(&self, path: &str) -> Result<&Param> {
        self.entries.get(path).ok_or_else(|| Error::MissingParam(path.to_string()))
    }

    pub fn tensor(&self, path: &str) -> Result<&Tensor> {
        Ok(&self.get(path)?.value)
    }

    pub fn contains(&self, path: &str) -> bool {
        self.entries.contains_key(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn paths(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar values.
    pub fn num_values(&self) -> usize {
        self.entries.values().map(|p| p.value.numel()).sum()
    }

    pub fn trainable_paths(&self) -> Vec<String> {
        self.entries.iter().filter(|(_, p)| !p.frozen).map(|(k, _)| k.clone()).collect()
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        for p in self.entries.values_mut() {
            p.frozen = frozen;
        }
    }

    /// Replaces the value at `path`. Frozen entries refuse the update.
    pub fn set(&mut self, path: &str, value: Tensor) -> Result<()> {
        let p = self.entries.get_mut(path).ok_or_else(|| Error::MissingParam(path.to_string()))?;
        if p.frozen {
            return Err(Error::Frozen(path.to_string()));
        }
        if p.value.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "`{path}` is {:?}, update is {:?}",
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = Arc::new(value);
        Ok(())
    }

    /// Merges `other` into `self`; paths must not collide.
    pub fn extend(&mut self, other: ParameterSet) -> Result<()> {
        for (k, p) in other.entries {
            if self.entries.contains_key(&k) {
                return Err(Error::Invalid(format!("duplicate parameter path `{k}`")));
            }
            self.entries.insert(k, p);
        }
        Ok(())
    }

    /// Entries whose path starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParameterSet {
        let entries = self
            .entries
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, p)| (k.clone(), p.clone()))
            .collect();
        ParameterSet { entries }
    }

    /// Records every entry on `tape`; unfrozen entries become differentiable leaves.
    pub fn to_vars(&self, tape: &Tape) -> Vars {
        let map = self
            .entries
            .iter()
            .map(|(k, p)| (k.clone(), tape.leaf_arc(p.value.clone(), !p.frozen)))
            .collect();
        Vars { map }
    }

    /// SHA-256 over paths, shapes and the exact bit patterns of all values.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (k, p) in &self.entries {
            h.update((k.len() as u64).to_le_bytes());
            h.update(k.as_bytes());
            for &d in p.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Parameters recorded on a tape, addressed by path.
#[derive(Clone, Debug, Default)]
pub struct Vars {
    map: BTreeMap<String, Var>,
}

impl Vars {
    pub fn from_map(map: BTreeMap<String, Var>) -> Self {
        Self { map }
    }

    pub fn get(&self, path: &str) -> Result<&Var> {
        self.map.get(path).ok_or_else(|| Error::MissingParam(path.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.map.iter()
    }

    pub fn insert(&mut self, path: String, var: Var) {
        self.map.insert(path, var);
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Entries that carry gradient, in path order.
    pub fn differentiable(&self) -> Vec<(String, Var)> {
        self.map
            .iter()
            .filter(|(_, v)| v.requires_grad())
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    /// Current values, keeping the frozen flags of `like`.
    pub fn snapshot(&self, like: &ParameterSet) -> Result<ParameterSet> {
        let mut out = ParameterSet::new();
        for (k, p) in like.iter() {
            out.insert(k.clone(), (*self.get(k)?.value()).clone(), p.frozen)?;
        }
        Ok(out)
    }
}

/// Gradients of `loss` with respect to every differentiable entry of `vars`.
pub fn grad_named(
    loss: &Var,
    vars: &Vars,
    create_graph: bool,
) -> Result<BTreeMap<String, Var>> {
    let targets = vars.differentiable();
    let wrt: Vec<Var> = targets.iter().map(|(_, v)| v.clone()).collect();
    let grads = loss.tape().grad(loss, &wrt, create_graph)?;
    Ok(targets.into_iter().map(|(k, _)| k).zip(grads).collect())
}
