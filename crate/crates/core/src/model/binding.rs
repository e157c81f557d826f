use indexmap::IndexMap;

use super::params::{Param, ParamTree};
use crate::autodiff::{Real, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
struct LoraVars {
    a: Var,
    b: Var,
    scale: f64,
}

/// Parameters placed on a tape for one forward pass.
///
/// Linear layers go through [`Binding::linear`], which is where low-rank
/// adapters are spliced in and where layer inputs are captured for
/// activation statistics.
#[derive(Debug, Default)]
pub struct Binding {
    vars: IndexMap<String, Var>,
    adapters: IndexMap<String, LoraVars>,
    recorded: Option<IndexMap<String, Var>>,
}

impl Binding {
    /// Puts every tensor of `tree` on the tape; `trainable` selects which
    /// ones receive gradients.
    pub fn bind<T: Real>(
        tape: &mut Tape<T>,
        tree: &ParamTree<T>,
        trainable: impl Fn(&str, &Param<T>) -> bool,
    ) -> Self {
        let vars = tree
            .iter()
            .map(|(name, p)| {
                let t = p.tensor.clone().with_requires_grad(trainable(name, p));
                (name.to_string(), tape.leaf(t))
            })
            .collect();
        Self {
            vars,
            adapters: IndexMap::new(),
            recorded: None,
        }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownTensor(name.to_string()))
    }

    pub fn vars(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Replaces the weight `name` with a different tape value, e.g. the
    /// output of a sparse scatter-add.
    pub fn rebind(&mut self, name: &str, var: Var) -> Result<()> {
        let slot = self
            .vars
            .get_mut(name)
            .ok_or_else(|| Error::UnknownTensor(name.to_string()))?;
        *slot = var;
        Ok(())
    }

    /// Adds `x·Aᵀ·Bᵀ·scale` to the output of linear layer `name`.
    pub fn attach_lora<T: Real>(
        &mut self,
        tape: &mut Tape<T>,
        name: &str,
        a: Var,
        b: Var,
        scale: f64,
    ) -> Result<()> {
        let w = self.var(name)?;
        let (out_dim, in_dim) = tape.value(w).dims2()?;
        let (ra, ca) = tape.value(a).dims2()?;
        let (rb, cb) = tape.value(b).dims2()?;
        if ca != in_dim || rb != out_dim || cb != ra {
            return Err(Error::shape("attach_lora", &[ra, ca, rb, cb], &[out_dim, in_dim]));
        }
        self.adapters.insert(name.to_string(), LoraVars { a, b, scale });
        Ok(())
    }

    pub fn record_linear_inputs(&mut self) {
        self.recorded = Some(IndexMap::new());
    }

    /// Inputs seen by each linear layer in the last forward pass.
    pub fn linear_inputs(&self) -> Option<&IndexMap<String, Var>> {
        self.recorded.as_ref()
    }

    pub fn linear<T: Real>(
        &mut self,
        tape: &mut Tape<T>,
        weight: &str,
        bias: Option<&str>,
        x: Var,
    ) -> Result<Var> {
        if let Some(rec) = self.recorded.as_mut() {
            rec.insert(weight.to_string(), x);
        }
        let w = self.var(weight)?;
        let mut y = tape.linear(x, w)?;
        if let Some(lora) = self.adapters.get(weight).copied() {
            let xa = tape.linear(x, lora.a)?;
            let xab = tape.linear(xa, lora.b)?;
            let delta = tape.scale(xab, T::from_f64_lossy(lora.scale));
            y = tape.add(y, delta)?;
        }
        if let Some(b) = bias {
            let bv = self.var(b)?;
            y = tape.add_bias(y, bv)?;
        }
        Ok(y)
    }
}

