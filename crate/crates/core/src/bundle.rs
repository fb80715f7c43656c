//! A trained model: backbone, heads, optional ensembles and their costs.

use std::collections::HashMap;

use crate::backbone::BackboneModel;
use crate::ensemble::{EnsembleKind, EnsembleParams};
use crate::error::{Error, Result};
use crate::heads::InternalClassifier;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Ensembles {
    pub kind: EnsembleKind,
    /// Stage `m` at index `m − 1`.
    pub stages: Vec<EnsembleParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub backbone: BackboneModel,
    pub heads: Vec<InternalClassifier>,
    pub ensembles: Option<Ensembles>,
}

/// Cumulative per-sample FLOPs of exiting at head `1..=M` (indices
/// `0..M`) or running to the end (index `M`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostTable {
    pub exits: Vec<u64>,
}

impl CostTable {
    pub fn new(exits: Vec<u64>) -> Result<Self> {
        if exits.len() < 2 || exits.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "costs must be strictly increasing with M+1 >= 2 entries: {exits:?}"
            )));
        }
        Ok(CostTable { exits })
    }

    pub fn num_heads(&self) -> usize {
        self.exits.len() - 1
    }

    pub fn final_cost(&self) -> u64 {
        *self.exits.last().expect("non-empty")
    }
}

impl ModelBundle {
    pub fn new(
        backbone: BackboneModel,
        heads: Vec<InternalClassifier>,
        ensembles: Option<Ensembles>,
    ) -> Result<Self> {
        if heads.len() != backbone.num_taps() {
            return Err(Error::Config(format!(
                "{} heads for {} backbone taps",
                heads.len(),
                backbone.num_taps()
            )));
        }
        if let Some(e) = &ensembles {
            if e.stages.len() != heads.len()
                || e.stages.iter().enumerate().any(|(i, s)| s.stage() != i + 1)
            {
                return Err(Error::Config(
                    "ensemble stages must be 1..=M in order".into(),
                ));
            }
        }
        Ok(ModelBundle {
            backbone,
            heads,
            ensembles,
        })
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn num_classes(&self) -> usize {
        self.backbone.num_classes()
    }

    /// Cost of each exit point, charging every head evaluated on the way
    /// and, with `with_ensembles`, every ensemble stage too.
    pub fn cost_table(&self, with_ensembles: bool) -> Result<CostTable> {
        let ens = match (&self.ensembles, with_ensembles) {
            (Some(e), true) => Some(e),
            (None, true) => return Err(Error::Config("bundle has no ensembles to charge".into())),
            _ => None,
        };
        let m_total = self.heads.len();
        let mut overhead = 0u64;
        let mut exits = Vec::with_capacity(m_total + 1);
        for m in 1..=m_total {
            overhead += self.heads[m - 1].flops();
            if let Some(e) = ens {
                overhead += e.stages[m - 1].flops();
            }
            exits.push(self.backbone.prefix_flops(m)? + overhead);
        }
        exits.push(self.backbone.full_flops() + overhead);
        CostTable::new(exits)
    }

    /// All parameters in checkpoint order: backbone, heads, ensembles.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .backbone
            .named_params()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        for h in &self.heads {
            out.extend(h.named_params().into_iter().map(|(n, t)| (n, t.clone())));
        }
        if let Some(e) = &self.ensembles {
            for s in &e.stages {
                out.extend(s.named_params().into_iter().map(|(n, t)| (n, t.clone())));
            }
        }
        out
    }

    /// Loads every parameter of this architecture from `tensors`; extra
    /// names are an error so that mismatched checkpoints are caught.
    pub fn load_tensors(&mut self, tensors: Vec<(String, Tensor)>) -> Result<()> {
        let expected = self.named_tensors().len();
        let map: HashMap<String, Tensor> = tensors.into_iter().collect();
        if map.len() != expected {
            return Err(Error::Config(format!(
                "checkpoint holds {} tensors, architecture expects {expected}",
                map.len()
            )));
        }
        let lookup = |name: &str| map.get(name).cloned();
        self.backbone.load(&lookup)?;
        for h in &mut self.heads {
            h.load(&lookup)?;
        }
        if let Some(e) = &mut self.ensembles {
            for s in &mut e.stages {
                let m = s.stage();
                for (suffix, slot) in [("raw_w", &mut s.raw_w), ("raw_b", &mut s.raw_b)] {
                    let name = format!("ens{m}.{suffix}");
                    let t = lookup(&name)
                        .ok_or_else(|| Error::Config(format!("checkpoint lacks tensor {name}")))?;
                    if t.shape() != slot.shape() {
                        return Err(Error::dims("load", slot.shape(), t.shape()));
                    }
                    *slot = t;
                }
            }
        }
        Ok(())
    }
}
