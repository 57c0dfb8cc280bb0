use indexmap::IndexMap;
use serde::Serialize;

use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub total: usize,
    /// Subtotals keyed by the first two name components (`enc.s1`, `dec.l4`, `head.seg`, ...).
    pub per_module: IndexMap<String, usize>,
}

impl ParamCount {
    pub fn millions(&self) -> f64 {
        self.total as f64 / 1e6
    }
}

/// Scalar count of every learnable tensor, grouped by module.
pub fn param_count(params: &ParamStore) -> ParamCount {
    let mut per_module: IndexMap<String, usize> = IndexMap::new();
    for (name, t) in params.iter() {
        let module = name.split('.').take(2).collect::<Vec<_>>().join(".");
        *per_module.entry(module).or_default() += t.len();
    }
    ParamCount {
        total: params.scalar_count(),
        per_module,
    }
}
