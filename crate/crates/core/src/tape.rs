//! Reverse-mode differentiation record.
//!
//! Every op evaluates eagerly and appends a [`Node`] holding its value, its
//! input ids and a boxed [`BackwardRule`]. Ids are handed out in push order,
//! so the node list is already topologically sorted and a single reverse
//! sweep visits each node once.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of one recorded op.
pub trait BackwardRule: Send {
    fn name(&self) -> &'static str;

    /// Returns one entry per input. Entries whose `needs` flag is false may be `None`.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>>;
}

struct Node {
    value: Tensor,
    inputs: Vec<Var>,
    rule: Option<Box<dyn BackwardRule>>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
    branches: Option<DefaultHasher>,
    tie_margin: f64,
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            tie_margin: f64::INFINITY,
            ..Default::default()
        }
    }

    /// A tape that also hashes every discrete decision taken by non-smooth ops
    /// (relu signs, channel argmax, top-k survivors). Finite-difference checks
    /// compare these signatures to detect perturbations that cross a kink.
    pub fn tracking_branches() -> Self {
        Tape {
            branches: Some(DefaultHasher::new()),
            ..Tape::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_node(value, Vec::new(), None, false)
    }

    /// Registers a learnable leaf. Names must be unique on one tape.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> Var {
        let name = name.into();
        debug_assert!(
            self.params.iter().all(|(n, _)| *n != name),
            "duplicate parameter `{name}`"
        );
        let var = self.push_node(value, Vec::new(), None, true);
        self.params.push((name, var));
        var
    }

    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> Shape {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Records the result of an op. Gradient flows only if some input requires it.
    pub fn push(
        &mut self,
        value: Tensor,
        inputs: &[Var],
        rule: impl BackwardRule + 'static,
    ) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let rule: Option<Box<dyn BackwardRule>> = if requires_grad {
            Some(Box::new(rule))
        } else {
            None
        };
        self.push_node(value, inputs.to_vec(), rule, requires_grad)
    }

    fn push_node(
        &mut self,
        value: Tensor,
        inputs: Vec<Var>,
        rule: Option<Box<dyn BackwardRule>>,
        requires_grad: bool,
    ) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            inputs,
            rule,
            requires_grad,
        });
        Var(id)
    }

    pub fn tracks_branches(&self) -> bool {
        self.branches.is_some()
    }

    pub fn record_branch<T: Hash + ?Sized>(&mut self, decision: &T) {
        if let Some(h) = self.branches.as_mut() {
            decision.hash(h);
        }
    }

    pub fn branch_signature(&self) -> Option<u64> {
        self.branches.as_ref().map(|h| h.finish())
    }

    /// Smallest gap seen between a selected score and the best rejected one.
    pub fn record_tie_margin(&mut self, margin: f64) {
        self.tie_margin = self.tie_margin.min(margin);
    }

    pub fn tie_margin(&self) -> f64 {
        self.tie_margin
    }

    /// Gradient of the scalar `loss` with respect to every registered parameter.
    ///
    /// A parameter that no path from `loss` reaches is an error, not a zero.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_shape = self.shape(loss);
        if loss_shape.numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got {loss_shape}"
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(loss_shape));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            let Some(rule) = node.rule.as_ref() else {
                continue;
            };
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|v| self.nodes[v.0].requires_grad)
                .collect();
            let input_grads = rule.backward(&inputs, &node.value, &grad, &needs)?;
            debug_assert_eq!(input_grads.len(), node.inputs.len(), "{}", rule.name());
            for ((var, g), need) in node.inputs.iter().zip(input_grads).zip(&needs) {
                let (true, Some(g)) = (*need, g) else {
                    continue;
                };
                debug_assert_eq!(g.shape(), self.shape(*var), "{}", rule.name());
                match &mut grads[var.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }

        let mut by_param = Vec::with_capacity(self.params.len());
        for (name, var) in &self.params {
            match grads[var.0].take() {
                Some(g) => by_param.push((*var, g)),
                None => return Err(Error::MissingGradient(name.clone())),
            }
        }
        Ok(Gradients { by_param })
    }
}

/// Parameter gradients in registration order.
#[derive(Debug)]
pub struct Gradients {
    by_param: Vec<(Var, Tensor)>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.by_param
            .iter()
            .find(|(v, _)| *v == var)
            .map(|(_, g)| g)
    }

    pub fn wrt(&self, var: Var) -> &Tensor {
        self.get(var)
            .unwrap_or_else(|| panic!("{var:?} is not a parameter of this tape"))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.by_param.iter().map(|(_, g)| g)
    }

    pub fn into_tensors(self) -> Vec<Tensor> {
        self.by_param.into_iter().map(|(_, g)| g).collect()
    }
}
