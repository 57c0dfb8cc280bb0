use crate::error::Result;
use crate::tape::{BackwardRule, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Activation {
    Relu,
    Sigmoid,
}

const SIGMOID_LO: f64 = f64::MIN_POSITIVE;
const SIGMOID_HI: f64 = 1.0 - f64::EPSILON / 2.0;

/// Logistic function, kept strictly inside (0, 1) even where it would round to an endpoint.
pub fn sigmoid(x: f64) -> f64 {
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    y.clamp(SIGMOID_LO, SIGMOID_HI)
}

struct ActRule(Activation);

impl BackwardRule for ActRule {
    fn name(&self) -> &'static str {
        match self.0 {
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
        }
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let mut g = grad.clone();
        match self.0 {
            Activation::Relu => {
                for (gi, &x) in g.data_mut().iter_mut().zip(inputs[0].data()) {
                    if x <= 0.0 {
                        *gi = 0.0;
                    }
                }
            }
            Activation::Sigmoid => {
                for (gi, &y) in g.data_mut().iter_mut().zip(output.data()) {
                    *gi *= y * (1.0 - y);
                }
            }
        }
        Ok(vec![Some(g)])
    }
}

pub fn activation(tape: &mut Tape, x: Var, kind: Activation) -> Var {
    let xv = tape.value(x);
    let out = match kind {
        Activation::Relu => xv.map(|v| v.max(0.0)),
        Activation::Sigmoid => xv.map(sigmoid),
    };
    if kind == Activation::Relu && tape.tracks_branches() {
        let signs: Vec<u64> = xv
            .data()
            .chunks(64)
            .map(|c| {
                c.iter()
                    .enumerate()
                    .fold(0u64, |acc, (i, &v)| acc | (((v > 0.0) as u64) << i))
            })
            .collect();
        tape.record_branch(&signs);
    }
    tape.push(out, &[x], ActRule(kind))
}

pub fn relu(tape: &mut Tape, x: Var) -> Var {
    activation(tape, x, Activation::Relu)
}

pub fn sigmoid_op(tape: &mut Tape, x: Var) -> Var {
    activation(tape, x, Activation::Sigmoid)
}
