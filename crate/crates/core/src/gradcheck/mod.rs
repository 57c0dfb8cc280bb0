//! Central finite-difference verification of tape gradients, and a registry of
//! named checks selectable at runtime.

mod cases;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::error::{Error, Result};
use crate::params::{ParamStore, ParamVars};
use crate::tape::{Tape, Var};

pub use cases::builtin_checks;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct FdOptions {
    pub eps: f64,
    /// Coordinates checked per tensor (all of them when the tensor is smaller).
    pub samples_per_tensor: usize,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        FdOptions {
            eps: DEFAULT_EPS,
            samples_per_tensor: 32,
            seed: 0x5eed,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FdReport {
    /// Max over checked coordinates of |analytic - central| / max(1, |analytic|, |central|).
    pub max_rel_error: f64,
    /// Tensor name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    /// Coordinates whose perturbation flipped a discrete decision (relu sign,
    /// channel argmax, top-k membership) and were therefore excluded.
    pub skipped: usize,
}

impl FdReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.checked > 0 && self.max_rel_error <= tolerance
    }
}

fn evaluate<F>(f: &F, params: &ParamStore) -> Result<(f64, Option<u64>)>
where
    F: Fn(&mut Tape, &ParamVars) -> Result<Var>,
{
    let mut tape = Tape::tracking_branches();
    let vars = params.register(&mut tape);
    let loss = f(&mut tape, &vars)?;
    let v = tape.value(loss);
    if v.len() != 1 {
        return Err(Error::shape(format!(
            "finite-difference target must be scalar, got {}",
            v.shape()
        )));
    }
    Ok((v.item(), tape.branch_signature()))
}

/// Compares tape gradients of the scalar function `f` against central
/// differences with step `eps`, using default sampling.
pub fn finite_difference_check<F>(f: F, params: &ParamStore, eps: f64) -> Result<FdReport>
where
    F: Fn(&mut Tape, &ParamVars) -> Result<Var>,
{
    finite_difference_check_with(
        f,
        params,
        &FdOptions {
            eps,
            ..FdOptions::default()
        },
    )
}

pub fn finite_difference_check_with<F>(
    f: F,
    params: &ParamStore,
    opts: &FdOptions,
) -> Result<FdReport>
where
    F: Fn(&mut Tape, &ParamVars) -> Result<Var>,
{
    if !(1e-7..=1e-4).contains(&opts.eps) {
        return Err(Error::config(format!(
            "finite-difference step {} outside [1e-7, 1e-4]",
            opts.eps
        )));
    }

    let mut tape = Tape::tracking_branches();
    let vars = params.register(&mut tape);
    let loss = f(&mut tape, &vars)?;
    let base_value = tape.value(loss).item();
    let base_sig = tape.branch_signature();
    let grads = tape.backward(loss)?;

    let (again, _) = evaluate(&f, params)?;
    if again.to_bits() != base_value.to_bits() {
        return Err(Error::Determinism {
            first: base_value,
            second: again,
        });
    }

    let mut rng = Xoshiro256PlusPlus::seed_from_u64(opts.seed);
    let mut work = params.clone();
    let mut report = FdReport::default();
    let names: Vec<String> = params.names().map(str::to_owned).collect();
    for name in names {
        let var = vars.get(&name)?;
        let analytic = grads.wrt(var).clone();
        let len = analytic.len();
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        let want = opts.samples_per_tensor.min(len);
        let mut done = 0;
        for idx in order {
            if done == want {
                break;
            }
            let orig = work.require(&name)?.data()[idx];
            let up = orig + opts.eps;
            let down = orig - opts.eps;
            work.get_mut(&name).expect("present").data_mut()[idx] = up;
            let (f_up, sig_up) = evaluate(&f, &work)?;
            work.get_mut(&name).expect("present").data_mut()[idx] = down;
            let (f_down, sig_down) = evaluate(&f, &work)?;
            work.get_mut(&name).expect("present").data_mut()[idx] = orig;

            if sig_up != base_sig || sig_down != base_sig {
                report.skipped += 1;
                continue;
            }
            let central = (f_up - f_down) / (up - down);
            let a = analytic.data()[idx];
            let rel = (a - central).abs() / 1f64.max(a.abs()).max(central.abs());
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((name.clone(), idx));
            }
            report.checked += 1;
            done += 1;
        }
    }
    Ok(report)
}

/// A named gradient check that builds its own inputs and parameters.
pub trait GradCheck: Send + Sync {
    fn name(&self) -> &'static str;

    /// Coarse grouping used for selection (`ops`, `lsk`, `tksa`, `model`).
    fn group(&self) -> &'static str;

    fn run(&self, opts: &FdOptions) -> Result<FdReport>;
}

/// Checks registered by name, looked up by name or group at runtime.
#[derive(Default)]
pub struct GradCheckRegistry {
    checks: Vec<Box<dyn GradCheck>>,
}

impl GradCheckRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registry pre-populated with every check shipped in this crate.
    pub fn with_builtin() -> Self {
        let mut r = Self::new();
        for c in builtin_checks() {
            r.register(c);
        }
        r
    }

    pub fn register(&mut self, check: Box<dyn GradCheck>) {
        assert!(
            self.checks.iter().all(|c| c.name() != check.name()),
            "duplicate gradient check `{}`",
            check.name()
        );
        self.checks.push(check);
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.checks.iter().map(|c| c.name())
    }

    /// `all`, a group name, or a single check name.
    pub fn select(&self, selector: &str) -> Result<Vec<&dyn GradCheck>> {
        let picked: Vec<&dyn GradCheck> = self
            .checks
            .iter()
            .map(|c| c.as_ref())
            .filter(|c| selector == "all" || c.group() == selector || c.name() == selector)
            .collect();
        if picked.is_empty() {
            let known: Vec<&str> = self.names().collect();
            return Err(Error::config(format!(
                "unknown gradient check `{selector}` (known: all, ops, lsk, tksa, model, {})",
                known.join(", ")
            )));
        }
        Ok(picked)
    }
}
