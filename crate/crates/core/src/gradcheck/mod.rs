//! Central finite-difference verification of tape gradients.

use alloc::string::String;
use alloc::vec::Vec;

mod suite;

pub use suite::{run_suite, toy_config, CaseReport};

use crate::{OpKind, ParamStore, Result, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    /// Central difference step. At 1e-4 the truncation error of the full
    /// objective already reaches the tolerance; 1e-5 leaves two orders of
    /// margin on both truncation and rounding.
    pub step: f64,
    /// Maximum accepted relative error.
    pub tolerance: f64,
    /// Denominator floor: the relative error is `|a − n| / max(|a|, |n|, floor)`.
    pub floor: f64,
    /// Sign-flip one backward rule in the analytic pass.
    pub fault: Option<OpKind>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-5, tolerance: 1e-5, floor: 1e-3, fault: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ParamStatus {
    /// Frozen parameter; excluded from checking.
    NoGrad,
    Checked {
        max_rel_error: f64,
        worst_index: usize,
        analytic: f64,
        numeric: f64,
        flagged: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamReport {
    pub name: String,
    pub status: ParamStatus,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub params: Vec<ParamReport>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params
            .iter()
            .filter_map(|p| match p.status {
                ParamStatus::Checked { max_rel_error, .. } => Some(max_rel_error),
                ParamStatus::NoGrad => None,
            })
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.flagged().next().is_none()
    }

    pub fn flagged(&self) -> impl Iterator<Item = &ParamReport> {
        self.params
            .iter()
            .filter(|p| matches!(p.status, ParamStatus::Checked { flagged, .. } if flagged > 0))
    }

    pub fn worst(&self) -> Option<&ParamReport> {
        self.params
            .iter()
            .filter(|p| matches!(p.status, ParamStatus::Checked { .. }))
            .max_by(|a, b| {
                let e = |p: &ParamReport| match p.status {
                    ParamStatus::Checked { max_rel_error, .. } => max_rel_error,
                    ParamStatus::NoGrad => 0.0,
                };
                e(a).total_cmp(&e(b))
            })
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares tape gradients of the scalar `f` against central differences
/// `(f(p + h) − f(p − h)) / 2h` for every entry of every grad-requiring
/// parameter in `store`. `f` must be deterministic.
pub fn grad_check<F>(store: &mut ParamStore<f64>, mut f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    store.zero_grads();
    let mut tape = Tape::new();
    tape.set_guard_non_finite(true);
    tape.inject_backward_fault(opts.fault);
    let root = f(&mut tape, store)?;
    tape.backward(root)?;
    tape.accumulate_param_grads(store)?;

    let mut eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let r = f(&mut t, store)?;
        Ok(t.item(r))
    };

    let ids: Vec<_> = store.ids().collect();
    let mut params = Vec::with_capacity(ids.len());
    for id in ids {
        let name = String::from(store.name(id));
        if !store.get(id).requires_grad() {
            params.push(ParamReport { name, status: ParamStatus::NoGrad });
            continue;
        }
        let analytic: Vec<f64> = match store.get(id).grad() {
            Some(g) => g.to_vec(),
            None => alloc::vec![0.0; store.get(id).numel()],
        };
        let mut status = ParamStatus::Checked {
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            flagged: 0,
        };
        for (j, &a) in analytic.iter().enumerate() {
            let orig = store.get(id).data()[j];
            store.get_mut(id).data_mut()[j] = orig + opts.step;
            let plus = eval(store);
            store.get_mut(id).data_mut()[j] = orig - opts.step;
            let minus = eval(store);
            store.get_mut(id).data_mut()[j] = orig;
            let numeric = (plus? - minus?) / (2.0 * opts.step);
            let err = relative_error(a, numeric, opts.floor);
            if let ParamStatus::Checked { max_rel_error, worst_index, analytic, numeric: n, flagged } = &mut status {
                if err > opts.tolerance || err.is_nan() {
                    *flagged += 1;
                }
                if err > *max_rel_error || err.is_nan() {
                    *max_rel_error = err;
                    *worst_index = j;
                    *analytic = a;
                    *n = numeric;
                }
            }
        }
        params.push(ParamReport { name, status });
    }
    store.zero_grads();
    Ok(GradCheckReport { tolerance: opts.tolerance, params })
}
