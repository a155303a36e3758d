use std::collections::BTreeMap;

use crate::error::{GagError, Result};

use super::params::{Bound, ParamSet};
use super::tape::{Tape, Var};

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
}

impl GradCheck {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }
}

/// Compares the tape gradient of `loss_fn` with respect to every value in
/// `params` against the five-point central difference
/// `(8 (L(p + h) - L(p - h)) - (L(p + 2h) - L(p - 2h))) / 12 h` with `h = epsilon`.
///
/// The reported error for each element is
/// `|g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8)`; the maximum is returned.
pub fn grad_check<L>(loss_fn: L, params: &ParamSet<f64>, epsilon: f64) -> Result<GradCheck>
where
    L: Fn(&mut Tape<f64>, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let loss = loss_fn(&mut tape, &bound)?;
    if !tape.value(loss).is_finite() {
        return Err(GagError::Numeric("loss at the base point".into()));
    }
    let grads = tape.backward(loss)?;
    let analytic: BTreeMap<String, _> = bound.grads(&tape, &grads);

    let eval = |p: &ParamSet<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let b = p.bind(&mut t, false);
        let l = loss_fn(&mut t, &b)?;
        let v = t.value(l).item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(GagError::Numeric("loss under perturbation".into()))
        }
    };

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
    };
    let mut work = params.clone();
    work.unfreeze();
    for (name, g) in &analytic {
        for i in 0..g.len() {
            let orig = work.get(name)?.data()[i];
            let mut at = |offset: f64| -> Result<f64> {
                work.get_mut(name)?.data_mut()[i] = orig + offset;
                eval(&work)
            };
            let (p1, m1) = (at(epsilon)?, at(-epsilon)?);
            let (p2, m2) = (at(2.0 * epsilon)?, at(-2.0 * epsilon)?);
            work.get_mut(name)?.data_mut()[i] = orig;
            // Five-point central stencil.
            let fd = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * epsilon);
            let ad = g.data()[i];
            let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-8);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = rel;
                report.worst_param = name.clone();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}
