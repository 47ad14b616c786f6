//! Central finite-difference gradient checking.

use serde::Serialize;

use super::params::ParamStore;
use super::tape::{Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, 1e-6)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

#[derive(Debug, Clone, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_error <= self.tol)
    }

    pub fn max_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// Analytic gradients of the scalar built by `f`.
pub fn analytic_gradients<F>(store: &mut ParamStore, f: &F) -> Vec<Tensor>
where
    F: Fn(&ParamStore, &mut Tape) -> Var,
{
    store.zero_grad();
    let mut tape = Tape::new();
    let loss = f(store, &mut tape);
    tape.backward(loss, store).expect("scalar loss");
    store.grads().to_vec()
}

fn eval<F>(store: &ParamStore, f: &F) -> f64
where
    F: Fn(&ParamStore, &mut Tape) -> Var,
{
    let mut tape = Tape::new();
    let v = f(store, &mut tape);
    tape.value(v).item()
}

/// Compares `analytic` against central differences. `max_per_param` caps
/// how many entries of each tensor are probed (evenly strided); `None`
/// checks every entry.
pub fn compare_gradients<F>(
    store: &mut ParamStore,
    analytic: &[Tensor],
    f: &F,
    tol: f64,
    max_per_param: Option<usize>,
) -> GradCheckReport
where
    F: Fn(&ParamStore, &mut Tape) -> Var,
{
    let mut params = Vec::with_capacity(store.len());
    for id in 0..store.len() {
        let n = store.value(id).len();
        let stride = match max_per_param {
            Some(k) if k > 0 && n > k => n.div_ceil(k),
            _ => 1,
        };
        let mut worst: f64 = 0.0;
        let mut checked = 0;
        for k in (0..n).step_by(stride) {
            let orig = store.value(id).data[k];
            store.value_mut(id).data[k] = orig + FD_STEP;
            let up = eval(store, f);
            store.value_mut(id).data[k] = orig - FD_STEP;
            let down = eval(store, f);
            store.value_mut(id).data[k] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(analytic[id].data[k], numeric));
            checked += 1;
        }
        params.push(ParamCheck {
            name: store.name(id).to_string(),
            max_rel_error: worst,
            checked,
        });
    }
    GradCheckReport { params, tol }
}

pub fn grad_check<F>(store: &mut ParamStore, f: F, tol: f64, max_per_param: Option<usize>) -> GradCheckReport
where
    F: Fn(&ParamStore, &mut Tape) -> Var,
{
    let analytic = analytic_gradients(store, &f);
    compare_gradients(store, &analytic, &f, tol, max_per_param)
}
