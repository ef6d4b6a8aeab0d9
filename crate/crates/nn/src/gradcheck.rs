use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tape::{Fault, Tape, Var};
use crate::tensor::NnError;

/// Relative-error floor used when both gradients are tiny.
pub const REL_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Coordinates checked per tensor (all when `None`), chosen by `seed`.
    pub per_tensor: Option<usize>,
    pub seed: u64,
    pub fault: Option<Fault>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            per_tensor: None,
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Compares reverse-mode gradients of the scalar `f` with central
/// differences over every parameter coordinate.
pub fn grad_check<F>(f: F, store: &ParamStore, eps: f64) -> Result<GradCheckReport, NnError>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var, NnError>,
{
    grad_check_with(
        f,
        store,
        &GradCheckOptions {
            eps,
            ..GradCheckOptions::default()
        },
    )
}

pub fn grad_check_with<F>(
    f: F,
    store: &ParamStore,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, NnError>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var, NnError>,
{
    let mut tape = match opts.fault {
        Some(fault) => Tape::with_fault(fault),
        None => Tape::new(),
    };
    let loss = f(&mut tape, store)?;
    let analytic = tape.backward(loss, store);
    let eval = |s: &ParamStore| -> Result<f64, NnError> {
        let mut t = Tape::new();
        let l = f(&mut t, s)?;
        Ok(t.scalar(l))
    };

    let mut rng = Rng::new(opts.seed, 0x6772_6164);
    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for id in store.ids() {
        let n = store.get(id).len();
        let coords: Vec<usize> = match opts.per_tensor {
            Some(k) if k < n => (0..k).map(|_| rng.below(n)).collect(),
            _ => (0..n).collect(),
        };
        for j in coords {
            let orig = store.get(id).data()[j];
            work.get_mut(id).data_mut()[j] = orig + opts.eps;
            let plus = eval(&work)?;
            work.get_mut(id).data_mut()[j] = orig - opts.eps;
            let minus = eval(&work)?;
            work.get_mut(id).data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = analytic.get(id)[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((store.name(id).to_string(), j));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn square_at_three() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::new(vec![1], vec![3.0]).unwrap());
        let r = grad_check(
            |t, s| {
                let v = t.param(s, x);
                let sq = t.mul(v, v)?;
                Ok(t.sum(sq))
            },
            &store,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
        assert_eq!(r.checked, 1);
    }
}
