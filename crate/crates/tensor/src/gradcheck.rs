use crate::error::{Result, TensorError};
use crate::graph::Var;
use crate::params::{ParamSet, ParamStore, Session};

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max over coordinates of |analytic - numeric| / max(1, |analytic|)
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
    /// Coordinates whose step had to be shrunk because the perturbation
    /// crossed a kink (ReLU sign flip, bilinear cell change, argmax change).
    pub refined: usize,
    /// Coordinates where even the smallest step crossed a kink.
    pub skipped: usize,
    /// Parameters with at least one skipped coordinate, with counts.
    pub skipped_params: Vec<(String, usize)>,
}

const REFINEMENTS: usize = 4;

fn evaluate<F>(store: &ParamStore<f64>, trainable: &ParamSet, f: &mut F) -> Result<(f64, u64)>
where
    F: FnMut(&mut Session<f64>) -> Result<Var>,
{
    let mut s = Session::new(store, trainable);
    s.track_branches();
    let loss = f(&mut s)?;
    let v = s.value(loss);
    if v.numel() != 1 {
        return Err(TensorError::Contract("grad_check needs a scalar objective".into()));
    }
    let v = v.item();
    if !v.is_finite() {
        return Err(TensorError::NumericDomain("objective is not finite".into()));
    }
    Ok((v, s.branch_signature().unwrap_or(0)))
}

/// Compare reverse-mode gradients of `f` against central differences
/// `(f(x+h) - f(x-h)) / 2h` for every coordinate of every trainable
/// parameter. Runs in 64-bit.
///
/// When a perturbation changes the branch signature of the graph, the step
/// is shrunk by 10x (up to four times) so the difference stays on one smooth
/// piece.
pub fn grad_check<F>(store: &mut ParamStore<f64>, trainable: &ParamSet, h: f64, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Session<f64>) -> Result<Var>,
{
    let analytic = {
        let mut s = Session::new(store, trainable);
        s.track_branches();
        let loss = f(&mut s)?;
        if !s.value(loss).all_finite() {
            return Err(TensorError::NumericDomain("objective is not finite".into()));
        }
        s.backward(loss)?
    };
    let (_, base_sig) = evaluate(store, trainable, &mut f)?;
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, coordinates: 0, refined: 0, skipped: 0, skipped_params: Vec::new() };
    let ids: Vec<_> = trainable.ids().collect();
    for id in ids {
        let n = store.get(id).numel();
        for i in 0..n {
            let a = analytic.get(id).map_or(0.0, |g| g.data()[i]);
            let orig = store.get(id).data()[i];
            let mut step = h;
            let mut numeric = None;
            for attempt in 0..=REFINEMENTS {
                store.get_mut(id).data_mut()[i] = orig + step;
                let (fp, sp) = evaluate(store, trainable, &mut f)?;
                store.get_mut(id).data_mut()[i] = orig - step;
                let (fm, sm) = evaluate(store, trainable, &mut f)?;
                store.get_mut(id).data_mut()[i] = orig;
                if sp == base_sig && sm == base_sig {
                    numeric = Some((fp - fm) / (2.0 * step));
                    if attempt > 0 {
                        report.refined += 1;
                    }
                    break;
                }
                step /= 10.0;
            }
            report.coordinates += 1;
            let Some(num) = numeric else {
                report.skipped += 1;
                let name = store.name(id);
                match report.skipped_params.last_mut() {
                    Some((n, c)) if n == name => *c += 1,
                    _ => report.skipped_params.push((name.to_string(), 1)),
                }
                continue;
            };
            let err = (a - num).abs() / a.abs().max(1.0);
            if err >= report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((store.name(id).to_string(), i));
            }
        }
    }
    Ok(report)
}
