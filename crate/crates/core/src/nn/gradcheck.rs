//! Central finite-difference gradient checking.

use super::params::Parameters;

/// Tensors whose gradient norms are both below this are compared absolutely.
pub const NORM_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, floor)` over tensors.
    pub worst_relative_error: f64,
    pub worst_tensor: String,
    pub checked_entries: usize,
}

/// Perturbs every scalar of `params` by `±step` and compares the resulting
/// central difference of `loss` against `analytic`, tensor by tensor.
pub fn check_gradients<P, F>(params: &P, analytic: &P, loss: F, step: f64) -> GradCheckReport
where
    P: Parameters + Clone,
    F: Fn(&P) -> f64,
{
    let base = params.flatten();
    let analytic_flat = analytic.flatten();
    let shapes: Vec<(String, usize)> = params
        .named()
        .iter()
        .map(|(n, v)| (n.clone(), v.len()))
        .collect();

    let mut probe = params.clone();
    let mut numeric = vec![0.0; base.len()];
    let mut work = base.clone();
    for i in 0..base.len() {
        work[i] = base[i] + step;
        probe.assign_flat(&work);
        let up = loss(&probe);
        work[i] = base[i] - step;
        probe.assign_flat(&work);
        let down = loss(&probe);
        work[i] = base[i];
        numeric[i] = (up - down) / (2.0 * step);
    }

    let mut report = GradCheckReport {
        worst_relative_error: 0.0,
        worst_tensor: String::new(),
        checked_entries: base.len(),
    };
    let mut offset = 0;
    for (name, len) in shapes {
        let a = &analytic_flat[offset..offset + len];
        let n = &numeric[offset..offset + len];
        offset += len;
        let diff = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nn = n.iter().map(|x| x * x).sum::<f64>().sqrt();
        let rel = diff / na.max(nn).max(NORM_FLOOR);
        if rel > report.worst_relative_error || report.worst_tensor.is_empty() {
            report.worst_relative_error = rel;
            report.worst_tensor = name;
        }
    }
    report
}

/// Finite-difference gradient of a scalar function of a plain vector.
pub fn numeric_gradient<F: Fn(&[f64]) -> f64>(x: &[f64], f: F, step: f64) -> Vec<f64> {
    let mut work = x.to_vec();
    (0..x.len())
        .map(|i| {
            work[i] = x[i] + step;
            let up = f(&work);
            work[i] = x[i] - step;
            let down = f(&work);
            work[i] = x[i];
            (up - down) / (2.0 * step)
        })
        .collect()
}
