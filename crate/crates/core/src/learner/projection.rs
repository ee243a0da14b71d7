use super::LearnerError;

const MEMBERSHIP_TOL: f64 = 1e-12;

/// Euclidean projection onto `{y : sum y = 1, y_i >= eps on feasible
/// coordinates, y_i = 0 elsewhere}`.
///
/// Shifts the feasible coordinates down by `eps`, projects onto the simplex
/// of radius `1 - k eps` with the sort-and-threshold rule, then shifts back.
/// Points already in the set (within 1e-12) are returned unchanged.
pub fn project_to_constrained_simplex(
    x: &[f64],
    eps: f64,
    feasible: &[bool],
) -> Result<Vec<f64>, LearnerError> {
    let mut out = vec![0.0; x.len()];
    let mut scratch = Vec::with_capacity(x.len());
    project_into(x, eps, feasible, &mut out, &mut scratch)?;
    Ok(out)
}

/// Allocation-free form of [`project_to_constrained_simplex`]; `out` may not
/// alias `x`.
pub(crate) fn project_into(
    x: &[f64],
    eps: f64,
    feasible: &[bool],
    out: &mut [f64],
    scratch: &mut Vec<f64>,
) -> Result<(), LearnerError> {
    debug_assert_eq!(x.len(), feasible.len());
    let k = feasible.iter().filter(|f| **f).count();
    if k == 0 {
        return Err(LearnerError::EmptyFeasibleSet);
    }
    if eps.is_nan() || eps < 0.0 || k as f64 * eps > 1.0 + MEMBERSHIP_TOL {
        return Err(LearnerError::InfeasibleProjection { eps, k });
    }

    if is_member(x, eps, feasible) {
        out.copy_from_slice(x);
        return Ok(());
    }

    let radius = 1.0 - k as f64 * eps;
    if radius <= 0.0 {
        for (o, f) in out.iter_mut().zip(feasible) {
            *o = if *f { eps } else { 0.0 };
        }
        return Ok(());
    }
    scratch.clear();
    scratch.extend(x.iter().zip(feasible).filter(|(_, f)| **f).map(|(v, _)| v - eps));
    scratch.sort_unstable_by(|a, b| b.total_cmp(a));

    // largest rho with u_rho - (sum_{i<=rho} u_i - radius) / rho > 0
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (j, u) in scratch.iter().enumerate() {
        cumsum += u;
        let t = (cumsum - radius) / (j + 1) as f64;
        if u - t > 0.0 {
            theta = t;
        }
    }
    for ((o, v), f) in out.iter_mut().zip(x).zip(feasible) {
        *o = if *f { (v - eps - theta).max(0.0) + eps } else { 0.0 };
    }
    Ok(())
}

fn is_member(x: &[f64], eps: f64, feasible: &[bool]) -> bool {
    let mut sum = 0.0;
    for (v, f) in x.iter().zip(feasible) {
        if *f {
            if *v < eps - MEMBERSHIP_TOL {
                return false;
            }
        } else if v.abs() > MEMBERSHIP_TOL {
            return false;
        }
        sum += v;
    }
    (sum - 1.0).abs() <= MEMBERSHIP_TOL
}

/// Smallest index attaining the minimum over the feasible entries.
pub fn argmin_smallest_index(values: &[f64], feasible: &[bool]) -> Result<usize, LearnerError> {
    let mut best: Option<usize> = None;
    for (i, (v, f)) in values.iter().zip(feasible).enumerate() {
        if *f && best.is_none_or(|b| *v < values[b]) {
            best = Some(i);
        }
    }
    best.ok_or(LearnerError::EmptyFeasibleSet)
}
