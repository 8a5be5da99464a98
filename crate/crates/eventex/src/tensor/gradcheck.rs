//! Finite-difference gradient verification.
//!
//! The checker only drives the forward path: it evaluates a user-supplied
//! scalar loss at perturbed parameter points and compares central
//! differences against the analytic gradients, so it stays independent of
//! the backward implementation it is checking.

/// Worst relative error and the flat parameter index where it occurred.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: usize,
    pub worst_index: usize,
    pub checked: usize,
}

/// Compare analytic gradients against central finite differences.
///
/// `loss` evaluates the scalar objective at a parameter point (building a
/// fresh tape internally); `analytic` returns one gradient buffer per
/// parameter buffer at the unperturbed point. Relative error per element is
/// `|g_a - g_fd| / max(1, |g_fd|)`.
pub fn finite_diff_check<L, G>(
    params: &[Vec<f64>],
    loss: L,
    analytic: G,
    step: f64,
) -> GradCheckReport
where
    L: Fn(&[Vec<f64>]) -> f64,
    G: FnOnce(&[Vec<f64>]) -> Vec<Vec<f64>>,
{
    let grads = analytic(params);
    assert_eq!(
        grads.len(),
        params.len(),
        "analytic gradient count mismatch"
    );
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: 0,
        worst_index: 0,
        checked: 0,
    };
    let mut work: Vec<Vec<f64>> = params.to_vec();
    for (p, grad) in grads.iter().enumerate() {
        assert_eq!(grad.len(), params[p].len(), "gradient length mismatch");
        for i in 0..params[p].len() {
            let orig = work[p][i];
            work[p][i] = orig + step;
            let up = loss(&work);
            work[p][i] = orig - step;
            let down = loss(&work);
            work[p][i] = orig;
            let fd = (up - down) / (2.0 * step);
            let rel = (grad[i] - fd).abs() / fd.abs().max(1.0);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = p;
                report.worst_index = i;
            }
            report.checked += 1;
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn finite_diff_agrees_on_quadratic() {
        // loss = sum(x * x); analytic gradient 2x
        let params = vec![vec![0.3, -1.2, 2.5]];
        let loss = |p: &[Vec<f64>]| {
            let mut tape = Tape::new();
            let x = tape.leaf(p[0].clone(), vec![3], true).unwrap();
            let sq = tape.mul(x, x).unwrap();
            let l = tape.sum(sq).unwrap();
            tape.values(l)[0]
        };
        let analytic = |p: &[Vec<f64>]| {
            let mut tape = Tape::new();
            let x = tape.leaf(p[0].clone(), vec![3], true).unwrap();
            let sq = tape.mul(x, x).unwrap();
            let l = tape.sum(sq).unwrap();
            tape.backward(l).unwrap();
            vec![tape.grad(x).unwrap().to_vec()]
        };
        let report = finite_diff_check(&params, loss, analytic, 1e-5);
        assert!(report.max_rel_err < 1e-9, "{report:?}");
        assert_eq!(report.checked, 3);
    }

    #[test]
    fn finite_diff_catches_a_wrong_gradient() {
        let params = vec![vec![1.0]];
        let loss = |p: &[Vec<f64>]| p[0][0] * p[0][0];
        let analytic = |_: &[Vec<f64>]| vec![vec![3.0]]; // wrong: should be 2.0
        let report = finite_diff_check(&params, loss, analytic, 1e-5);
        assert!(report.max_rel_err > 0.4);
    }
}
