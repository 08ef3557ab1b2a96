use crate::rng::RngStream;

/// Outcome of comparing an analytic gradient to central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_dev: f64,
    pub worst_coord: Option<usize>,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub checked: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_dev <= self.tolerance
    }
}

/// Denominator floor of the relative deviation, so that coordinates whose
/// true gradient is zero are judged on absolute error.
const REL_FLOOR: f64 = 1e-6;

/// Check `analytic` against `(loss(theta + h e_k) - loss(theta - h e_k)) / 2h`
/// on up to `coords` coordinates drawn without replacement from `rng`
/// (every coordinate when `coords >= params.len()`).
pub fn finite_diff_check<F>(
    mut loss: F,
    params: &[f64],
    analytic: &[f64],
    h: f64,
    tolerance: f64,
    coords: usize,
    rng: &mut RngStream,
) -> GradCheckReport
where
    F: FnMut(&[f64]) -> f64,
{
    assert!(h > 0.0, "finite difference step must be positive");
    assert_eq!(params.len(), analytic.len(), "gradient length");
    let mut order: Vec<usize> = (0..params.len()).collect();
    if coords < params.len() {
        rng.shuffle(&mut order);
        order.truncate(coords);
    }
    let mut report = GradCheckReport {
        max_rel_dev: 0.0,
        worst_coord: None,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        checked: order.len(),
        tolerance,
    };
    let mut theta = params.to_vec();
    for k in order {
        let orig = theta[k];
        theta[k] = orig + h;
        let up = loss(&theta);
        theta[k] = orig - h;
        let down = loss(&theta);
        theta[k] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[k];
        let dev = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
        if dev > report.max_rel_dev || report.worst_coord.is_none() {
            report.max_rel_dev = dev;
            report.worst_coord = Some(k);
            report.worst_analytic = a;
            report.worst_numeric = numeric;
        }
    }
    report
}
