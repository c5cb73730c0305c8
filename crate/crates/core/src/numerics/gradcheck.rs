use super::{NumericsError, Tape, Tensor, Var};

const GRAD_FLOOR: f64 = 1e-6;

/// Compares reverse-mode gradients of a scalar function against five-point
/// central differences with step `h` (fourth-order accurate, so steps around
/// `1e-4` keep both truncation and round-off well below the gradients).
///
/// `f` records its computation on the given tape, reading the parameters from
/// the supplied leaves. Returns the largest
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-6)` over every
/// scalar entry. The floor keeps exactly-zero gradients (unused parameters,
/// isolated nodes) from being compared against pure round-off.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], h: f64) -> Result<f64, NumericsError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, NumericsError>,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let eval = |ps: &[Tensor]| -> Result<f64, NumericsError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.variable(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out).item();
        if !v.is_finite() {
            return Err(NumericsError::NonFiniteValue(format!("f = {v}")));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.variable(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.wrt_or_zero(v, p.shape()))
        .collect();

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        for k in 0..p.len() {
            let orig = p.data()[k];
            let mut at = |offset: f64| -> Result<f64, NumericsError> {
                work[pi].data_mut()[k] = orig + offset;
                eval(&work)
            };
            let (p2, p1, m1, m2) = (at(2.0 * h)?, at(h)?, at(-h)?, at(-2.0 * h)?);
            work[pi].data_mut()[k] = orig;
            let numeric = (-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * h);
            let a = analytic[pi].data()[k];
            if !a.is_finite() {
                return Err(NumericsError::NonFiniteValue(format!("analytic gradient {a}")));
            }
            let rel = (a - numeric).abs() / numeric.abs().max(a.abs()).max(GRAD_FLOOR);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
