use super::{Result, Tape, Tensor, TensorError, Var};

/// Worst-case agreement between analytic and central-difference gradients for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub elements: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn offenders(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(|p| p.max_rel_error.is_nan() || p.max_rel_error >= self.tolerance)
    }

    pub fn passed(&self) -> bool {
        self.offenders().next().is_none()
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares reverse-mode gradients of `f` against central differences with step `h`.
///
/// `f` receives a fresh tape and one [`Var`] per entry of `params` (in order) and
/// must return a scalar loss. It is re-evaluated twice per parameter element.
pub fn grad_check<F, E>(
    params: &[(String, Tensor)],
    h: f64,
    tolerance: f64,
    f: F,
) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    if h <= 0.0 {
        return Err(TensorError::Contract("grad_check: step must be positive".into()).into());
    }
    let eval = |values: &[(String, Tensor)]| -> Result<f64, E> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|(_, t)| tape.constant(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        let v = tape.data(loss)[0];
        if !v.is_finite() {
            return Err(TensorError::NonFinite(v).into());
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|(_, t)| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let v = tape.data(loss)[0];
    if !v.is_finite() {
        return Err(TensorError::NonFinite(v).into());
    }
    tape.backward(loss)?;

    let mut work: Vec<(String, Tensor)> = params.to_vec();
    let mut report = Vec::with_capacity(params.len());
    for (p, var) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match tape.grad(*var) {
            Some(g) => g.to_vec(),
            None => vec![0.0; params[p].1.numel()],
        };
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for (k, &a) in analytic.iter().enumerate() {
            let orig = params[p].1.data()[k];
            work[p].1.data_mut()[k] = orig + h;
            let plus = eval(&work)?;
            work[p].1.data_mut()[k] = orig - h;
            let minus = eval(&work)?;
            work[p].1.data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            max_rel = max_rel.max(relative_error(a, numeric));
            max_abs = max_abs.max((a - numeric).abs());
        }
        report.push(ParamCheck {
            name: params[p].0.clone(),
            max_rel_error: max_rel,
            max_abs_error: max_abs,
            elements: analytic.len(),
        });
    }
    Ok(GradCheckReport {
        params: report,
        tolerance,
    })
}
