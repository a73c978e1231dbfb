//! Central-difference gradient checking.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::ParamSet;

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Check at most this many evenly spaced coordinates per tensor.
    pub max_coords_per_tensor: Option<usize>,
    /// Tensors to leave out.
    pub skip: Vec<String>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            max_coords_per_tensor: None,
            skip: Vec::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter and flat index where `max_rel_error` occurred.
    pub worst: Option<(String, usize)>,
    pub per_tensor: BTreeMap<String, f64>,
    pub coords_checked: usize,
}

/// `|a − n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares analytic gradients against central differences.
///
/// `f(params, need_grad)` returns the scalar objective and, when
/// `need_grad` is set, the analytic gradient per parameter name (missing
/// names are treated as zero gradient).
pub fn grad_check<F>(params: &ParamSet, opts: &GradCheckOptions, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&ParamSet, bool) -> Result<(f64, Option<BTreeMap<String, Vec<f64>>>)>,
{
    let h = opts.step;
    let (base, grads) = f(params, true)?;
    if !base.is_finite() {
        return Err(Error::NonFinite("objective at the base point".into()));
    }
    let grads = grads.ok_or_else(|| Error::invalid("objective returned no gradient"))?;
    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        per_tensor: BTreeMap::new(),
        coords_checked: 0,
    };
    let names: Vec<String> = params
        .iter()
        .filter(|(n, t)| t.requires_grad && !opts.skip.iter().any(|s| s == n))
        .map(|(n, _)| n.to_string())
        .collect();
    for name in names {
        let numel = params.get(&name)?.numel();
        let coords: Vec<usize> = match opts.max_coords_per_tensor {
            Some(k) if k < numel => (0..k).map(|i| i * numel / k).collect(),
            _ => (0..numel).collect(),
        };
        let analytic = grads.get(&name);
        let mut tensor_max = 0.0f64;
        for idx in coords {
            let orig = params.get(&name)?.data()[idx];
            work.get_mut(&name)?.data_mut()[idx] = orig + h;
            let (fp, _) = f(&work, false)?;
            work.get_mut(&name)?.data_mut()[idx] = orig - h;
            let (fm, _) = f(&work, false)?;
            work.get_mut(&name)?.data_mut()[idx] = orig;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::NonFinite(format!("objective while perturbing `{name}`[{idx}]")));
            }
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.map_or(0.0, |g| g[idx]);
            let err = relative_error(a, numeric);
            tensor_max = tensor_max.max(err);
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((name.clone(), idx));
            }
            report.coords_checked += 1;
        }
        report.per_tensor.insert(name, tensor_max);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn sum_of_squares_is_exact() {
        let mut ps = ParamSet::new();
        ps.insert("x", Tensor::new(vec![4], vec![0.3, -1.2, 2.0, 0.01]).unwrap().into_param());
        let report = grad_check(&ps, &GradCheckOptions::default(), |p, need| {
            let x = p.get("x")?.data();
            let v = x.iter().map(|a| a * a).sum();
            let g = need.then(|| BTreeMap::from([("x".to_string(), x.iter().map(|a| 2.0 * a).collect())]));
            Ok((v, g))
        })
        .unwrap();
        assert!(report.max_rel_error <= 1e-8, "{report:?}");
        assert_eq!(report.coords_checked, 4);
    }

    #[test]
    fn wrong_gradient_is_reported() {
        let mut ps = ParamSet::new();
        ps.insert("x", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().into_param());
        let report = grad_check(&ps, &GradCheckOptions::default(), |p, need| {
            let x = p.get("x")?.data();
            let v = x.iter().map(|a| a * a).sum();
            let g = need.then(|| BTreeMap::from([("x".to_string(), x.iter().map(|a| 2.1 * a).collect())]));
            Ok((v, g))
        })
        .unwrap();
        assert!(report.max_rel_error > 1e-3);
    }

    #[test]
    fn non_finite_objective_errors() {
        let mut ps = ParamSet::new();
        ps.insert("x", Tensor::new(vec![1], vec![0.0]).unwrap().into_param());
        let res = grad_check(&ps, &GradCheckOptions::default(), |p, need| {
            let x = p.get("x")?.data()[0];
            Ok((1.0 / x, need.then(BTreeMap::new)))
        });
        assert!(matches!(res, Err(Error::NonFinite(_))));
    }

    #[test]
    fn default_step() {
        assert_eq!(GradCheckOptions::default().step, 1e-5);
    }
}
