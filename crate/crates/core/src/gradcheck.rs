//! Central finite-difference gradient checking.

use alloc::string::String;
use alloc::vec::Vec;

use crate::autograd::{Graph, Var};
use crate::rng::Rng;
use crate::tensor::{ParamId, ParamStore};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub eps: f64,
    /// Fraction of all parameter coordinates that are probed.
    pub sample_fraction: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 1e-5,
            sample_fraction: 0.05,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateError {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Largest `|analytic - numeric|` over the sample.
    pub max_abs_error: f64,
    pub checked: usize,
    pub worst: Option<CoordinateError>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    libm::fabs(analytic - numeric) / f64::max(1e-8, libm::fabs(analytic) + libm::fabs(numeric))
}

fn eval<F>(params: &ParamStore, f: &mut F) -> Result<f64>
where
    F: FnMut(&mut Graph<'_>) -> Result<Var>,
{
    let mut g = Graph::new(params);
    let loss = f(&mut g)?;
    g.scalar(loss)
}

/// Compares the recorded backward pass of `f` against central differences on a
/// random sample of parameter coordinates. Parameter values are restored
/// afterwards; gradient buffers are left untouched.
pub fn grad_check<F>(params: &mut ParamStore, config: GradCheckConfig, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<'_>) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new(params);
        let loss = f(&mut g)?;
        g.backward(loss)?
    };

    let mut coords: Vec<(ParamId, usize)> = params
        .ids()
        .flat_map(|id| (0..params.value(id).len()).map(move |i| (id, i)))
        .collect();
    let mut rng = Rng::seed_from_u64(config.seed);
    rng.shuffle(&mut coords);
    let take = (libm::ceil(coords.len() as f64 * config.sample_fraction) as usize).clamp(1.min(coords.len()), coords.len());
    coords.truncate(take);
    coords.sort_unstable();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        checked: 0,
        worst: None,
    };
    for (id, index) in coords {
        let original = params.value(id).data()[index];
        params.value_mut(id).data_mut()[index] = original + config.eps;
        let plus = eval(params, &mut f);
        params.value_mut(id).data_mut()[index] = original - config.eps;
        let minus = eval(params, &mut f);
        params.value_mut(id).data_mut()[index] = original;
        let numeric = (plus? - minus?) / (2.0 * config.eps);
        let a = analytic.get(id).map_or(0.0, |g| g.data()[index]);
        let rel = relative_error(a, numeric);
        report.max_abs_error = f64::max(report.max_abs_error, libm::fabs(a - numeric));
        report.checked += 1;
        if report.worst.is_none() || rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some(CoordinateError {
                param: params.name(id).into(),
                index,
                analytic: a,
                numeric,
                rel_error: rel,
            });
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use alloc::vec;

    fn linear_fixture() -> (ParamStore, ParamId, ParamId, Tensor, Tensor) {
        let mut rng = Rng::seed_from_u64(11);
        let mut p = ParamStore::new();
        let w = p
            .add("w", Tensor::matrix(3, 2, (0..6).map(|_| rng.normal()).collect()).unwrap())
            .unwrap();
        let b = p.add("b", Tensor::row_vector(vec![0.1, -0.2])).unwrap();
        let x = Tensor::matrix(4, 3, (0..12).map(|_| rng.normal()).collect()).unwrap();
        let y = Tensor::matrix(4, 2, (0..8).map(|_| rng.normal()).collect()).unwrap();
        (p, w, b, x, y)
    }

    #[test]
    fn linear_squared_loss_is_exact() {
        let (mut p, w, b, x, y) = linear_fixture();
        let cfg = GradCheckConfig { sample_fraction: 1.0, ..Default::default() };
        let report = grad_check(&mut p, cfg, |g| {
            let xv = g.input(x.clone());
            let mut neg = y.clone();
            neg.scale(-1.0);
            let yv = g.input(neg);
            let (wv, bv) = (g.param(w), g.param(b));
            let pred = g.linear(xv, wv, bv)?;
            let r = g.add(pred, yv)?;
            g.sum_squares(r)
        })
        .unwrap();
        assert_eq!(report.checked, 8);
        assert!(report.max_rel_error < 1e-9, "{report:?}");
    }

    fn wrong_tanh_grad(x: f64) -> f64 {
        // Correct rule is 1 - tanh²; this fixture drops the square.
        1.0 - libm::tanh(x)
    }

    #[test]
    fn detects_corrupted_backward_rule() {
        let (mut p, w, b, x, _) = linear_fixture();
        let cfg = GradCheckConfig { sample_fraction: 1.0, ..Default::default() };
        let report = grad_check(&mut p, cfg, |g| {
            let xv = g.input(x.clone());
            let (wv, bv) = (g.param(w), g.param(b));
            let h = g.linear(xv, wv, bv)?;
            let t = g.map(h, libm::tanh, wrong_tanh_grad)?;
            g.sum_squares(t)
        })
        .unwrap();
        assert!(report.max_rel_error > 1e-2, "{report:?}");
    }

    #[test]
    fn values_are_restored() {
        let (mut p, w, b, x, _) = linear_fixture();
        let before = p.clone();
        grad_check(&mut p, GradCheckConfig::default(), |g| {
            let xv = g.input(x.clone());
            let (wv, bv) = (g.param(w), g.param(b));
            let h = g.linear(xv, wv, bv)?;
            g.sum(h)
        })
        .unwrap();
        assert_eq!(p, before);
    }
}
