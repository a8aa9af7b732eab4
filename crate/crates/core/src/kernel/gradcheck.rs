//! Central finite-difference verification of analytic gradients.

use super::network::Sequential;
use super::params::{Grads, ParamStore};
use super::tensor::{Scalar, Tensor};
use crate::error::Result;

/// Something with a scalar loss over a parameter store.
pub trait Objective<F: Scalar> {
    fn loss(&self, params: &ParamStore<F>) -> Result<f64>;
    fn loss_and_grads(&self, params: &ParamStore<F>) -> Result<(f64, Grads<F>)>;
}

/// A network under a fixed linear read-out: the loss is `<proj, net(x)>`.
/// The input itself is checked as parameter [`NetworkObjective::INPUT`].
pub struct NetworkObjective<'a> {
    pub net: &'a Sequential,
    pub proj: Tensor<f64>,
}

impl NetworkObjective<'_> {
    pub const INPUT: &'static str = "input";
}

impl Objective<f64> for NetworkObjective<'_> {
    fn loss(&self, params: &ParamStore<f64>) -> Result<f64> {
        let y = self.net.predict(params, params.get(Self::INPUT)?)?;
        Ok(y.data().iter().zip(self.proj.data()).map(|(a, b)| a * b).sum())
    }

    fn loss_and_grads(&self, params: &ParamStore<f64>) -> Result<(f64, Grads<f64>)> {
        let trace = self.net.forward(params, params.get(Self::INPUT)?)?;
        let loss = trace.output().data().iter().zip(self.proj.data()).map(|(a, b)| a * b).sum();
        let mut grads = Grads::new();
        let dx = self.net.backward(params, &trace, self.proj.clone(), &mut grads)?;
        grads.accumulate(Self::INPUT, &dx)?;
        Ok((loss, grads))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Central-difference half step.
    pub step: f64,
    /// Maximum tolerated relative error.
    pub tolerance: f64,
    /// Denominator floor, so vanishing gradients are compared absolutely.
    pub abs_floor: f64,
    /// Check at most this many entries per tensor (evenly strided).
    pub max_entries: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-3,
            tolerance: 1e-4,
            abs_floor: 1e-2,
            max_entries: 64,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }

    /// Names of parameters whose worst entry exceeds the tolerance.
    pub fn failures(&self) -> Vec<&str> {
        self.params
            .iter()
            .filter(|p| !(p.max_rel_error <= self.tolerance))
            .map(|p| p.name.as_str())
            .collect()
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for p in &self.params {
            writeln!(
                f,
                "{:<24} max rel err {:.3e} at [{}] (analytic {:.6e}, numeric {:.6e})",
                p.name, p.max_rel_error, p.worst_index, p.analytic, p.numeric
            )?;
        }
        Ok(())
    }
}

/// Compares `obj`'s analytic gradients with central finite differences at `params`.
pub fn grad_check<F: Scalar, O: Objective<F>>(
    obj: &O,
    params: &ParamStore<F>,
    cfg: GradCheckConfig,
) -> Result<GradCheckReport> {
    let (_, grads) = obj.loss_and_grads(params)?;
    let mut probe = params.clone();
    let names: Vec<String> = params.names().cloned().collect();
    let mut checks = Vec::new();
    for name in names {
        let n = params.get(&name)?.len();
        let stride = n.div_ceil(cfg.max_entries.max(1)).max(1);
        let analytic = grads.get(&name);
        let mut worst = ParamCheck {
            name: name.clone(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for idx in (0..n).step_by(stride) {
            let orig = params.get(&name)?.data()[idx];
            probe.get_mut(&name)?.data_mut()[idx] = F::narrow(orig.widen() + cfg.step);
            let up = obj.loss(&probe)?;
            probe.get_mut(&name)?.data_mut()[idx] = F::narrow(orig.widen() - cfg.step);
            let down = obj.loss(&probe)?;
            probe.get_mut(&name)?.data_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * cfg.step);
            let a = analytic.map_or(0.0, |g| g.data()[idx].widen());
            let scale = a.abs().max(numeric.abs()).max(cfg.abs_floor);
            let rel = (a - numeric).abs() / scale;
            if !(rel <= worst.max_rel_error) {
                worst.max_rel_error = rel;
                worst.worst_index = idx;
                worst.analytic = a;
                worst.numeric = numeric;
            }
        }
        checks.push(worst);
    }
    Ok(GradCheckReport {
        tolerance: cfg.tolerance,
        params: checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::Tensor;

    struct Square;

    impl Objective<f64> for Square {
        fn loss(&self, p: &ParamStore<f64>) -> Result<f64> {
            let x = p.get("x")?.data()[0];
            Ok(x * x)
        }
        fn loss_and_grads(&self, p: &ParamStore<f64>) -> Result<(f64, Grads<f64>)> {
            let x = p.get("x")?.data()[0];
            let mut g = Grads::new();
            g.accumulate("x", &Tensor::scalar(2.0 * x))?;
            Ok((x * x, g))
        }
    }

    #[test]
    fn scalar_square_at_three() {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::scalar(3.0));
        let report = grad_check(&Square, &p, GradCheckConfig::default()).unwrap();
        assert!(report.passed());
        let c = &report.params[0];
        assert!((c.analytic - 6.0).abs() < 1e-12);
        assert!((c.numeric - 6.0).abs() < 1e-4);
    }
}
