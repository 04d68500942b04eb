//! Central finite differences against tape gradients.
//!
//! The builder is run three ways: on a transparent graph (stop-gradient
//! acts as identity), on a normal graph, and forward-only at perturbed
//! inputs. Finite differences are compared with the transparent gradient,
//! which is the true derivative of the forward function. Coordinates where
//! the normal gradient departs from the transparent one are reported as
//! intentional truncation rather than as failures.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Lower bound on the denominator of the relative error.
    pub scale_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            scale_floor: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coordinate {
    pub input: usize,
    pub index: usize,
    /// Gradient from the tape as built (with truncation).
    pub analytic: f64,
    /// Gradient from the transparent tape.
    pub untruncated: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub failures: Vec<Coordinate>,
    /// Coordinates whose tape gradient is cut by stop-gradient.
    pub truncated: Vec<Coordinate>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

fn rel_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn evaluate<F>(build: &F, inputs: &[Tensor], transparent: bool) -> Result<(Graph, Vec<Var>, Var)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = if transparent {
        Graph::transparent()
    } else {
        Graph::new()
    };
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    let v = g.value(loss).item()?;
    if !v.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {v}")));
    }
    Ok((g, vars, loss))
}

fn loss_at<F>(build: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let (g, _, loss) = evaluate(build, inputs, false)?;
    g.value(loss).item()
}

/// Checks every coordinate of every input. `build` must be deterministic:
/// noise masks have to be fixed (see [`crate::noise::Scripted`]).
pub fn grad_check<F>(build: F, inputs: &[Tensor], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let (tg, tvars, tloss) = evaluate(&build, inputs, true)?;
    let full = tg.backward(tloss)?;
    let (ng, nvars, nloss) = evaluate(&build, inputs, false)?;
    let cut = ng.backward(nloss)?;

    let mut report = GradCheckReport::default();
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let gf = full.wrt(tvars[k], input);
        let gc = cut.wrt(nvars[k], input);
        for i in 0..input.len() {
            let orig = input.data()[i];
            probe[k].data_mut()[i] = orig + cfg.step;
            let up = loss_at(&build, &probe)?;
            probe[k].data_mut()[i] = orig - cfg.step;
            let down = loss_at(&build, &probe)?;
            probe[k].data_mut()[i] = orig;

            let numeric = (up - down) / (2.0 * cfg.step);
            let coord = Coordinate {
                input: k,
                index: i,
                analytic: gc.data()[i],
                untruncated: gf.data()[i],
                numeric,
                rel_error: rel_error(gf.data()[i], numeric, cfg.scale_floor),
            };
            report.checked += 1;
            report.max_rel_error = report.max_rel_error.max(coord.rel_error);
            let is_cut = rel_error(coord.analytic, coord.untruncated, cfg.scale_floor) > cfg.tolerance;
            if coord.rel_error > cfg.tolerance {
                report.failures.push(coord);
            } else if is_cut {
                report.truncated.push(coord);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_loss_is_exact() {
        let x = Tensor::vector(&[0.3, -1.2, 2.0]);
        let r = grad_check(
            |g, v| {
                let y = g.scale(v[0], 3.0);
                g.sum(y)
            },
            &[x],
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(r.passed());
        assert!(r.max_rel_error < 1e-9, "{}", r.max_rel_error);
        assert!(r.truncated.is_empty());
    }

    #[test]
    fn truncation_is_labelled_not_failed() {
        let x = Tensor::vector(&[0.5, 1.5]);
        let r = grad_check(
            |g, v| {
                let s = g.stop_gradient(v[0]);
                let sq = g.square(s);
                let y = g.add(v[0], sq)?;
                g.sum(y)
            },
            &[x],
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(r.passed());
        assert_eq!(r.truncated.len(), 2);
        // analytic 1, true sensitivity 1 + 2x
        assert!((r.truncated[1].analytic - 1.0).abs() < 1e-12);
        assert!((r.truncated[1].numeric - 4.0).abs() < 1e-6);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        // relu at a kink: FD sees slope 1/2, tape says 0
        let x = Tensor::vector(&[0.0]);
        let r = grad_check(
            |g, v| {
                let y = g.relu(v[0]);
                g.sum(y)
            },
            &[x],
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(!r.passed());
    }

    #[test]
    fn non_finite_loss_is_numeric_error() {
        let x = Tensor::vector(&[-1.0]);
        let err = grad_check(
            |g, v| {
                let z = g.constant(Tensor::scalar(0.0));
                let y = g.div(v[0], z)?;
                g.sum(y)
            },
            &[x],
            &GradCheckConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }
}
