//! Central-difference gradient verification.
//!
//! The harness re-evaluates the captured forward pass at `w +- h` one
//! parameter coordinate at a time and compares the numeric slope with the
//! analytic gradient. Coordinates whose perturbation changes the network's
//! branch fingerprint (a ReLU flipping sign, a pool picking a different
//! winner) sit on a kink where the two-sided difference is meaningless;
//! those are skipped and counted instead of failed.

use crate::error::{Error, Result};

use super::tensor::Tensor;

/// One evaluation of the loss at a given parameter setting.
pub struct ForwardEval {
    pub loss: f64,
    /// Analytic gradients per parameter; only read when requested.
    pub grads: Vec<Option<Tensor<f64>>>,
    /// Branch-decision fingerprint of the forward pass.
    pub fingerprint: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Cap on coordinates checked per tensor; the rest are stride-sampled.
    pub max_coords: usize,
    /// Absolute differences below this count as agreement regardless of
    /// scale. Central differences bottom out at roundoff of the loss over
    /// 2h (about 1e-10 here); demanding relative agreement from gradients
    /// that small only measures that noise.
    pub atol: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            max_coords: usize::MAX,
            atol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
    /// (param index, element index, analytic, numeric) of the worst pair.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    fn observe(&mut self, param: usize, index: usize, analytic: f64, numeric: f64, atol: f64) {
        self.checked += 1;
        let diff = (analytic - numeric).abs();
        if diff < atol {
            return;
        }
        let rel = diff / analytic.abs().max(numeric.abs());
        if rel > self.max_rel_err {
            self.max_rel_err = rel;
            self.worst = Some((param, index, analytic, numeric));
        }
    }
}

/// Compare `eval`'s analytic gradients against central differences around
/// `params`. `eval(ps, true)` must fill `grads`; `eval(ps, false)` may leave
/// it empty. The fingerprint must be reported either way.
pub fn check_gradients<F>(
    params: &[Tensor<f64>],
    cfg: &GradCheckConfig,
    mut eval: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor<f64>], bool) -> Result<ForwardEval>,
{
    if cfg.step <= 0.0 || !cfg.step.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step must be positive, got {}",
            cfg.step
        )));
    }
    let base = eval(params, true)?;
    if base.grads.len() != params.len() {
        return Err(Error::InvalidArgument(format!(
            "eval returned {} gradients for {} parameters",
            base.grads.len(),
            params.len()
        )));
    }
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut report = GradCheckReport::default();
    for pi in 0..params.len() {
        let n = params[pi].numel();
        let picks = n.min(cfg.max_coords);
        for i in 0..picks {
            // Stride sampling; staggered by parameter index so repeated
            // runs over many tensors do not all probe offset zero.
            let ci = if picks == n {
                i
            } else {
                (i * n + (pi * 31) % n.div_ceil(picks).max(1)) / picks
            };
            let orig = work[pi].data()[ci];
            work[pi].data_mut()[ci] = orig + cfg.step;
            let plus = eval(&work, false)?;
            work[pi].data_mut()[ci] = orig - cfg.step;
            let minus = eval(&work, false)?;
            work[pi].data_mut()[ci] = orig;
            if plus.fingerprint != base.fingerprint || minus.fingerprint != base.fingerprint {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (plus.loss - minus.loss) / (2.0 * cfg.step);
            let analytic = base.grads[pi].as_ref().map_or(0.0, |g| g.data()[ci]);
            report.observe(pi, ci, analytic, numeric, cfg.atol);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic(ps: &[Tensor<f64>], want_grads: bool) -> Result<ForwardEval> {
        let loss: f64 = ps[0].data().iter().map(|&v| (v - 1.0) * (v - 1.0)).sum();
        let grads = if want_grads {
            let g: Vec<f64> = ps[0].data().iter().map(|&v| 2.0 * (v - 1.0)).collect();
            vec![Some(Tensor::from_vec(ps[0].shape(), g).unwrap())]
        } else {
            Vec::new()
        };
        Ok(ForwardEval {
            loss,
            grads,
            fingerprint: 0,
        })
    }

    #[test]
    fn quadratic_gradient_matches_to_machine_precision() {
        let params = vec![Tensor::from_vec(&[4], vec![0.3, -2.0, 1.5, 4.0]).unwrap()];
        let report = check_gradients(&params, &GradCheckConfig::default(), quadratic).unwrap();
        assert_eq!(report.checked, 4);
        assert_eq!(report.skipped_kinks, 0);
        assert!(report.max_rel_err < 1e-8, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn wrong_gradient_is_flagged() {
        let params = vec![Tensor::from_vec(&[2], vec![0.5, 2.0]).unwrap()];
        let bad = |ps: &[Tensor<f64>], want: bool| {
            let mut e = quadratic(ps, want)?;
            if want {
                for g in e.grads[0].as_mut().unwrap().data_mut() {
                    *g *= 2.0;
                }
            }
            Ok(e)
        };
        let report = check_gradients(&params, &GradCheckConfig::default(), bad).unwrap();
        assert!(report.max_rel_err > 0.4, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn fingerprint_change_skips_the_kink_coordinate() {
        // f(w) = sum relu(w); coordinate 0 sits closer to zero than the
        // step, so the +-h evaluations land on different sides.
        let params = vec![Tensor::from_vec(&[3], vec![5e-6, 1.0, -1.0]).unwrap()];
        let relu_sum = |ps: &[Tensor<f64>], want: bool| {
            let loss: f64 = ps[0].data().iter().map(|&v| v.max(0.0)).sum();
            let mut fp = 0u64;
            for &v in ps[0].data() {
                fp = (fp << 1) | (v > 0.0) as u64;
            }
            let grads = if want {
                let g: Vec<f64> = ps[0]
                    .data()
                    .iter()
                    .map(|&v| if v > 0.0 { 1.0 } else { 0.0 })
                    .collect();
                vec![Some(Tensor::from_vec(&[3], g).unwrap())]
            } else {
                Vec::new()
            };
            Ok(ForwardEval {
                loss,
                grads,
                fingerprint: fp,
            })
        };
        let cfg = GradCheckConfig {
            step: 1e-5,
            ..GradCheckConfig::default()
        };
        let report = check_gradients(&params, &cfg, relu_sum).unwrap();
        assert_eq!(report.skipped_kinks, 1);
        assert_eq!(report.checked, 2);
        assert!(report.max_rel_err < 1e-9);
    }

    #[test]
    fn coordinate_subsampling_respects_the_cap() {
        let params = vec![Tensor::from_vec(&[10], (0..10).map(|i| i as f64).collect()).unwrap()];
        let cfg = GradCheckConfig {
            max_coords: 3,
            ..GradCheckConfig::default()
        };
        let report = check_gradients(&params, &cfg, quadratic).unwrap();
        assert_eq!(report.checked, 3);
        assert!(report.max_rel_err < 1e-8);
    }
}
