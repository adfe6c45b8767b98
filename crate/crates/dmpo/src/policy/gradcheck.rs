//! Finite-difference verification of analytic gradients.

use rand::Rng;

use crate::error::Result;
use crate::policy::Policy;
use crate::rng::DmpoRng;

/// Outcome of one finite-difference sweep.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn pass(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

/// Compare the analytic gradient of `loss` against central differences on a
/// random subset of at most 256 parameters.
///
/// `loss` must be deterministic given the current parameters (seed any
/// internal randomness per call). It returns the scalar value and the full
/// analytic gradient; the finite-difference probes only use the value.
pub fn grad_check<F>(
    policy: &mut Policy,
    loss: F,
    eps: f64,
    tol: f64,
    rng: &mut DmpoRng,
) -> Result<GradCheckReport>
where
    F: Fn(&Policy) -> Result<(f64, Vec<f64>)>,
{
    let (_, analytic) = loss(policy)?;
    let n = policy.param_count();
    let subset: Vec<usize> = if n <= 256 {
        (0..n).collect()
    } else {
        // without replacement via partial shuffle
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..256 {
            let j = rng.gen_range(i..n);
            idx.swap(i, j);
        }
        idx.truncate(256);
        idx
    };

    let mut max_rel_err = 0.0f64;
    let mut worst_index = 0usize;
    for &i in &subset {
        let orig = policy.params().flat[i];
        policy.flat_mut()[i] = orig + eps;
        let (f_plus, _) = loss(policy)?;
        policy.flat_mut()[i] = orig - eps;
        let (f_minus, _) = loss(policy)?;
        policy.flat_mut()[i] = orig;

        let fd = (f_plus - f_minus) / (2.0 * eps);
        let a = analytic[i];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-3);
        if rel > max_rel_err {
            max_rel_err = rel;
            worst_index = i;
        }
    }

    Ok(GradCheckReport {
        checked: subset.len(),
        max_rel_err,
        worst_index,
        tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdm::Vocabulary;
    use crate::policy::tabular::TabularPolicy;
    use crate::rng::master;

    #[test]
    fn quadratic_probe_matches_exactly() {
        // f(theta) = sum theta^2 has analytic gradient 2*theta; central
        // differences are exact for quadratics up to roundoff.
        let vocab = Vocabulary::new(2).unwrap();
        let mut policy = TabularPolicy::init(1, 2, &vocab).unwrap().into_policy();
        for (i, w) in policy.flat_mut().iter_mut().enumerate() {
            *w = 0.1 * (i as f64) - 0.4;
        }
        let report = grad_check(
            &mut policy,
            |p| {
                let f: f64 = p.params().flat.iter().map(|x| x * x).sum();
                let g: Vec<f64> = p.params().flat.iter().map(|x| 2.0 * x).collect();
                Ok((f, g))
            },
            1e-5,
            1e-4,
            &mut master(0),
        )
        .unwrap();
        assert!(report.pass(), "max rel err {}", report.max_rel_err);
        assert!(report.max_rel_err < 1e-8);
    }
}
