//! Finite-difference gradient verification.
//!
//! Central differences at 64-bit precision against the analytic backward
//! pass. The checker drives any closure that maps leaf tensors to a scalar
//! loss on a fresh graph, so the same machinery covers single ops and whole
//! blocks. Used by the test suites and by the `gradcheck` CLI command.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{randn, Graph, NodeId, Shape, Tensor};

/// Default step for central differences.
pub const DEFAULT_EPS: f64 = 1e-4;
/// Default acceptance threshold on the relative error.
pub const DEFAULT_TOL: f64 = 1e-6;

/// Relative error with the floor used across the verification suites:
/// `|a-b| / max(|a|, |b|, 1e-8)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
    pub tol: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

/// Check the analytic gradient of `f` with respect to every entry of every
/// leaf in `inputs`.
///
/// `f` must rebuild the computation on the provided graph from the given
/// leaves and return the scalar loss node. Each invocation sees a fresh
/// graph, so the closure must not capture graph state.
pub fn check_gradients<F>(name: &str, inputs: &[Tensor<f64>], tol: f64, mut f: F) -> Result<GradCheck>
where
    F: FnMut(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let mut eval = |tensors: &[Tensor<f64>]| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut g = Graph::<f64>::new();
        let ids: Vec<NodeId> = tensors.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = f(&mut g, &ids)?;
        let value = g.value(loss).item();
        g.backward(loss)?;
        let grads = ids
            .iter()
            .map(|&id| g.grad(id).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; g.value(id).shape().count()]))
            .collect();
        Ok((value, grads))
    };

    let (_, analytic) = eval(inputs)?;

    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for ei in 0..input.shape().count() {
            let orig = input.data()[ei];
            work[ti].data_mut()[ei] = orig + DEFAULT_EPS;
            let (plus, _) = eval(&work)?;
            work[ti].data_mut()[ei] = orig - DEFAULT_EPS;
            let (minus, _) = eval(&work)?;
            work[ti].data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * DEFAULT_EPS);
            let err = rel_err(analytic[ti][ei], numeric);
            if err > max_rel {
                max_rel = err;
            }
            checked += 1;
        }
    }

    Ok(GradCheck {
        name: name.to_string(),
        max_rel_err: max_rel,
        checked,
        tol,
    })
}

/// Standard-normal tensor with every entry nudged away from zero, so relu
/// masks and smooth-L1 kinks sit on a flat piece during the fd sweep.
pub fn randn_away_from_kinks(shape: Shape, margin: f64, rng: &mut impl Rng) -> Tensor<f64> {
    let mut t = randn::<f64>(shape, rng);
    for v in t.data_mut() {
        if v.abs() < margin {
            *v = margin.copysign(*v + f64::MIN_POSITIVE);
        }
    }
    t
}
