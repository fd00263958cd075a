//! Dynamic routing-by-agreement between primary capsules of a temporally pooled
//! feature map and one class capsule per action class.

use ndarray::{Array1, Array2, Array4, ArrayView1, IxDyn};

use crate::autograd::{Tape, Tensor, Var};

pub(crate) struct Routed<'t> {
    pub class_caps: Var<'t>,
    pub couplings: Vec<Var<'t>>,
}

/// `poses: [N, d_in]` (already squashed), `weight: [n_types, K, d_in, d_out]`.
pub(crate) fn route_on_tape<'t>(poses: Var<'t>, weight: Var<'t>, iters: usize) -> Routed<'t> {
    let tape = poses.tape();
    let n = poses.shape()[0];
    let k = weight.shape()[1];
    let votes = poses.capsule_votes(weight);
    let mut logits = tape.constant(Tensor::zeros(IxDyn(&[n, k])));
    let mut couplings = Vec::with_capacity(iters);
    let mut caps = None;
    for it in 0..iters {
        let c = logits.softmax_last();
        couplings.push(c);
        let v = c.routed_sum(votes).squash();
        if it + 1 < iters {
            logits = logits.add(votes.agreement(v));
        }
        caps = Some(v);
    }
    Routed {
        class_caps: caps.expect("at least one routing iteration"),
        couplings,
    }
}

#[derive(Debug, Clone)]
pub struct CapsuleOutput {
    /// `[K, d_out]` class capsule poses.
    pub class_caps: Array2<f64>,
    /// Class confidences: capsule lengths, in `[0, 1)`.
    pub scores: Array1<f64>,
    /// Coupling coefficients `[N, K]` used at each routing iteration.
    pub couplings: Vec<Array2<f64>>,
}

/// Routes primary capsules `[N, d_in]` to class capsules with `iters` rounds of
/// agreement. Capsule `i` uses transform `weight[i mod n_types]`.
pub fn route_capsules_2d(primary_poses: &Array2<f64>, weight: &Array4<f64>, iters: usize) -> CapsuleOutput {
    assert!(iters >= 1, "routing needs at least one iteration");
    let tape = Tape::new();
    let poses = tape.constant(primary_poses.clone().into_dyn());
    let w = tape.constant(weight.clone().into_dyn());
    let routed = route_on_tape(poses, w, iters);
    let to2 = |v: &Var<'_>| v.value().clone().into_dimensionality::<ndarray::Ix2>().expect("rank 2");
    let class_caps = to2(&routed.class_caps);
    let scores = class_caps.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    CapsuleOutput {
        class_caps,
        scores,
        couplings: routed.couplings.iter().map(to2).collect(),
    }
}

/// `squash(s) = (|s|^2 / (1 + |s|^2)) · s / |s|`, with `squash(0) = 0`.
pub fn squash(s: ArrayView1<'_, f64>) -> Array1<f64> {
    let n = s.dot(&s).sqrt();
    if n == 0.0 {
        return Array1::zeros(s.len());
    }
    s.mapv(|v| v * n / (1.0 + n * n))
}
