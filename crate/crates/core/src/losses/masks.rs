//! Detached attention masks over localization sequences: temporal variance
//! in a sliding window and the magnitude of the second temporal derivative.

use ndarray::{s, Array3, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const NORMALIZE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    Variance,
    Gradient,
}

/// Per-pixel weights in `[0, 1]`. Always built from plain values, so no
/// gradient can flow through it.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    pub weights: Array3<f64>,
    pub kind: MaskKind,
}

/// Per-clip min-max normalization with an epsilon guard.
pub fn normalize_mask(raw: &Array3<f64>) -> Array3<f64> {
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    raw.mapv(|v| (v - lo) / (hi - lo + NORMALIZE_EPS))
}

/// Variance over the window `[t - past, t + future]` at every frame.
/// Cyclic sequences wrap; otherwise indices are clamped to the ends.
pub fn variance_raw(seq: &Array3<f64>, past: usize, future: usize, cyclic: bool) -> Result<Array3<f64>> {
    let len = seq.shape()[0];
    let n = past + future + 1;
    if len == 0 {
        return Err(Error::Shape("variance mask of an empty sequence".into()));
    }
    if !cyclic && n > len {
        return Err(Error::InvalidArgument(format!(
            "window of {n} frames exceeds the {len}-frame sequence"
        )));
    }
    let index = |t: usize, k: usize| -> usize {
        let off = t as isize + k as isize - past as isize;
        if cyclic {
            off.rem_euclid(len as isize) as usize
        } else {
            off.clamp(0, len as isize - 1) as usize
        }
    };
    // Σ(n·xᵢ − Σx)² / n³ equals Σ(xᵢ − μ)² / n and keeps rational inputs exact
    let nf = n as f64;
    let mut out = Array3::zeros(seq.raw_dim());
    for t in 0..len {
        let frame = |k: usize| seq.slice(s![index(t, k)..index(t, k) + 1, .., ..]);
        let mut sum = Array3::<f64>::zeros((1, seq.shape()[1], seq.shape()[2]));
        for k in 0..n {
            sum += &frame(k);
        }
        let mut var = out.slice_mut(s![t..t + 1, .., ..]);
        for k in 0..n {
            Zip::from(&mut var).and(&frame(k)).and(&sum).for_each(|v, &x, &s| {
                let d = nf * x - s;
                *v += d * d;
            });
        }
        var /= nf * nf * nf;
    }
    Ok(out)
}

/// `|second central difference|` per pixel; the two frames at each end copy
/// the nearest interior value.
pub fn gradient_raw(seq: &Array3<f64>) -> Result<Array3<f64>> {
    let len = seq.shape()[0];
    if len < 5 {
        return Err(Error::InvalidArgument(format!(
            "gradient mask needs at least 5 frames, got {len}"
        )));
    }
    let d = (&seq.slice(s![2.., .., ..]) - &seq.slice(s![..len - 2, .., ..])) / 2.0;
    let dd = ((&d.slice(s![2.., .., ..]) - &d.slice(s![..len - 4, .., ..])) / 2.0).mapv(f64::abs);
    let mut out = Array3::zeros(seq.raw_dim());
    out.slice_mut(s![2..len - 2, .., ..]).assign(&dd);
    let first = dd.index_axis(Axis(0), 0).to_owned();
    let last = dd.index_axis(Axis(0), len - 5).to_owned();
    for t in [0, 1] {
        out.index_axis_mut(Axis(0), t).assign(&first);
    }
    for t in [len - 2, len - 1] {
        out.index_axis_mut(Axis(0), t).assign(&last);
    }
    Ok(out)
}

pub fn variance_mask(seq: &Array3<f64>, past: usize, future: usize, cyclic: bool) -> Result<AttentionMask> {
    Ok(AttentionMask {
        weights: normalize_mask(&variance_raw(seq, past, future, cyclic)?),
        kind: MaskKind::Variance,
    })
}

pub fn gradient_mask(seq: &Array3<f64>) -> Result<AttentionMask> {
    Ok(AttentionMask {
        weights: normalize_mask(&gradient_raw(seq)?),
        kind: MaskKind::Gradient,
    })
}

/// Gradient mask for sequences of any length: shorter ones are padded by
/// repeating their end frames up to five frames and the result is cropped back.
pub fn gradient_mask_padded(seq: &Array3<f64>) -> Result<AttentionMask> {
    let len = seq.shape()[0];
    if len >= 5 {
        return gradient_mask(seq);
    }
    if len == 0 {
        return Err(Error::Shape("gradient mask of an empty sequence".into()));
    }
    let pad = (5 - len).div_ceil(2);
    let mut frames = Vec::with_capacity(len + 2 * pad);
    frames.extend(std::iter::repeat_n(seq.slice(s![0..1, .., ..]), pad));
    frames.extend((0..len).map(|t| seq.slice(s![t..t + 1, .., ..])));
    frames.extend(std::iter::repeat_n(seq.slice(s![len - 1..len, .., ..]), pad));
    let padded = ndarray::concatenate(Axis(0), &frames).expect("equal frame shapes");
    let raw = gradient_raw(&padded)?;
    Ok(AttentionMask {
        weights: normalize_mask(&raw.slice(s![pad..pad + len, .., ..]).to_owned()),
        kind: MaskKind::Gradient,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq1(v: &[f64]) -> Array3<f64> {
        Array3::from_shape_vec((v.len(), 1, 1), v.to_vec()).unwrap()
    }

    #[test]
    fn variance_of_single_bump() {
        let r = variance_raw(&seq1(&[0.0, 1.0, 0.0]), 1, 1, false).unwrap();
        assert_eq!(r[[1, 0, 0]], 2.0 / 9.0);
    }

    #[test]
    fn impulse_second_derivative() {
        let r = gradient_raw(&seq1(&[0.0, 0.0, 1.0, 0.0, 0.0])).unwrap();
        assert_eq!(r[[2, 0, 0]], 0.5);
    }

    #[test]
    fn constant_sequences_give_zero_masks() {
        let c = Array3::from_elem((7, 2, 3), 0.37);
        assert!(variance_mask(&c, 2, 2, false).unwrap().weights.iter().all(|&v| v == 0.0));
        assert!(variance_mask(&c, 2, 2, true).unwrap().weights.iter().all(|&v| v == 0.0));
        assert!(gradient_mask(&c).unwrap().weights.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_ramp_has_no_curvature() {
        let r = gradient_raw(&Array3::from_shape_fn((8, 2, 2), |(t, y, x)| 0.1 * t as f64 * (1 + y + x) as f64)).unwrap();
        assert!(r.iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn cyclic_alternation_is_uniform() {
        let r = variance_raw(&seq1(&[0.2, 0.9, 0.2, 0.9]), 2, 2, true).unwrap();
        for t in 1..4 {
            assert!((r[[t, 0, 0]] - r[[0, 0, 0]]).abs() < 1e-15);
        }
    }

    #[test]
    fn window_errors() {
        assert!(variance_raw(&seq1(&[0.0, 1.0, 0.0, 1.0]), 2, 2, false).is_err());
        assert!(variance_raw(&seq1(&[0.0, 1.0]), 2, 2, true).is_ok());
        assert!(gradient_raw(&seq1(&[0.0, 1.0, 0.0, 1.0])).is_err());
        assert_eq!(gradient_mask_padded(&seq1(&[0.0, 1.0])).unwrap().weights.shape(), &[2, 1, 1]);
    }

    proptest! {
        #[test]
        fn masks_normalized_and_shift_invariant(len in 5usize..10, shift in -3.0f64..3.0, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let a = Array3::from_shape_fn((len, 2, 2), |_| rng.random::<f64>());
            let b = a.mapv(|v| v + shift);
            for cyclic in [false, true] {
                let (ra, rb) = (variance_raw(&a, 2, 2, cyclic).unwrap(), variance_raw(&b, 2, 2, cyclic).unwrap());
                prop_assert!(ra.iter().zip(rb.iter()).all(|(x, y)| (x - y).abs() < 1e-9));
                let m = variance_mask(&a, 2, 2, cyclic).unwrap().weights;
                prop_assert!(m.iter().all(|v| (0.0..=1.0).contains(v)));
            }
            let (ga, gb) = (gradient_raw(&a).unwrap(), gradient_raw(&b).unwrap());
            prop_assert!(ga.iter().zip(gb.iter()).all(|(x, y)| (x - y).abs() < 1e-9));
            prop_assert!(gradient_mask(&a).unwrap().weights.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
