//! Supervised and consistency losses, each with a plain-value form and a
//! differentiable form on the tape, plus the mode-dependent combination.

mod masks;

pub use masks::{
    gradient_mask, gradient_mask_padded, gradient_raw, normalize_mask, variance_mask, variance_raw, AttentionMask,
    MaskKind, NORMALIZE_EPS,
};

use ndarray::{Array1, Array3, ArrayView1, IxDyn, Zip};
use serde::{Deserialize, Serialize};

use crate::autograd::{scalar, Tensor, Var};
use crate::{Error, Result};

pub const DICE_EPS: f64 = 1e-6;
const PROB_FLOOR: f64 = 1e-12;

/// Training objective selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Supervised,
    SemiCc,
    SemiLc,
    SemiVar,
    SemiGrad,
    SemiBoth,
}

impl Mode {
    pub const ALL: [Mode; 6] = [
        Mode::Supervised,
        Mode::SemiCc,
        Mode::SemiLc,
        Mode::SemiVar,
        Mode::SemiGrad,
        Mode::SemiBoth,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Supervised => "supervised",
            Mode::SemiCc => "semi-cc",
            Mode::SemiLc => "semi-lc",
            Mode::SemiVar => "semi-var",
            Mode::SemiGrad => "semi-grad",
            Mode::SemiBoth => "semi-both",
        }
    }

    pub fn uses_cc(self) -> bool {
        matches!(self, Mode::SemiCc | Mode::SemiBoth)
    }

    /// Localization consistency variant, if the mode has one.
    pub fn loc_variant(self, both: LocVariant) -> Option<LocVariant> {
        match self {
            Mode::Supervised | Mode::SemiCc => None,
            Mode::SemiLc => Some(LocVariant::Plain),
            Mode::SemiVar => Some(LocVariant::Variance),
            Mode::SemiGrad => Some(LocVariant::Gradient),
            Mode::SemiBoth => Some(both),
        }
    }

    pub fn uses_lc(self) -> bool {
        !matches!(self, Mode::Supervised | Mode::SemiCc)
    }

    pub fn is_semi(self) -> bool {
        self != Mode::Supervised
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?}")))
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LocVariant {
    /// Unweighted L2.
    Plain,
    /// Variance-attention blend with plain L2.
    Variance,
    /// Second-derivative attention.
    Gradient,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginParams {
    pub m_plus: f64,
    pub m_minus: f64,
    pub down_weight: f64,
}

impl Default for MarginParams {
    fn default() -> Self {
        MarginParams {
            m_plus: 0.9,
            m_minus: 0.1,
            down_weight: 0.5,
        }
    }
}

fn check_label(k: usize, label: usize) -> Result<()> {
    if label >= k {
        return Err(Error::InvalidArgument(format!("label {label} out of range for {k} classes")));
    }
    Ok(())
}

pub fn margin_loss(scores: ArrayView1<'_, f64>, label: usize, p: MarginParams) -> Result<f64> {
    check_label(scores.len(), label)?;
    Ok(scores
        .iter()
        .enumerate()
        .map(|(k, &s)| {
            if k == label {
                (p.m_plus - s).max(0.0).powi(2)
            } else {
                p.down_weight * (s - p.m_minus).max(0.0).powi(2)
            }
        })
        .sum())
}

pub fn margin_loss_tape<'t>(scores: Var<'t>, label: usize, p: MarginParams) -> Result<Var<'t>> {
    let k = scores.shape()[0];
    check_label(k, label)?;
    let tape = scores.tape();
    let onehot = Tensor::from_shape_fn(IxDyn(&[k]), |i| if i[0] == label { 1.0 } else { 0.0 });
    let others = onehot.mapv(|v| p.down_weight * (1.0 - v));
    let pos = scores.scale(-1.0).add_scalar(p.m_plus).relu().square().mul(tape.constant(onehot));
    let neg = scores.add_scalar(-p.m_minus).relu().square().mul(tape.constant(others));
    Ok(pos.add(neg).sum())
}

fn check_same(a: &[usize], b: &[usize], what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{what}: shapes {a:?} and {b:?} differ")));
    }
    Ok(())
}

fn bce_dice_parts(pred: &[f64], gt: &[f64]) -> (f64, f64, f64, f64) {
    let n = pred.len() as f64;
    let mut bce = 0.0;
    let (mut spg, mut sp, mut sg) = (0.0, 0.0, 0.0);
    for (&p, &g) in pred.iter().zip(gt) {
        let pc = p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
        bce -= g * pc.ln() + (1.0 - g) * (1.0 - pc).ln();
        spg += p * g;
        sp += p;
        sg += g;
    }
    (bce / n, spg, sp, sg)
}

/// Mean binary cross-entropy plus soft dice loss with `ε = 1e-6`.
pub fn bce_dice_loss(pred: &Array3<f64>, gt: &Array3<f64>) -> Result<f64> {
    check_same(pred.shape(), gt.shape(), "bce_dice")?;
    let p: Vec<f64> = pred.iter().copied().collect();
    let g: Vec<f64> = gt.iter().copied().collect();
    let (bce, spg, sp, sg) = bce_dice_parts(&p, &g);
    Ok(bce + 1.0 - (2.0 * spg + DICE_EPS) / (sp + sg + DICE_EPS))
}

pub fn bce_dice_tape<'t>(pred: Var<'t>, gt: &Array3<f64>) -> Result<Var<'t>> {
    check_same(&pred.shape(), gt.shape(), "bce_dice")?;
    let g: Vec<f64> = gt.iter().copied().collect();
    let value = {
        let p = pred.value();
        let (bce, spg, sp, sg) = bce_dice_parts(p.as_slice().expect("standard layout"), &g);
        bce + 1.0 - (2.0 * spg + DICE_EPS) / (sp + sg + DICE_EPS)
    };
    Ok(pred.tape().record(
        &[pred],
        scalar(value),
        Box::new(move |c| {
            let up = c.grad.iter().next().copied().unwrap_or(0.0);
            let p = c.inputs[0].as_slice().expect("standard layout");
            let (_, spg, sp, sg) = bce_dice_parts(p, &g);
            let n = p.len() as f64;
            let num = 2.0 * spg + DICE_EPS;
            let den = sp + sg + DICE_EPS;
            let grad: Vec<f64> = p
                .iter()
                .zip(&g)
                .map(|(&pi, &gi)| {
                    let pc = pi.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
                    let dbce = if pi == pc { (pc - gi) / (pc * (1.0 - pc)) / n } else { 0.0 };
                    let ddice = -(2.0 * gi * den - num) / (den * den);
                    up * (dbce + ddice)
                })
                .collect();
            vec![Some(Tensor::from_shape_vec(c.inputs[0].raw_dim(), grad).expect("shape"))]
        }),
    ))
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn xlogx(x: f64) -> f64 {
    if x > 0.0 {
        x * x.ln()
    } else {
        0.0
    }
}

/// Jensen-Shannon divergence in nats between two probability vectors.
pub fn jsd_probs(p: &[f64], q: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let m = 0.5 * (a + b);
        acc += 0.5 * xlogx(a) + 0.5 * xlogx(b) - xlogx(m);
    }
    // rounding can push the sum a few ulps outside [0, ln 2]
    acc.clamp(0.0, std::f64::consts::LN_2)
}

fn check_features(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape(format!("feature lengths {} and {}", a.len(), b.len())));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite features in consistency loss".into()));
    }
    Ok(())
}

/// JSD between the softmax distributions of two feature vectors.
pub fn jsd_consistency(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> Result<f64> {
    let (a, b) = (a.to_vec(), b.to_vec());
    check_features(&a, &b)?;
    Ok(jsd_probs(&softmax(&a), &softmax(&b)))
}

/// Mean JSD over paired rows.
pub fn jsd_consistency_batch(a: &[Array1<f64>], b: &[Array1<f64>]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape("jsd batch sizes differ or are empty".into()));
    }
    let mut total = 0.0;
    for (x, y) in a.iter().zip(b) {
        total += jsd_consistency(x.view(), y.view())?;
    }
    Ok(total / a.len() as f64)
}

/// Gradient of `JSD(softmax(x), softmax(y))` with respect to `x`.
fn jsd_grad_side(p: &[f64], q: &[f64]) -> Vec<f64> {
    // dJ/dp_i = ½ ln(p_i / m_i), then through the softmax Jacobian
    let g: Vec<f64> = p
        .iter()
        .zip(q)
        .map(|(&a, &b)| if a > 0.0 { 0.5 * (a / (0.5 * (a + b))).ln() } else { 0.0 })
        .collect();
    let dot: f64 = p.iter().zip(&g).map(|(a, b)| a * b).sum();
    p.iter().zip(&g).map(|(&pi, &gi)| pi * (gi - dot)).collect()
}

pub fn jsd_tape<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    let value = {
        let (x, y) = (a.value(), b.value());
        let (xs, ys) = (x.as_slice().expect("standard"), y.as_slice().expect("standard"));
        check_features(xs, ys)?;
        jsd_probs(&softmax(xs), &softmax(ys))
    };
    Ok(a.tape().record(
        &[a, b],
        scalar(value),
        Box::new(|c| {
            let up = c.grad.iter().next().copied().unwrap_or(0.0);
            let p = softmax(c.inputs[0].as_slice().expect("standard"));
            let q = softmax(c.inputs[1].as_slice().expect("standard"));
            let side = |p: &[f64], q: &[f64], shape: &Tensor| {
                let g: Vec<f64> = jsd_grad_side(p, q).into_iter().map(|v| up * v).collect();
                Tensor::from_shape_vec(shape.raw_dim(), g).expect("shape")
            };
            vec![
                c.needs[0].then(|| side(&p, &q, c.inputs[0])),
                c.needs[1].then(|| side(&q, &p, c.inputs[1])),
            ]
        }),
    ))
}

fn valid_count(valid: &Array3<f64>) -> Result<f64> {
    let n: f64 = valid.iter().filter(|&&v| v > 0.0).count() as f64;
    if n == 0.0 {
        return Err(Error::InvalidArgument("consistency loss over zero valid pixels".into()));
    }
    Ok(n)
}

/// `Σ weight·(a − b)² / #valid`, with `weight` already including validity.
fn weighted_sq_mean(a: &Array3<f64>, b: &Array3<f64>, weight: &Array3<f64>, n_valid: f64) -> f64 {
    let mut acc = 0.0;
    Zip::from(a).and(b).and(weight).for_each(|&x, &y, &w| acc += w * (x - y) * (x - y));
    acc / n_valid
}

fn check_maps(a: &Array3<f64>, b: &Array3<f64>, valid: &Array3<f64>, mask: Option<&Array3<f64>>) -> Result<()> {
    check_same(a.shape(), b.shape(), "consistency")?;
    check_same(a.shape(), valid.shape(), "validity mask")?;
    if let Some(m) = mask {
        check_same(a.shape(), m.shape(), "attention mask")?;
    }
    Ok(())
}

/// Mean over valid pixels of `(a − b)²`.
pub fn l2_consistency(a: &Array3<f64>, b: &Array3<f64>, valid: &Array3<f64>) -> Result<f64> {
    check_maps(a, b, valid, None)?;
    Ok(weighted_sq_mean(a, b, valid, valid_count(valid)?))
}

/// `w·mean_valid(mask·sq) + (1 − w)·mean_valid(sq)`.
pub fn coherence_loss(a: &Array3<f64>, b: &Array3<f64>, valid: &Array3<f64>, mask: &Array3<f64>, w: f64) -> Result<f64> {
    check_maps(a, b, valid, Some(mask))?;
    check_unit("w", w)?;
    let n = valid_count(valid)?;
    Ok(w * weighted_sq_mean(a, b, &(valid * mask), n) + (1.0 - w) * weighted_sq_mean(a, b, valid, n))
}

/// `mean_valid(mask·sq)`.
pub fn gradient_smoothness_loss(a: &Array3<f64>, b: &Array3<f64>, valid: &Array3<f64>, mask: &Array3<f64>) -> Result<f64> {
    check_maps(a, b, valid, Some(mask))?;
    Ok(weighted_sq_mean(a, b, &(valid * mask), valid_count(valid)?))
}

fn check_unit(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::InvalidArgument(format!("{name} must lie in [0, 1], got {v}")));
    }
    Ok(())
}

fn weighted_sq_mean_tape<'t>(a: Var<'t>, b: Var<'t>, weight: Array3<f64>, n_valid: f64) -> Var<'t> {
    let w = a.tape().constant(weight.into_dyn());
    a.sub(b).square().mul(w).sum().scale(1.0 / n_valid)
}

fn check_vars(a: Var<'_>, b: Var<'_>, valid: &Array3<f64>, mask: Option<&Array3<f64>>) -> Result<()> {
    let (sa, sb) = (a.shape(), b.shape());
    check_same(&sa, &sb, "consistency")?;
    check_same(&sa, valid.shape(), "validity mask")?;
    if let Some(m) = mask {
        check_same(&sa, m.shape(), "attention mask")?;
    }
    Ok(())
}

pub fn l2_consistency_tape<'t>(a: Var<'t>, b: Var<'t>, valid: &Array3<f64>) -> Result<Var<'t>> {
    check_vars(a, b, valid, None)?;
    Ok(weighted_sq_mean_tape(a, b, valid.clone(), valid_count(valid)?))
}

pub fn coherence_loss_tape<'t>(a: Var<'t>, b: Var<'t>, valid: &Array3<f64>, mask: &Array3<f64>, w: f64) -> Result<Var<'t>> {
    check_vars(a, b, valid, Some(mask))?;
    check_unit("w", w)?;
    let n = valid_count(valid)?;
    let weight = (valid * mask).mapv(|m| w * m) + valid.mapv(|v| (1.0 - w) * v);
    Ok(weighted_sq_mean_tape(a, b, weight, n))
}

pub fn gradient_smoothness_loss_tape<'t>(a: Var<'t>, b: Var<'t>, valid: &Array3<f64>, mask: &Array3<f64>) -> Result<Var<'t>> {
    check_vars(a, b, valid, Some(mask))?;
    Ok(weighted_sq_mean_tape(a, b, valid * mask, valid_count(valid)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub w: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: 0.1,
            lambda1: 0.3,
            lambda2: 0.7,
            w: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda", self.lambda), ("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be non-negative, got {v}")));
            }
        }
        check_unit("w", self.w)
    }
}

/// Loss components of one step, in the JSON-lines log layout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub step: u64,
    #[serde(rename = "L_sup_cls")]
    pub sup_cls: f64,
    #[serde(rename = "L_sup_loc")]
    pub sup_loc: f64,
    #[serde(rename = "L_cc")]
    pub cc: f64,
    #[serde(rename = "L_lc")]
    pub lc: f64,
    pub w: f64,
    pub lambda: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn components(&self) -> [(&'static str, f64); 5] {
        [
            ("L_sup_cls", self.sup_cls),
            ("L_sup_loc", self.sup_loc),
            ("L_cc", self.cc),
            ("L_lc", self.lc),
            ("total", self.total),
        ]
    }
}

/// Multipliers of `(cc, lc)` in the total under `mode`.
fn consistency_factors(weights: &LossWeights, mode: Mode) -> (f64, f64) {
    let cc = if mode.uses_cc() { weights.lambda * weights.lambda1 } else { 0.0 };
    let lc = if mode.uses_lc() {
        weights.lambda * weights.lambda2
    } else {
        0.0
    };
    (cc, lc)
}

/// `(L_cls + L_loc) + λ(λ₁·L_cc + λ₂·L_lc)` with the terms the mode excludes
/// zeroed in the breakdown.
pub fn total_loss(sup_cls: f64, sup_loc: f64, cc: f64, lc: f64, weights: &LossWeights, mode: Mode) -> Result<LossBreakdown> {
    weights.validate()?;
    let (fc, fl) = consistency_factors(weights, mode);
    let cc = if mode.uses_cc() { cc } else { 0.0 };
    let lc = if mode.uses_lc() { lc } else { 0.0 };
    let mut total = sup_cls + sup_loc;
    if mode.is_semi() {
        total += fc * cc + fl * lc;
    }
    Ok(LossBreakdown {
        step: 0,
        sup_cls,
        sup_loc,
        cc,
        lc,
        w: weights.w,
        lambda: weights.lambda,
        total,
    })
}

/// Differentiable counterpart of [`total_loss`]; `None` terms are absent.
pub fn total_loss_tape<'t>(
    sup: Var<'t>,
    cc: Option<Var<'t>>,
    lc: Option<Var<'t>>,
    weights: &LossWeights,
    mode: Mode,
) -> Result<Var<'t>> {
    weights.validate()?;
    let (fc, fl) = consistency_factors(weights, mode);
    let mut total = sup;
    if let (Some(c), true) = (cc, mode.uses_cc()) {
        total = total.add(c.scale(fc));
    }
    if let (Some(l), true) = (lc, mode.uses_lc()) {
        total = total.add(l.scale(fl));
    }
    Ok(total)
}
