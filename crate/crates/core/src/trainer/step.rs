use std::collections::BTreeMap;

use ndarray::{s, Array3, Ix3};

use crate::augment::{apply_to_clip, build_cyclic_sequence, AugRecord, Inversion};
use crate::autograd::{scalar, Tape, Tensor, Var};
use crate::dataio::BatchItem;
use crate::losses::{
    bce_dice_tape, coherence_loss_tape, gradient_mask_padded, gradient_smoothness_loss_tape, jsd_tape,
    l2_consistency_tape, margin_loss_tape, total_loss, total_loss_tape, variance_mask, LocVariant, LossBreakdown,
    LossWeights, MarginParams, Mode,
};
use crate::model::{forward_on_tape, BoundParams, ModelConfig, Params};
use crate::{Error, Result};

/// Loss settings of a single step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSettings {
    pub mode: Mode,
    pub weights: LossWeights,
    pub margin: MarginParams,
    pub window: usize,
    pub both: LocVariant,
}

/// Differentiable loss terms of one batch item.
pub struct ItemTerms<'t> {
    pub sup_cls: Option<Var<'t>>,
    pub sup_loc: Option<Var<'t>>,
    pub cc: Option<Var<'t>>,
    pub lc: Option<Var<'t>>,
    /// Attention mask used by the localization term, if any.
    pub mask: Option<Array3<f64>>,
}

fn to3(v: Var<'_>) -> Array3<f64> {
    v.value().clone().into_dimensionality::<Ix3>().expect("rank-3 localization")
}

/// Builds the loss terms of one item on `tape`. With `frozen_mask` the
/// attention mask is taken as given instead of being computed from the
/// current predictions.
pub fn item_terms<'t>(
    tape: &'t Tape,
    model: &ModelConfig,
    bound: &BoundParams<'t>,
    item: &BatchItem,
    record: &AugRecord,
    settings: &StepSettings,
    frozen_mask: Option<&Array3<f64>>,
) -> Result<ItemTerms<'t>> {
    let orig = forward_on_tape(model, bound, tape.constant(item.clip.pixels.clone().into_dyn()))?;
    let (sup_cls, sup_loc) = match &item.label {
        Some(l) => (
            Some(margin_loss_tape(orig.class_scores, l.class_id, settings.margin)?),
            Some(bce_dice_tape(orig.loc, &l.loc)?),
        ),
        None => (None, None),
    };
    let mut terms = ItemTerms {
        sup_cls,
        sup_loc,
        cc: None,
        lc: None,
        mask: None,
    };
    let mode = settings.mode;
    if !mode.is_semi() {
        return Ok(terms);
    }

    let aug_clip = apply_to_clip(&item.clip, record)?;
    let aug = forward_on_tape(model, bound, tape.constant(aug_clip.pixels.into_dyn()))?;
    if mode.uses_cc() {
        terms.cc = Some(jsd_tape(orig.penultimate, aug.penultimate)?);
    }
    let Some(variant) = mode.loc_variant(settings.both) else {
        return Ok(terms);
    };
    let [t, h, w] = model.output_size;
    let inv = Inversion::new(record, &[t, h, w])?;
    let back = aug.loc.sparse_map(inv.map.clone());
    let (o, g) = (orig.loc, back);
    let win = settings.window;
    terms.lc = Some(match variant {
        LocVariant::Plain => l2_consistency_tape(o, g, &inv.valid)?,
        LocVariant::Variance => {
            let mask = match frozen_mask {
                Some(m) => m.clone(),
                None => {
                    let cyc = build_cyclic_sequence(&to3(o), &to3(g))?;
                    let m = variance_mask(&cyc, win, win, true)?.weights;
                    m.slice(s![..t, .., ..]).to_owned()
                }
            };
            let loss = coherence_loss_tape(o, g, &inv.valid, &mask, settings.weights.w)?;
            terms.mask = Some(mask);
            loss
        }
        LocVariant::Gradient => {
            let mask = match frozen_mask {
                Some(m) => m.clone(),
                None => gradient_mask_padded(&to3(o))?.weights,
            };
            let loss = gradient_smoothness_loss_tape(o, g, &inv.valid, &mask)?;
            terms.mask = Some(mask);
            loss
        }
    });
    Ok(terms)
}

/// Batch loss components and parameter gradients.
#[derive(Debug, Clone)]
pub struct BatchOutcome {
    pub breakdown: LossBreakdown,
    /// Sum of the per-item differentiable totals; agrees with
    /// `breakdown.total` up to rounding.
    pub tape_total: f64,
    pub grads: BTreeMap<String, Tensor>,
    pub masks: Vec<Option<Array3<f64>>>,
}

/// Supervised terms average over labeled items and consistency terms over all
/// items. Each item gets its own tape; gradients are summed.
pub fn batch_gradients(
    model: &ModelConfig,
    params: &Params,
    items: &[BatchItem],
    records: &[AugRecord],
    settings: &StepSettings,
    frozen_masks: Option<&[Option<Array3<f64>>]>,
) -> Result<BatchOutcome> {
    if items.is_empty() || records.len() != items.len() {
        return Err(Error::InvalidArgument(format!(
            "need one augmentation per item, got {} items and {} records",
            items.len(),
            records.len()
        )));
    }
    if let Some(f) = frozen_masks {
        if f.len() != items.len() {
            return Err(Error::InvalidArgument("need one frozen mask entry per item".into()));
        }
    }
    let n = items.len() as f64;
    let n_lab = items.iter().filter(|i| i.label.is_some()).count();
    let inv_lab = if n_lab > 0 { 1.0 / n_lab as f64 } else { 0.0 };

    let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
    let (mut cls, mut loc, mut cc, mut lc, mut tape_total) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let mut masks = Vec::with_capacity(items.len());
    for (i, (item, record)) in items.iter().zip(records).enumerate() {
        let tape = Tape::new();
        let bound = params.bind(&tape, true);
        let frozen = frozen_masks.and_then(|f| f[i].as_ref());
        let terms = item_terms(&tape, model, &bound, item, record, settings, frozen)?;

        let sup = match (terms.sup_cls, terms.sup_loc) {
            (Some(c), Some(l)) => {
                cls += c.item();
                loc += l.item();
                c.add(l).scale(inv_lab)
            }
            _ => tape.constant(scalar(0.0)),
        };
        let cc_i = terms.cc.map(|v| {
            cc += v.item();
            v.scale(1.0 / n)
        });
        let lc_i = terms.lc.map(|v| {
            lc += v.item();
            v.scale(1.0 / n)
        });
        let total = total_loss_tape(sup, cc_i, lc_i, &settings.weights, settings.mode)?;
        tape_total += total.item();
        let g = tape.backward(total);
        for (name, var) in &bound.vars {
            if let Some(d) = g.get(*var) {
                match grads.get_mut(name) {
                    Some(acc) => *acc += d,
                    None => {
                        grads.insert(name.clone(), d.clone());
                    }
                }
            }
        }
        masks.push(terms.mask);
    }
    let breakdown = total_loss(cls * inv_lab, loc * inv_lab, cc / n, lc / n, &settings.weights, settings.mode)?;
    Ok(BatchOutcome {
        breakdown,
        tape_total,
        grads,
        masks,
    })
}

/// Fails with the step and the component values when any is non-finite.
pub fn check_finite(b: &LossBreakdown, step: usize, tape_total: f64) -> Result<()> {
    let comps = b.components();
    if comps.iter().all(|(_, v)| v.is_finite()) && tape_total.is_finite() {
        return Ok(());
    }
    let components = comps
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join(", ");
    Err(Error::NonFiniteLoss { step, components })
}
