//! Single optimisation steps, validation and the per-epoch sample schedule.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::metrics::{evaluate_sample, EvalMode, FusionReport};
use crate::model::{ForwardOptions, FusionNet, ParamStore};
use crate::objectives::{total_loss, LossValues};
use crate::optim::Adam;
use crate::phantom::{rotate_pair, CubeRotation, VolumePair};
use crate::real::Real;
use crate::tensor::Tensor;

/// Loss of one sample together with the parameter gradients.
pub struct StepOutcome<T> {
    pub loss: LossValues,
    pub grads: Vec<Tensor<T>>,
}

/// Forward and backward pass on one pair without touching the parameters.
pub fn loss_and_grads<T: Real>(
    net: &FusionNet,
    params: &ParamStore<T>,
    mri: &Tensor<T>,
    pet: &Tensor<T>,
) -> Result<StepOutcome<T>> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, true);
    let a = tape.constant(mri.clone());
    let b = tape.constant(pet.clone());
    let fused = net.forward(&mut tape, &p, a, b, &ForwardOptions::default(), None)?;
    let lb = total_loss(&mut tape, fused, a, b)?;
    let loss = lb.values(&tape);
    if !loss.total.is_finite() {
        return Err(Error::NonFinite("total loss"));
    }
    tape.backward(lb.total)?;
    let grads = p.iter().map(|&v| tape.grad_or_zeros(v)).collect();
    Ok(StepOutcome { loss, grads })
}

/// One Adam step on one pair; returns the loss measured before the update.
pub fn train_step<T: Real>(
    net: &FusionNet,
    params: &mut ParamStore<T>,
    opt: &mut Adam<T>,
    mri: &Tensor<T>,
    pet: &Tensor<T>,
) -> Result<LossValues> {
    let out = loss_and_grads(net, params, mri, pet)?;
    opt.step(params, &out.grads)?;
    Ok(out.loss)
}

/// Sample order and augmentation of one epoch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EpochPlan {
    pub order: Vec<usize>,
    /// Rotation applied to the sample at the same position of `order`.
    pub rotations: Vec<CubeRotation>,
}

/// Deterministic plan for `epoch`, drawn from its own generator stream so any
/// epoch can be reproduced without replaying earlier ones.
pub fn epoch_plan(seed: u64, epoch: u64, samples: usize, augment: bool) -> EpochPlan {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch + 1);
    let mut order: Vec<usize> = (0..samples).collect();
    order.shuffle(&mut rng);
    let rotations = (0..samples)
        .map(|_| {
            if augment {
                CubeRotation::random(&mut rng)
            } else {
                CubeRotation::IDENTITY
            }
        })
        .collect();
    EpochPlan { order, rotations }
}

/// Applies a plan entry to a pair (identity rotation is a plain copy).
pub fn planned_pair(pair: &VolumePair, rotation: CubeRotation) -> Result<VolumePair> {
    if rotation == CubeRotation::IDENTITY {
        Ok(pair.clone())
    } else {
        rotate_pair(pair, rotation)
    }
}

/// Aggregated results of [`validate`].
#[derive(Clone, Debug, PartialEq)]
pub struct Validation {
    pub mean: LossValues,
    pub losses: Vec<LossValues>,
    pub reports: Vec<FusionReport>,
}

/// Loss (on the raw output) and metrics (on the clamped output) for every
/// sample; parameters are only read.
pub fn validate(
    net: &FusionNet,
    params: &ParamStore<f32>,
    samples: &[(String, VolumePair)],
    mode: EvalMode,
) -> Result<Validation> {
    if samples.is_empty() {
        return Err(Error::EmptySplit);
    }
    let mut losses = Vec::with_capacity(samples.len());
    let mut reports = Vec::with_capacity(samples.len());
    for (id, pair) in samples {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let a = tape.constant(pair.mri.clone());
        let b = tape.constant(pair.pet.clone());
        let fused = net.forward(&mut tape, &p, a, b, &ForwardOptions::default(), None)?;
        let lb = total_loss(&mut tape, fused, a, b)?;
        losses.push(lb.values(&tape));
        let clamped = tape.value(fused).map(|v| v.clamp(0.0, 1.0));
        reports.push(evaluate_sample(id, &clamped, &pair.mri, &pair.pet, mode)?);
    }
    Ok(Validation {
        mean: LossValues::mean(&losses).ok_or(Error::EmptySplit)?,
        losses,
        reports,
    })
}
