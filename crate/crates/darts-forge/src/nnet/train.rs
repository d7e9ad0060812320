//! Minibatch SGD trainer for the acoustic network: momentum, exponential
//! learning-rate decay, the multitask CE + LF-MMI objective, per-epoch
//! checkpoints with dev-loss early stopping, and transfer-learning warm
//! start.

use std::collections::BTreeMap;
use std::path::PathBuf;

use ndarray::{Array2, ArrayD};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::darts::{Network, NnetError};
use crate::objectives::{ce_loss, mmi_objective, multitask, ObjectiveError};
use crate::wfst::Fst;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Nnet(#[from] NnetError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error("no training utterances")]
    EmptyTrainingSet,
    #[error("utterance {0} has neither an alignment nor a numerator graph")]
    NoSupervision(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One training example: features plus whichever supervision the objective
/// needs (a frame alignment for CE, a numerator graph for MMI, or both).
#[derive(Debug, Clone)]
pub struct TrainUtterance {
    pub id: String,
    pub feats: Array2<f64>,
    pub alignment: Option<Vec<u32>>,
    pub numerator: Option<Fst>,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Per-epoch multiplier on the learning rate.
    pub lr_decay: f64,
    pub momentum: f64,
    pub w_mmi: f64,
    pub w_ce: f64,
    pub acoustic_scale: f64,
    pub seed: u64,
    /// Stop after this many epochs without dev improvement; the best
    /// parameters are restored.
    pub patience: usize,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            lr: 0.01,
            lr_decay: 0.9,
            momentum: 0.9,
            w_mmi: 0.0,
            w_ce: 1.0,
            acoustic_scale: 1.0,
            seed: 0,
            patience: 3,
            checkpoint_dir: None,
        }
    }
}

#[derive(Debug)]
pub struct TrainReport {
    pub dev_losses: Vec<f64>,
    pub best_epoch: usize,
}

/// Prepare an initial network for fine-tuning on a possibly different
/// tied-state inventory. The trunk is kept; with `reinit_heads` both output
/// heads are re-drawn for the new state count, otherwise a state-count
/// change is an error.
pub fn warm_start(
    mut init: Network,
    num_states: usize,
    reinit_heads: bool,
    seed: u64,
) -> Result<Network, NnetError> {
    if init.num_states != num_states && !reinit_heads {
        return Err(NnetError::StateCountMismatch {
            expected: init.num_states,
            got: num_states,
        });
    }
    if reinit_heads {
        init.num_states = num_states;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        init.init_heads(&mut rng);
    }
    Ok(init)
}

/// Normalize an objective and its gradient by the frame count, so the MMI
/// term is on the same per-frame scale as the cross-entropy term and one
/// learning rate serves utterances of any length.
fn per_frame((value, grad): (f64, Array2<f64>)) -> (f64, Array2<f64>) {
    let t = grad.nrows().max(1) as f64;
    (value / t, grad / t)
}

/// Multitask objective value of one utterance without touching parameters.
fn utterance_loss(
    net: &Network,
    u: &TrainUtterance,
    denominator: Option<&Fst>,
    cfg: &TrainConfig,
) -> Result<f64, TrainError> {
    let (ce_lp, mmi_scores) = net.score(&u.feats)?;
    let mmi_part = match (&u.numerator, denominator) {
        (Some(num), Some(den)) if cfg.w_mmi > 0.0 => {
            per_frame(mmi_objective(&mmi_scores, num, den, cfg.acoustic_scale)?)
        }
        _ => (0.0, Array2::zeros(mmi_scores.raw_dim())),
    };
    let ce_part = match &u.alignment {
        Some(a) if cfg.w_ce > 0.0 => ce_loss(&ce_lp, a)?,
        _ => (0.0, Array2::zeros(ce_lp.raw_dim())),
    };
    let combined = multitask(
        (mmi_part.0, &mmi_part.1),
        (ce_part.0, &ce_part.1),
        cfg.w_mmi,
        cfg.w_ce,
    )?;
    Ok(combined.value)
}

pub fn dev_loss(
    net: &Network,
    dev: &[TrainUtterance],
    denominator: Option<&Fst>,
    cfg: &TrainConfig,
) -> Result<f64, TrainError> {
    let mut total = 0.0;
    for u in dev {
        total += utterance_loss(net, u, denominator, cfg)?;
    }
    Ok(total / dev.len().max(1) as f64)
}

/// Train the acoustic model. Each utterance is one minibatch; supervision
/// is whatever the utterance carries, combined by the multitask weights.
pub fn train_am(
    mut net: Network,
    train: &[TrainUtterance],
    dev: &[TrainUtterance],
    denominator: Option<&Fst>,
    cfg: &TrainConfig,
) -> Result<(Network, TrainReport), TrainError> {
    if train.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    for u in train {
        if u.alignment.is_none() && u.numerator.is_none() {
            return Err(TrainError::NoSupervision(u.id.clone()));
        }
    }
    let mut velocity: BTreeMap<String, ArrayD<f64>> = net
        .params
        .iter()
        .map(|(k, v)| (k.clone(), ArrayD::zeros(v.raw_dim())))
        .collect();
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut dev_losses = Vec::new();
    let mut best: Option<(f64, BTreeMap<String, ArrayD<f64>>, usize)> = None;
    let mut since_best = 0usize;

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr * cfg.lr_decay.powi(epoch as i32);
        order.shuffle(&mut rng);
        for &i in &order {
            let u = &train[i];
            let mut pass = net.forward(&u.feats, true)?;
            let mmi_scores = pass
                .tape
                .value(pass.mmi_scores)
                .clone()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap();
            let ce_lp = pass
                .tape
                .value(pass.ce_logprobs)
                .clone()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap();
            let mmi_part = match (&u.numerator, denominator) {
                (Some(num), Some(den)) if cfg.w_mmi > 0.0 => {
                    per_frame(mmi_objective(&mmi_scores, num, den, cfg.acoustic_scale)?)
                }
                _ => (0.0, Array2::zeros(mmi_scores.raw_dim())),
            };
            let ce_part = match &u.alignment {
                Some(a) if cfg.w_ce > 0.0 => ce_loss(&ce_lp, a)?,
                _ => (0.0, Array2::zeros(ce_lp.raw_dim())),
            };
            let combined = multitask(
                (mmi_part.0, &mmi_part.1),
                (ce_part.0, &ce_part.1),
                cfg.w_mmi,
                cfg.w_ce,
            )?;
            // Surrogate scalar whose parameter gradients equal the real
            // objective's: the upstream head gradients are constants here.
            let g_ce = pass.tape.leaf(combined.grad_ce.into_dyn());
            let g_mmi = pass.tape.leaf(combined.grad_mmi.into_dyn());
            let ce_term = pass.tape.mul(pass.ce_logits, g_ce).map_err(NnetError::from)?;
            let ce_sum = pass.tape.sum_all(ce_term);
            let mmi_term = pass
                .tape
                .mul(pass.mmi_scores, g_mmi)
                .map_err(NnetError::from)?;
            let mmi_sum = pass.tape.sum_all(mmi_term);
            let loss = pass.tape.add(ce_sum, mmi_sum).map_err(NnetError::from)?;
            pass.tape.backward(loss).map_err(NnetError::from)?;
            for (name, node) in &pass.param_nodes {
                let g = pass.tape.grad(*node);
                let v = velocity.get_mut(name).unwrap();
                v.zip_mut_with(g, |vi, gi| *vi = cfg.momentum * *vi - lr * gi);
                net.params.get_mut(name).unwrap().zip_mut_with(v, |p, vi| *p += vi);
            }
            net.update_bn_running(&pass.batch_stats);
        }
        let dl = if dev.is_empty() {
            dev_loss(&net, train, denominator, cfg)?
        } else {
            dev_loss(&net, dev, denominator, cfg)?
        };
        dev_losses.push(dl);
        if let Some(dir) = &cfg.checkpoint_dir {
            std::fs::create_dir_all(dir)?;
            net.write(&dir.join(format!("epoch_{epoch}.ckpt")))?;
        }
        let improved = best.as_ref().map(|(b, _, _)| dl < *b).unwrap_or(true);
        if improved {
            best = Some((dl, net.params.clone(), epoch));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    let (_, best_params, best_epoch) = best.expect("at least one epoch ran");
    net.params = best_params;
    Ok((
        net,
        TrainReport {
            dev_losses,
            best_epoch,
        },
    ))
}
