use serde::Serialize;

use crate::adapt::{
    conditional_loss_node, marginal_loss_node, weighted_conditional_node, AdaptationParams,
    ConditionalSide, TransferabilityState,
};
use crate::autodiff::{Graph, NodeId, Tensor};
use crate::detector::{
    detection_loss_node, match_targets, CellBatch, CellTargets, DetectorParams, BACKGROUND_WEIGHT,
};
use crate::error::{Error, Result};
use crate::nn::NamedParams;
use crate::seed::rng_for;
use crate::synthgen::{Dataset, Sample};

use super::{
    make_batches, plateau_stop, sgd_step, AdaptationState, BatchSpec, Checkpoint, ConditionalMode,
    EpochStream, OptState, Phase, PhaseSchedule, TrainSchedule, Variant,
};

/// Losses above this abort training.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// One row of a loss curve.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub l_det: f64,
    pub l_m: f64,
    pub c: f64,
    /// Transferability weights used at this step.
    pub weights: Vec<f64>,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct PretrainResult {
    pub checkpoint: Checkpoint,
    pub log: Vec<LossRecord>,
}

#[derive(Clone, Debug)]
pub struct AdaptResult {
    pub checkpoint: Checkpoint,
    pub log: Vec<LossRecord>,
    /// Weights after every transferability update.
    pub weight_trajectory: Vec<Vec<f64>>,
    pub iterations_run: usize,
    pub stopped_early: bool,
    /// Target-label reads observed during training.
    pub label_reads: usize,
}

fn source_targets(source: &Dataset) -> Result<Vec<CellTargets>> {
    if source.labels_withheld {
        return Err(Error::Config(
            "pre-training needs a labeled source dataset".into(),
        ));
    }
    let grid = source.config.grid_size;
    Ok(source
        .samples
        .iter()
        .map(|s| match_targets(s.annotations(), grid))
        .collect())
}

fn gather<'a>(ds: &'a Dataset, idx: &[usize]) -> Vec<&'a Sample> {
    idx.iter().map(|&i| &ds.samples[i]).collect()
}

fn check_loss(iteration: usize, loss: f64) -> Result<()> {
    if !loss.is_finite() || loss > DIVERGENCE_LIMIT {
        return Err(Error::Diverged { iteration, loss });
    }
    Ok(())
}

/// Source-only training of the detector from a seeded initialization.
pub fn pretrain(
    schedule: &TrainSchedule,
    source: &Dataset,
    seed: u64,
    config_digest: &str,
) -> Result<PretrainResult> {
    schedule.validate()?;
    let cfg = &source.config;
    let mut params = DetectorParams::init(
        &mut rng_for(seed, "init/detector", 0),
        cfg.obs_dim,
        cfg.num_classes,
    );
    let targets = source_targets(source)?;
    let mut stream = EpochStream::new(source.len(), seed, "batch/pretrain", "source training set")?;
    let phase = &schedule.pretrain;
    let mut opt = OptState::for_phase(phase, schedule);
    let mut log = Vec::with_capacity(phase.iterations);
    for it in 0..phase.iterations {
        let idx = stream.take(schedule.pretrain_batch);
        let batch = CellBatch::from_samples(&gather(source, &idx))?;
        let batch_targets: Vec<CellTargets> = idx.iter().map(|&i| targets[i].clone()).collect();
        let mut g = Graph::new();
        let det = params.bind(&mut g)?;
        let nodes = det.forward(&mut g, &batch)?;
        let loss = detection_loss_node(
            &mut g,
            nodes.class_probs,
            nodes.box_offsets,
            &batch_targets,
            BACKGROUND_WEIGHT,
        )?;
        let l_det = g.val(loss).item();
        check_loss(it, l_det)?;
        let grads = g.backward(loss, &Tensor::scalar(1.0))?.into_map();
        log.push(LossRecord {
            iteration: it,
            l_det,
            l_m: 0.0,
            c: 0.0,
            weights: Vec::new(),
            lr: opt.lr,
        });
        sgd_step(params.named_tensors_mut(""), &grads, &mut opt, Some(phase))?;
    }
    Ok(PretrainResult {
        checkpoint: Checkpoint {
            phase: Phase::Pretrained,
            config_digest: config_digest.to_owned(),
            seed,
            detector: params,
            adaptation: None,
            opt,
        },
        log,
    })
}

/// Knobs of [`joint_adapt_with`] beyond the schedule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdaptOptions {
    /// Train the detector on source only: no domain classifiers, no
    /// adversarial terms. The reference loop for term-removal checks.
    pub source_only: bool,
    pub plateau: bool,
}

impl Default for AdaptOptions {
    fn default() -> Self {
        Self {
            source_only: false,
            plateau: true,
        }
    }
}

pub fn joint_adapt(
    pretrained: &Checkpoint,
    source: &Dataset,
    target: &Dataset,
    variant: Variant,
    schedule: &TrainSchedule,
    seed: u64,
) -> Result<AdaptResult> {
    joint_adapt_with(
        pretrained,
        source,
        target,
        variant,
        schedule,
        seed,
        AdaptOptions::default(),
    )
}

struct StepLosses {
    total: NodeId,
    l_det: f64,
    l_m: f64,
    c: f64,
    class_bce: Vec<Option<f64>>,
}

/// Joint adversarial adaptation from a pretrained checkpoint. Every
/// iteration draws a mixed batch, computes the source detection loss and
/// the variant's adversarial terms on gradient-reversed features, and
/// takes one SGD step over the detector and the active domain classifiers.
pub fn joint_adapt_with(
    pretrained: &Checkpoint,
    source: &Dataset,
    target: &Dataset,
    variant: Variant,
    schedule: &TrainSchedule,
    seed: u64,
    options: AdaptOptions,
) -> Result<AdaptResult> {
    schedule.validate()?;
    pretrained.require_phase(Phase::Pretrained)?;
    if target.is_empty() {
        return Err(Error::EmptyDataset("target training set"));
    }
    let reads_before = target.label_reads();
    let k = pretrained.detector.num_classes();
    let marginal = variant.uses_marginal() && !options.source_only;
    let conditional = if options.source_only {
        ConditionalMode::Off
    } else {
        variant.conditional()
    };

    let mut params = pretrained.detector.clone();
    let mut adapt = AdaptationParams::init(&mut rng_for(seed, "init/adapt", 0), k);
    let mut state = TransferabilityState::new(k);
    let targets = source_targets(source)?;
    let spec = BatchSpec {
        source: schedule.source_batch,
        target: schedule.target_batch,
    };
    let mut batches = make_batches(source, target, spec, seed)?;
    let phase = &schedule.adapt;
    let mut opt = OptState::new(
        phase.lr_at(0),
        schedule.adapt_momentum,
        schedule.weight_decay,
    );
    let domain_phase = PhaseSchedule {
        lr: phase.lr * schedule.domain_lr_mult,
        ..phase.clone()
    };
    let mut opt_domain = OptState::new(
        domain_phase.lr_at(0),
        schedule.adapt_momentum,
        schedule.weight_decay,
    );
    let mut log = Vec::with_capacity(phase.iterations);
    let mut trajectory = Vec::new();
    let mut history = Vec::with_capacity(phase.iterations);
    let mut stopped_early = false;

    for it in 0..phase.iterations {
        let mb = batches.next().expect("batch stream is endless");
        let src = CellBatch::from_samples(&gather(source, &mb.source))?;
        let tgt = CellBatch::from_samples(&gather(target, &mb.target))?;
        let batch_targets: Vec<CellTargets> =
            mb.source.iter().map(|&i| targets[i].clone()).collect();
        let weights = match conditional {
            ConditionalMode::Weighted => state.weights.clone(),
            _ => vec![1.0; k],
        };

        let mut g = Graph::new();
        let losses = adaptation_graph(
            &mut g,
            &params,
            &adapt,
            &src,
            &tgt,
            &batch_targets,
            marginal,
            conditional,
            &weights,
            schedule.lambda,
        )?;
        let total = g.val(losses.total).item();
        check_loss(it, total)?;
        let grads = g.backward(losses.total, &Tensor::scalar(1.0))?.into_map();
        log.push(LossRecord {
            iteration: it,
            l_det: losses.l_det,
            l_m: losses.l_m,
            c: losses.c,
            weights: weights.clone(),
            lr: opt.lr,
        });

        if let Some((name, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
        sgd_step(params.named_tensors_mut(""), &grads, &mut opt, Some(phase))?;
        let mut domain = Vec::new();
        if marginal {
            adapt
                .marginal
                .named_mut(AdaptationParams::marginal_prefix(), &mut domain);
        }
        if conditional != ConditionalMode::Off {
            for (i, d) in adapt.conditional.iter_mut().enumerate() {
                d.named_mut(&AdaptationParams::conditional_prefix(i + 1), &mut domain);
            }
        }
        if !domain.is_empty() {
            sgd_step(domain, &grads, &mut opt_domain, Some(&domain_phase))?;
        }

        if conditional != ConditionalMode::Off {
            state.update(&losses.class_bce);
            trajectory.push(state.weights.clone());
        }
        history.push(total);
        if options.plateau
            && it + 1 >= schedule.plateau.min_iteration
            && plateau_stop(&history, schedule.plateau.window, schedule.plateau.rel_tol)
        {
            stopped_early = it + 1 < phase.iterations;
            break;
        }
    }

    let iterations_run = log.len();
    opt.velocity.append(&mut opt_domain.velocity);
    Ok(AdaptResult {
        checkpoint: Checkpoint {
            phase: Phase::Adapted,
            config_digest: pretrained.config_digest.clone(),
            seed,
            detector: params,
            adaptation: (!options.source_only).then_some(AdaptationState {
                variant,
                params: adapt,
                transferability: state,
            }),
            opt,
        },
        log,
        weight_trajectory: trajectory,
        iterations_run,
        stopped_early,
        label_reads: target.label_reads() - reads_before,
    })
}

#[allow(clippy::too_many_arguments)]
fn adaptation_graph(
    g: &mut Graph,
    params: &DetectorParams,
    adapt: &AdaptationParams,
    src: &CellBatch,
    tgt: &CellBatch,
    targets: &[CellTargets],
    marginal: bool,
    conditional: ConditionalMode,
    weights: &[f64],
    lambda: f64,
) -> Result<StepLosses> {
    let k = params.num_classes();
    let det = params.bind(g)?;
    let fs = det.forward(g, src)?;
    let l_det = detection_loss_node(
        g,
        fs.class_probs,
        fs.box_offsets,
        targets,
        BACKGROUND_WEIGHT,
    )?;
    let mut out = StepLosses {
        total: l_det,
        l_det: g.val(l_det).item(),
        l_m: 0.0,
        c: 0.0,
        class_bce: vec![None; k],
    };
    if !marginal && conditional == ConditionalMode::Off {
        return Ok(out);
    }
    let ft = det.forward(g, tgt)?;
    let bound = adapt.bind(g)?;
    let rs = g.grl(fs.features, lambda)?;
    let rt = g.grl(ft.features, lambda)?;
    if marginal {
        let lm = marginal_loss_node(g, &bound.marginal, rs, rt)?;
        out.l_m = g.val(lm).item();
        out.total = g.add(out.total, lm)?;
    }
    if conditional != ConditionalMode::Off {
        let (ps, os) = (g.val(fs.class_probs).clone(), g.val(fs.box_offsets).clone());
        let (pt, ot) = (g.val(ft.class_probs).clone(), g.val(ft.box_offsets).clone());
        let side_s = ConditionalSide {
            features: rs,
            class_probs: &ps,
            box_offsets: &os,
        };
        let side_t = ConditionalSide {
            features: rt,
            class_probs: &pt,
            box_offsets: &ot,
        };
        let mut lks = Vec::with_capacity(k);
        for class in 1..=k {
            lks.push(conditional_loss_node(
                g,
                &bound.conditional[class - 1],
                &side_s,
                &side_t,
                class,
            )?);
        }
        out.class_bce = lks.iter().map(|l| l.map(|n| g.val(n).item())).collect();
        if let Some(c) = weighted_conditional_node(g, &lks, weights)? {
            out.c = g.val(c).item();
            out.total = g.add(out.total, c)?;
        }
    }
    Ok(out)
}

/// Loss curve as CSV: `iteration,L_det,L_m,C,s_1..s_K,lr`.
pub fn loss_curve_csv(log: &[LossRecord], num_classes: usize) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec![
        "iteration".to_owned(),
        "L_det".into(),
        "L_m".into(),
        "C".into(),
    ];
    header.extend((1..=num_classes).map(|k| format!("s_{k}")));
    header.push("lr".into());
    w.write_record(&header)?;
    for r in log {
        let mut row = vec![
            r.iteration.to_string(),
            r.l_det.to_string(),
            r.l_m.to_string(),
            r.c.to_string(),
        ];
        for k in 0..num_classes {
            row.push(r.weights.get(k).copied().unwrap_or(1.0).to_string());
        }
        row.push(r.lr.to_string());
        w.write_record(&row)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}
