//! The three training phases and the baseline unlearning modes.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{Checkpoint, EpochRecord, Phase};
use super::config::{Mode, RunConfig};
use super::metrics::MetricsSink;
use super::optim::{Adam, AdamHyper};
use crate::confidence::{confidence_from_logits, partition_batch, BatchPartition};
use crate::encoders::{init_params, BoundParams, EncoderParams, ModelDims, ParamGroup};
use crate::error::{NcuError, Result};
use crate::hn_losses::{hn_total_l2_var, hn_total_var, sep_loss_var};
use crate::numcore::{Graph, Matrix, Var};
use crate::ot::{blend_alignment, build_mask, extend_cost, masked_sinkhorn, TransportProblem};
use crate::synthgen::{Split, SyntheticDataset};
use crate::unlearn_losses::{build_p_var, gradient_ascent_var, infonce_loss_var, otr_loss_var};

const PRETRAIN_STREAM: u64 = 1;
const HN_STREAM: u64 = 2;
const UL_STREAM: u64 = 3;
const SUBSAMPLE_STREAM: u64 = 4;

pub const PRETRAIN_GROUPS: [ParamGroup; 3] = [ParamGroup::ImageTower, ParamGroup::TextTower, ParamGroup::Temperature];
pub const HN_GROUPS: [ParamGroup; 2] = [ParamGroup::TextTower, ParamGroup::NegHead];
pub const UL_GROUPS: [ParamGroup; 3] = PRETRAIN_GROUPS;

/// One shuffled mini-batch, already gathered.
struct Batch<'a> {
    x_img: Matrix,
    x_txt: Matrix,
    idx: &'a [usize],
}

/// What one step reports besides its loss.
type Parts = Vec<(&'static str, f64)>;

/// Deterministic `fraction` subsample, in original order.
pub fn subsample(data: &SyntheticDataset, fraction: f64, seed: u64) -> SyntheticDataset {
    if fraction >= 1.0 {
        return data.clone();
    }
    let n = data.len();
    let k = ((fraction * n as f64).round() as usize).clamp(1, n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SUBSAMPLE_STREAM);
    let mut idx = sample(&mut rng, n, k).into_vec();
    idx.sort_unstable();
    data.subset(&idx)
}

fn check_training_data(data: &SyntheticDataset, cfg: &RunConfig) -> Result<()> {
    if data.split != Split::Train {
        return Err(NcuError::Data("training phases need a train split".into()));
    }
    if data.len() < cfg.batch_size {
        return Err(NcuError::Data(format!(
            "{} pairs cannot fill one batch of {}",
            data.len(),
            cfg.batch_size
        )));
    }
    Ok(())
}

fn check_dims(params: &EncoderParams, data: &SyntheticDataset) -> Result<()> {
    let d = params.dims;
    if data.x_img.cols() != d.image_in || data.x_txt.cols() != d.text_in {
        return Err(NcuError::Data(format!(
            "data has {}/{} input features, model expects {}/{}",
            data.x_img.cols(),
            data.x_txt.cols(),
            d.image_in,
            d.text_in
        )));
    }
    Ok(())
}

struct PhaseRun<'a> {
    phase: Phase,
    cfg: &'a RunConfig,
    data: &'a SyntheticDataset,
    groups: &'a [ParamGroup],
    lr: f64,
    epochs: usize,
    stream: u64,
}

/// Runs `epochs` of shuffled mini-batch Adam; the short tail batch of each epoch is dropped.
fn run_phase(
    run: PhaseRun<'_>,
    params: &mut EncoderParams,
    history: &mut Vec<EpochRecord>,
    sink: &mut dyn MetricsSink,
    mut step: impl FnMut(&mut Graph, &BoundParams, &Batch<'_>) -> Result<(Var, Parts)>,
) -> Result<(Adam, ChaCha8Rng)> {
    let PhaseRun { phase, cfg, data, groups, lr, epochs, stream } = run;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    let mut opt = Adam::new(AdamHyper::with_lr(lr), params, groups);
    let n = data.len();
    let batches = n / cfg.batch_size;
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 1..=epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut part_sums: BTreeMap<String, f64> = BTreeMap::new();
        for b in 0..batches {
            let idx = &order[b * cfg.batch_size..(b + 1) * cfg.batch_size];
            let batch = Batch { x_img: data.x_img.select_rows(idx), x_txt: data.x_txt.select_rows(idx), idx };
            let mut g = Graph::new();
            let bound = params.bind(&mut g, groups);
            let (loss, parts) = step(&mut g, &bound, &batch)?;
            let value = g.scalar_value(loss);
            if !value.is_finite() {
                return Err(NcuError::Data(format!("{} loss became non-finite in epoch {epoch}", phase.name())));
            }
            let grads = g.backward(loss);
            opt.update(params, |id| grads.get_or_zeros(bound.var(id), params_shape(&bound, &g, id)));
            loss_sum += value;
            for (name, v) in parts {
                *part_sums.entry(name.to_string()).or_insert(0.0) += v;
            }
        }
        let per = batches as f64;
        let record = EpochRecord {
            phase,
            epoch,
            loss: loss_sum / per,
            parts: part_sums.into_iter().map(|(k, v)| (k, v / per)).collect(),
        };
        sink.epoch(&record, started.elapsed().as_secs_f64())?;
        history.push(record);
    }
    Ok((opt, rng))
}

fn params_shape(bound: &BoundParams, g: &Graph, id: crate::encoders::ParamId) -> (usize, usize) {
    g.shape(bound.var(id))
}

fn embed(g: &mut Graph, bound: &BoundParams, batch: &Batch<'_>) -> (Var, Var) {
    let x = g.constant(batch.x_img.clone());
    let y = g.constant(batch.x_txt.clone());
    (bound.encode_image(g, x), bound.encode_text(g, y))
}

/// Batch partition from the current similarity values.
fn partition_of(g: &Graph, v: Var, t: Var, tau: Var, p_percent: f64) -> Result<BatchPartition> {
    let sim = g.value(v).matmul_nt(g.value(t));
    let omega = confidence_from_logits(&sim, g.scalar_value(tau))?;
    partition_batch(&omega, p_percent)
}

/// Trains both towers and `τ` on InfoNCE from a fresh initialization.
pub fn pretrain(cfg: &RunConfig, data: &SyntheticDataset, sink: &mut dyn MetricsSink) -> Result<Checkpoint> {
    cfg.validate()?;
    check_training_data(data, cfg)?;
    let dims = ModelDims {
        image_in: data.x_img.cols(),
        text_in: data.x_txt.cols(),
        hidden: cfg.hidden,
        embed: cfg.embed,
        neg_context: cfg.neg_context,
    };
    let mut params = init_params(cfg.seed, dims)?;
    let mut history = Vec::new();
    let run = PhaseRun {
        phase: Phase::Pretrain,
        cfg,
        data,
        groups: &PRETRAIN_GROUPS,
        lr: cfg.lr_pretrain,
        epochs: cfg.pretrain_epochs,
        stream: PRETRAIN_STREAM,
    };
    let (optimizer, rng) = run_phase(run, &mut params, &mut history, sink, |g, bound, batch| {
        let (v, t) = embed(g, bound, batch);
        let tau = bound.tau(g);
        Ok((infonce_loss_var(g, v, t, tau), Vec::new()))
    })?;
    Ok(Checkpoint { phase: Phase::Pretrain, mode: None, config: cfg.clone(), params, optimizer, rng, history })
}

/// Trains the text tower and negative head on the hardest-negative objective over each batch's retain set.
pub fn learn_negatives(
    cfg: &RunConfig,
    data: &SyntheticDataset,
    reference: &Checkpoint,
    sink: &mut dyn MetricsSink,
) -> Result<Checkpoint> {
    cfg.validate()?;
    if reference.phase != Phase::Pretrain {
        return Err(NcuError::PhaseOrder(format!(
            "learn-negatives needs a pretrain checkpoint, got a {} checkpoint",
            reference.phase.name()
        )));
    }
    let data = subsample(data, cfg.data_fraction, cfg.seed);
    check_training_data(&data, cfg)?;
    check_dims(&reference.params, &data)?;
    let mut params = reference.params.clone();
    let mut history = reference.history.clone();
    let hn = cfg.hn_loss();
    let run = PhaseRun {
        phase: Phase::LearnNegatives,
        cfg,
        data: &data,
        groups: &HN_GROUPS,
        lr: cfg.lr_hn,
        epochs: cfg.hn_epochs,
        stream: HN_STREAM,
    };
    let (optimizer, rng) = run_phase(run, &mut params, &mut history, sink, |g, bound, batch| {
        let (v, t) = embed(g, bound, batch);
        let tau = bound.tau(g);
        let part = partition_of(g, v, t, tau, cfg.p_percent)?;
        let t_neg = bound.neg_text(g, t);
        let rt = &part.rt_indices;
        let (v_rt, t_rt, n_rt) = (g.select_rows(v, rt), g.select_rows(t, rt), g.select_rows(t_neg, rt));
        let loss = if cfg.l2_opposite {
            hn_total_l2_var(g, t_rt, n_rt, v_rt, tau, &hn)
        } else {
            hn_total_var(g, t_rt, n_rt, v_rt, tau, &hn)
        };
        let s = g.value(t_rt).as_slice().iter().zip(g.value(n_rt).as_slice()).map(|(a, b)| a * b).sum::<f64>();
        Ok((loss, vec![("neg_sim", s / rt.len() as f64)]))
    })?;
    Ok(Checkpoint { phase: Phase::LearnNegatives, mode: None, config: cfg.clone(), params, optimizer, rng, history })
}

/// Soft alignment targets for one batch under the configured ablation.
fn ncu_targets(
    cfg: &RunConfig,
    part: &BatchPartition,
    v: &Matrix,
    t: &Matrix,
    t_neg: &Matrix,
) -> Result<(Matrix, crate::ot::TransportPlan)> {
    let n = v.rows();
    let sk = cfg.sinkhorn();
    if cfg.fn_only {
        // Every row is treated as retained: a square unmasked problem, no negative column mass.
        let cost = v.matmul_nt(t).map(|s| (1.0 - s).clamp(0.0, 2.0));
        let problem = TransportProblem::uniform(cost, Matrix::filled(n, n, 1.0), cfg.epsilon)?;
        let plan = masked_sinkhorn(&problem, &sk)?;
        let scale = cfg.gamma * n as f64;
        let targets = Matrix::from_fn(n, n + 1, |i, j| {
            if j == n {
                0.0
            } else {
                scale * plan.plan[(i, j)] + if i == j { 1.0 - cfg.gamma } else { 0.0 }
            }
        });
        return Ok((targets, plan));
    }
    let cost = extend_cost(v, t, t_neg)?;
    let mask = build_mask(part, n)?;
    let problem = TransportProblem::uniform(cost, mask, cfg.epsilon)?;
    let plan = masked_sinkhorn(&problem, &sk)?;
    let mut targets = blend_alignment(&plan, part, cfg.gamma)?;
    if cfg.fp_only {
        // Retain rows keep hard identity targets; only the forget rows are re-aligned.
        for &i in &part.rt_indices {
            targets.row_mut(i).iter_mut().enumerate().for_each(|(j, x)| *x = if j == i { 1.0 } else { 0.0 });
        }
    }
    Ok((targets, plan))
}

fn check_unlearn_start(cfg: &RunConfig, start: &Checkpoint) -> Result<()> {
    match (cfg.mode, start.phase) {
        (Mode::Ncu, Phase::LearnNegatives) => Ok(()),
        (Mode::Ncu, other) => Err(NcuError::PhaseOrder(format!(
            "unlearn in ncu mode needs a learn-negatives checkpoint, got a {} checkpoint",
            other.name()
        ))),
        (_, Phase::Pretrain | Phase::LearnNegatives) => Ok(()),
        (mode, Phase::Unlearn) => Err(NcuError::PhaseOrder(format!(
            "{} starts from a pretrain or learn-negatives checkpoint, not an unlearn checkpoint",
            mode.name()
        ))),
    }
}

/// Fine-tunes both towers and `τ` with the configured mode. The negative head stays frozen.
pub fn unlearn(
    cfg: &RunConfig,
    data: &SyntheticDataset,
    start: &Checkpoint,
    sink: &mut dyn MetricsSink,
) -> Result<Checkpoint> {
    cfg.validate()?;
    check_unlearn_start(cfg, start)?;
    let data = subsample(data, cfg.data_fraction, cfg.seed);
    check_training_data(&data, cfg)?;
    check_dims(&start.params, &data)?;
    let mut params = start.params.clone();
    let mut history = start.history.clone();
    let run = PhaseRun {
        phase: Phase::Unlearn,
        cfg,
        data: &data,
        groups: &UL_GROUPS,
        lr: cfg.lr_ul,
        epochs: unlearn_epochs(cfg),
        stream: UL_STREAM,
    };
    let hn = cfg.hn_loss();
    let corrupted = &data.is_corrupted;
    let (optimizer, rng) = run_phase(run, &mut params, &mut history, sink, |g, bound, batch| {
        let (v, t) = embed(g, bound, batch);
        let tau = bound.tau(g);
        match cfg.mode {
            Mode::ContinuedInfonce => Ok((infonce_loss_var(g, v, t, tau), Vec::new())),
            Mode::GradientAscent => {
                let part = partition_of(g, v, t, tau, cfg.p_percent)?;
                let (fg, rt) = (&part.fg_indices, &part.rt_indices);
                let forget = (g.select_rows(v, fg), g.select_rows(t, fg));
                let retain = (g.select_rows(v, rt), g.select_rows(t, rt));
                let loss = gradient_ascent_var(g, forget, retain, tau, cfg.smoothing);
                Ok((loss, vec![("fg_precision", fg_precision(&part, batch.idx, corrupted))]))
            }
            Mode::Ncu => {
                let part = partition_of(g, v, t, tau, cfg.p_percent)?;
                let t_neg = bound.neg_text(g, t);
                let (targets, plan) = ncu_targets(cfg, &part, g.value(v), g.value(t), g.value(t_neg))?;
                let p = build_p_var(g, v, t, t_neg);
                let otr = otr_loss_var(g, p, &targets, tau);
                let rt = &part.rt_indices;
                let (t_rt, n_rt) = (g.select_rows(t, rt), g.select_rows(t_neg, rt));
                let sep = sep_loss_var(g, t_rt, n_rt, &hn);
                let loss = g.add(otr, sep);
                let parts = vec![
                    ("otr", g.scalar_value(otr)),
                    ("sep", g.scalar_value(sep)),
                    ("sinkhorn_iters", plan.iterations as f64),
                    ("sinkhorn_converged", f64::from(u8::from(plan.converged))),
                    ("fg_precision", fg_precision(&part, batch.idx, corrupted)),
                ];
                Ok((loss, parts))
            }
        }
    })?;
    Ok(Checkpoint { phase: Phase::Unlearn, mode: Some(cfg.mode), config: cfg.clone(), params, optimizer, rng, history })
}

/// Baselines skip the negative-learning phase, so they get its epochs on top of the unlearning epochs.
pub fn unlearn_epochs(cfg: &RunConfig) -> usize {
    match cfg.mode {
        Mode::Ncu => cfg.ul_epochs,
        Mode::GradientAscent | Mode::ContinuedInfonce => cfg.hn_epochs + cfg.ul_epochs,
    }
}

/// Share of the forget set that is truly corrupted.
fn fg_precision(part: &BatchPartition, idx: &[usize], corrupted: &[bool]) -> f64 {
    let hits = part.fg_indices.iter().filter(|&&k| corrupted[idx[k]]).count();
    hits as f64 / part.fg_indices.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::ParamId;
    use crate::synthgen::{generate, GenConfig};

    fn tiny_data(seed: u64) -> SyntheticDataset {
        generate(&GenConfig { pairs_per_class: 40, seed, ..GenConfig::default() }).unwrap()
    }

    fn tiny_cfg() -> RunConfig {
        RunConfig { batch_size: 64, pretrain_epochs: 2, hn_epochs: 1, ul_epochs: 1, ..RunConfig::default() }
    }

    fn checksum(p: &EncoderParams, group: ParamGroup) -> Vec<u64> {
        ParamId::ALL
            .iter()
            .filter(|id| id.group() == group)
            .flat_map(|&id| p.tensor(id).as_slice().iter().map(|x| x.to_bits()))
            .collect()
    }

    #[test]
    fn phases_touch_only_their_groups() {
        let data = tiny_data(1);
        let cfg = tiny_cfg();
        let pre = pretrain(&cfg, &data, &mut ()).unwrap();
        assert_eq!(checksum(&pre.params, ParamGroup::NegHead), checksum(&init_params(cfg.seed, pre.params.dims).unwrap(), ParamGroup::NegHead));

        let hn = learn_negatives(&cfg, &data, &pre, &mut ()).unwrap();
        for g in [ParamGroup::ImageTower, ParamGroup::Temperature] {
            assert_eq!(checksum(&hn.params, g), checksum(&pre.params, g));
        }
        assert_ne!(checksum(&hn.params, ParamGroup::NegHead), checksum(&pre.params, ParamGroup::NegHead));
        assert_ne!(checksum(&hn.params, ParamGroup::TextTower), checksum(&pre.params, ParamGroup::TextTower));

        let ul = unlearn(&cfg, &data, &hn, &mut ()).unwrap();
        assert_eq!(checksum(&ul.params, ParamGroup::NegHead), checksum(&hn.params, ParamGroup::NegHead));
        assert_ne!(checksum(&ul.params, ParamGroup::ImageTower), checksum(&hn.params, ParamGroup::ImageTower));
        assert_eq!(ul.history.len(), 4);
    }

    #[test]
    fn phase_order_is_enforced() {
        let data = tiny_data(2);
        let cfg = tiny_cfg();
        let pre = pretrain(&cfg, &data, &mut ()).unwrap();
        assert!(matches!(unlearn(&cfg, &data, &pre, &mut ()), Err(NcuError::PhaseOrder(_))));
        let hn = learn_negatives(&cfg, &data, &pre, &mut ()).unwrap();
        assert!(matches!(learn_negatives(&cfg, &data, &hn, &mut ()), Err(NcuError::PhaseOrder(_))));
        let ga = RunConfig { mode: Mode::GradientAscent, ..cfg.clone() };
        let out = unlearn(&ga, &data, &pre, &mut ()).unwrap();
        assert_eq!(out.mode, Some(Mode::GradientAscent));
        assert!(matches!(unlearn(&ga, &data, &out, &mut ()), Err(NcuError::PhaseOrder(_))));
        assert_eq!(out.history.len(), cfg.pretrain_epochs + cfg.hn_epochs + cfg.ul_epochs);
    }

    #[test]
    fn subsample_is_deterministic() {
        let data = tiny_data(3);
        let a = subsample(&data, 0.25, 7);
        assert_eq!(a.len(), 100);
        assert_eq!(a, subsample(&data, 0.25, 7));
        assert_ne!(a, subsample(&data, 0.25, 8));
        assert_eq!(subsample(&data, 1.0, 7), data);
    }

    #[test]
    fn ablation_targets_are_row_stochastic() {
        let data = tiny_data(4);
        let cfg = tiny_cfg();
        let pre = pretrain(&cfg, &data, &mut ()).unwrap();
        let idx: Vec<usize> = (0..32).collect();
        let v = crate::encoders::encode_image(&pre.params, &data.x_img.select_rows(&idx)).unwrap();
        let t = crate::encoders::encode_text(&pre.params, &data.x_txt.select_rows(&idx)).unwrap();
        let t_neg = crate::encoders::neg_text(&pre.params, &t).unwrap();
        let part = partition_batch(&confidence_from_logits(&v.matmul_nt(&t), 0.07).unwrap(), 10.0).unwrap();
        for (fp_only, fn_only) in [(false, false), (true, false), (false, true)] {
            let c = RunConfig { fp_only, fn_only, ..cfg.clone() };
            let (targets, _) = ncu_targets(&c, &part, &v, &t, &t_neg).unwrap();
            for s in targets.row_sums() {
                assert!((s - 1.0).abs() < 1e-6, "{s}");
            }
            for &i in &part.rt_indices {
                assert_eq!(targets[(i, 32)], 0.0);
                if fp_only {
                    assert_eq!(targets[(i, i)], 1.0);
                }
            }
            for &i in &part.fg_indices {
                if fn_only {
                    assert!(targets[(i, i)] >= 1.0 - c.gamma);
                } else {
                    assert_eq!(targets[(i, i)], 0.0);
                }
            }
        }
    }
}
