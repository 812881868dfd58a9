//! The training loop: batching, augmentation, three-loss evaluation, Adam
//! updates with per-encoder learning rates, EMA teacher updates, rank-accuracy
//! tracking, and checkpointing.
//!
//! Every random draw is keyed by (seed, stage, epoch, step, ...) substreams,
//! so runs are bit-reproducible, ablations consume identical streams, and a
//! checkpoint resume continues the exact trajectory.

mod adam;
mod checkpoint;
mod predictor;

pub use adam::{adam_step, AdamHyper, AdamLayer, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use predictor::{fit_gene_predictor, predict_genes, PredictorConfig};

use crate::encoders::{
    augment, encode_backward, encode_gene, encode_image, ema_update, AugmentConfig, AugmentMode,
    Branch, EncoderState,
};
use crate::error::{Error, Result};
use crate::losses::{
    cosine_sim_matrix, distillation_loss, gene_image_contrastive, ranking_loss_sampled,
    sample_pairings, total_loss, LossConfig, LossParts, TripletPairing,
};
use crate::metrics::rank_accuracy;
use crate::numcore::Matrix;
use crate::preprocess::SpotDataset;
use crate::rng::{mix, stream_rng};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

/// Trials used for the per-epoch rank-accuracy signal. Far more than the
/// 8-trial evaluation default: the held-out slice is small and the logged
/// curve should reflect the embedding geometry, not trial noise.
pub const RANK_SIGNAL_TRIALS: usize = 800;

mod stage {
    pub const HOLDOUT: u64 = 0x20;
    pub const SHUFFLE: u64 = 0x21;
    pub const STEP: u64 = 0x22;
    pub const RANK_EVAL: u64 = 0x23;
    pub const AUG_WEAK: u64 = 0x24;
    pub const AUG_STRONG: u64 = 0x25;
    pub const PAIRINGS: u64 = 0x26;
}

/// Which loss components participate in training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    NoRank,
    NoDistil,
    ContrastiveOnly,
}

impl Ablation {
    pub fn rank_enabled(&self) -> bool {
        matches!(self, Ablation::Full | Ablation::NoDistil)
    }

    pub fn distil_enabled(&self) -> bool {
        matches!(self, Ablation::Full | Ablation::NoRank)
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Ablation::Full),
            "no_rank" => Ok(Ablation::NoRank),
            "no_distil" => Ok(Ablation::NoDistil),
            "contrastive_only" => Ok(Ablation::ContrastiveOnly),
            other => Err(Error::Config(format!(
                "unknown ablation {other:?} (expected full, no_rank, no_distil, contrastive_only)"
            ))),
        }
    }
}

/// Full training configuration. Desk-scale defaults; the reference-scale
/// settings (batch 64, 100 epochs, 1024-dim embeddings) are one config away.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_image: f64,
    pub lr_gene: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub ema_momentum: f64,
    pub embed_dim: usize,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
    pub seed: u64,
    pub ablation: Ablation,
    /// Which image branch feeds the gradient-bearing losses. The teacher
    /// variant keeps the contrastive loss gradient-free on the image side.
    pub contrastive_branch: Branch,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            epochs: 30,
            lr_image: 1e-4,
            lr_gene: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            ema_momentum: 0.96,
            embed_dim: 64,
            loss: LossConfig::default(),
            augment: AugmentConfig::default(),
            seed: 0,
            ablation: Ablation::Full,
            contrastive_branch: Branch::Student,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 3 {
            return Err(Error::Config(format!(
                "batch size must be >= 3 (ranking needs triples), got {}",
                self.batch_size
            )));
        }
        if !(self.lr_image > 0.0) || !(self.lr_gene > 0.0) {
            return Err(Error::Config(format!(
                "learning rates must be > 0, got {} and {}",
                self.lr_image, self.lr_gene
            )));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Config("Adam betas must be in [0, 1)".into()));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Config("Adam eps must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.ema_momentum) {
            return Err(Error::Config(format!(
                "EMA momentum must be in [0, 1), got {}",
                self.ema_momentum
            )));
        }
        if self.embed_dim == 0 {
            return Err(Error::Config("embed_dim must be positive".into()));
        }
        self.loss.validate()?;
        self.augment.validate()
    }

    fn image_hyper(&self) -> AdamHyper {
        AdamHyper {
            lr: self.lr_image,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    fn gene_hyper(&self) -> AdamHyper {
        AdamHyper {
            lr: self.lr_gene,
            ..self.image_hyper()
        }
    }
}

/// One mini-batch of paired blocks (rows are spots).
#[derive(Debug, Clone)]
pub struct Batch {
    pub expression: Matrix,
    pub image_features: Matrix,
}

/// Mutable training state: encoders plus both optimizers.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub encoders: EncoderState,
    pub adam_image: AdamState,
    pub adam_gene: AdamState,
}

impl TrainState {
    pub fn new(encoders: EncoderState) -> Self {
        TrainState {
            adam_image: AdamState::zeros_like(&encoders.student_image),
            adam_gene: AdamState::zeros_like(&encoders.gene),
            encoders,
        }
    }
}

/// Loss components of one step (masked components are 0).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub loss_total: f64,
    pub loss_contrastive: f64,
    pub loss_rank: f64,
    pub loss_distil: f64,
}

/// Per-epoch means of the step losses plus the held-out rank accuracy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_contrastive: f64,
    pub loss_rank: f64,
    pub loss_distil: f64,
    pub rank_accuracy: f64,
}

/// Everything a run logs: one row per completed epoch plus the random-init
/// rank accuracy on the held-out slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub initial_rank_accuracy: f64,
    pub epochs: Vec<EpochStats>,
}

/// Renders history rows in the `history.csv` layout.
pub fn history_to_csv(history: &TrainHistory) -> String {
    let mut out = String::from(
        "epoch,loss_total,loss_contrastive,loss_rank,loss_distil,rank_accuracy\n",
    );
    for e in &history.epochs {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            e.epoch, e.loss_total, e.loss_contrastive, e.loss_rank, e.loss_distil, e.rank_accuracy
        ));
    }
    out
}

fn gather_rows(m: &Matrix, indices: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(indices.len(), m.cols());
    for (r, &i) in indices.iter().enumerate() {
        out.row_mut(r).copy_from_slice(m.row(i));
    }
    out
}

/// Adds `scale · (dS + dSᵀ)·E` to `acc`: the chain rule from a self-similarity
/// matrix `S = E·Eᵀ` back to the embedding rows. Clamping inside the
/// similarity matrix is treated as the identity.
fn accumulate_self_sim_grad(acc: &mut Matrix, d_sims: &Matrix, emb: &Matrix, scale: f64) -> Result<()> {
    let mut sym = d_sims.clone();
    let t = d_sims.transpose();
    sym.add_scaled(&t, 1.0)?;
    acc.add_scaled(&sym.matmul(emb)?, scale)
}

/// Losses and encoder gradients of one step, without touching any state.
/// Returned gradients are for the student image encoder and the gene encoder.
pub fn step_losses(
    encoders: &EncoderState,
    batch: &Batch,
    cfg: &TrainConfig,
    step_seed: u64,
) -> Result<(StepStats, crate::numcore::GradBundle, crate::numcore::GradBundle)> {
    let n = batch.expression.rows();
    if n < 3 {
        return Err(Error::Validation(format!(
            "train step needs a batch of >= 3 spots, got {n}"
        )));
    }
    if batch.image_features.rows() != n {
        return Err(Error::shape(
            "train_step",
            format!("{n} image rows"),
            batch.image_features.rows().to_string(),
        ));
    }

    let weak = augment(
        &batch.image_features,
        AugmentMode::Weak,
        &cfg.augment,
        mix(step_seed, &[stage::AUG_WEAK]),
    );
    let strong = augment(
        &batch.image_features,
        AugmentMode::Strong,
        &cfg.augment,
        mix(step_seed, &[stage::AUG_STRONG]),
    );

    let teacher = encode_image(encoders, Branch::Teacher, &weak)?;
    let student = encode_image(encoders, Branch::Student, &strong)?;
    let gene = encode_gene(encoders, &batch.expression)?;
    let student_cache = student.cache.as_ref().expect("student branch keeps a cache");
    let gene_cache = gene.cache.as_ref().expect("gene encoder keeps a cache");

    let contrastive_img = match cfg.contrastive_branch {
        Branch::Student => &student.embeddings,
        Branch::Teacher => &teacher.embeddings,
    };
    let contrastive = gene_image_contrastive(contrastive_img, &gene.embeddings, &cfg.loss)?;

    let mut d_student = Matrix::zeros(n, encoders.embed_dim);
    let mut d_gene = contrastive.d_gene;
    if cfg.contrastive_branch == Branch::Student {
        d_student.add_scaled(&contrastive.d_image, 1.0)?;
    }

    let mut loss_rank = 0.0;
    if cfg.ablation.rank_enabled() {
        let sim_gene = cosine_sim_matrix(&gene.embeddings, &gene.embeddings)?;
        let sim_image = cosine_sim_matrix(&student.embeddings, &student.embeddings)?;
        let pairing_seed = mix(step_seed, &[stage::PAIRINGS]);
        let pairings: Vec<TripletPairing> = (0..n)
            .map(|p| sample_pairings(n, p, pairing_seed))
            .collect::<Result<_>>()?;
        let rank = ranking_loss_sampled(&sim_gene, &sim_image, &pairings, &cfg.loss)?;
        loss_rank = rank.loss;
        // Gradient application is skipped entirely at weight zero so that an
        // ablation mask and lambda1 = 0 produce bit-identical updates.
        if cfg.loss.lambda1 != 0.0 {
            accumulate_self_sim_grad(
                &mut d_student,
                &rank.d_image_sims,
                student.embeddings.matrix(),
                cfg.loss.lambda1,
            )?;
            if !cfg.loss.detach_gene_sims {
                accumulate_self_sim_grad(
                    &mut d_gene,
                    &rank.d_gene_sims,
                    gene.embeddings.matrix(),
                    cfg.loss.lambda1,
                )?;
            }
        }
    }

    let mut loss_distil = 0.0;
    if cfg.ablation.distil_enabled() {
        let distil = distillation_loss(&teacher.embeddings, &student.embeddings, &cfg.loss)?;
        loss_distil = distil.loss;
        if cfg.loss.lambda2 != 0.0 {
            d_student.add_scaled(&distil.d_student, cfg.loss.lambda2)?;
        }
    }

    let parts = LossParts {
        contrastive: contrastive.loss,
        rank: loss_rank,
        distil: loss_distil,
    };
    let stats = StepStats {
        loss_total: total_loss(&parts, &cfg.loss)?,
        loss_contrastive: parts.contrastive,
        loss_rank: parts.rank,
        loss_distil: parts.distil,
    };

    let grad_image = encode_backward(&encoders.student_image, student_cache, &d_student)?;
    let grad_gene = encode_backward(&encoders.gene, gene_cache, &d_gene)?;
    Ok((stats, grad_image, grad_gene))
}

/// One full training step, in order: augment, encode, three losses, backprop,
/// two Adam updates (per-encoder learning rates), then the EMA teacher update.
pub fn train_step(
    state: &mut TrainState,
    batch: &Batch,
    cfg: &TrainConfig,
    step_seed: u64,
) -> Result<StepStats> {
    let (stats, grad_image, grad_gene) = step_losses(&state.encoders, batch, cfg, step_seed)?;
    adam_step(
        &mut state.encoders.student_image,
        &grad_image,
        &mut state.adam_image,
        &cfg.image_hyper(),
    )
    .map_err(|e| wrap_component(e, "image encoder"))?;
    adam_step(
        &mut state.encoders.gene,
        &grad_gene,
        &mut state.adam_gene,
        &cfg.gene_hyper(),
    )
    .map_err(|e| wrap_component(e, "gene encoder"))?;
    ema_update(&mut state.encoders, cfg.ema_momentum)?;
    Ok(stats)
}

fn wrap_component(e: Error, component: &str) -> Error {
    match e {
        Error::NonFinite { component: inner } => Error::NonFinite {
            component: format!("{component}: {inner}"),
        },
        other => other,
    }
}

/// Seeded split: the last `max(3, n/10)` spots of a seeded permutation are
/// held out for the rank-accuracy signal.
pub fn holdout_split(n_spots: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let holdout = (n_spots / 10).max(3);
    if n_spots < holdout + 3 {
        return Err(Error::Validation(format!(
            "dataset too small to train: {n_spots} spots"
        )));
    }
    let mut perm: Vec<usize> = (0..n_spots).collect();
    perm.shuffle(&mut stream_rng(seed, &[stage::HOLDOUT]));
    let train = perm[..n_spots - holdout].to_vec();
    let held = perm[n_spots - holdout..].to_vec();
    Ok((train, held))
}

/// A resumable training run over one dataset.
pub struct Trainer {
    cfg: TrainConfig,
    state: TrainState,
    completed_epochs: usize,
    history: TrainHistory,
}

impl Trainer {
    /// Validates the config, builds seeded encoders sized to the dataset, and
    /// records the random-init rank accuracy on the held-out slice.
    pub fn new(dataset: &SpotDataset, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let (_, held) = holdout_split(dataset.n_spots(), cfg.seed)?;
        let encoders = EncoderState::new(
            dataset.n_genes(),
            dataset.image_dim(),
            cfg.embed_dim,
            cfg.seed,
        );
        let state = TrainState::new(encoders);
        let expression = dataset.expression_matrix();
        let image_features = dataset.image_feature_matrix();
        let initial = eval_rank_accuracy(&state.encoders, &expression, &image_features, &held, &cfg, 0)?;
        Ok(Trainer {
            cfg,
            state,
            completed_epochs: 0,
            history: TrainHistory {
                initial_rank_accuracy: initial,
                epochs: Vec::new(),
            },
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn encoders(&self) -> &EncoderState {
        &self.state.encoders
    }

    pub fn history(&self) -> &TrainHistory {
        &self.history
    }

    pub fn completed_epochs(&self) -> usize {
        self.completed_epochs
    }

    fn check_dataset(&self, dataset: &SpotDataset) -> Result<()> {
        if dataset.n_genes() != self.state.encoders.gene_input_dim()
            || dataset.image_dim() != self.state.encoders.image_input_dim()
        {
            return Err(Error::shape(
                "train",
                format!(
                    "dataset with {} genes and image dim {}",
                    self.state.encoders.gene_input_dim(),
                    self.state.encoders.image_input_dim()
                ),
                format!("{} genes, image dim {}", dataset.n_genes(), dataset.image_dim()),
            ));
        }
        Ok(())
    }

    /// Runs epochs until `cfg.epochs` are complete.
    pub fn run(&mut self, dataset: &SpotDataset) -> Result<()> {
        let remaining = self.cfg.epochs.saturating_sub(self.completed_epochs);
        self.run_epochs(dataset, remaining)
    }

    /// Runs up to `n_epochs` more epochs (bounded by `cfg.epochs`).
    pub fn run_epochs(&mut self, dataset: &SpotDataset, n_epochs: usize) -> Result<()> {
        self.check_dataset(dataset)?;
        let expression = dataset.expression_matrix();
        let image_features = dataset.image_feature_matrix();
        let (train_idx, held) = holdout_split(dataset.n_spots(), self.cfg.seed)?;
        let end = self.cfg.epochs.min(self.completed_epochs + n_epochs);
        while self.completed_epochs < end {
            let epoch = self.completed_epochs;
            let stats = self.run_one_epoch(&expression, &image_features, &train_idx, &held, epoch)?;
            self.history.epochs.push(stats);
            self.completed_epochs += 1;
        }
        Ok(())
    }

    fn run_one_epoch(
        &mut self,
        expression: &Matrix,
        image_features: &Matrix,
        train_idx: &[usize],
        held: &[usize],
        epoch: usize,
    ) -> Result<EpochStats> {
        let mut order = train_idx.to_vec();
        order.shuffle(&mut stream_rng(self.cfg.seed, &[stage::SHUFFLE, epoch as u64]));

        let mut sums = StepStats {
            loss_total: 0.0,
            loss_contrastive: 0.0,
            loss_rank: 0.0,
            loss_distil: 0.0,
        };
        let mut steps = 0usize;
        for (step_idx, chunk) in order.chunks(self.cfg.batch_size).enumerate() {
            if chunk.len() < 3 {
                // Ranking needs triples; drop the undersized tail batch.
                break;
            }
            let batch = Batch {
                expression: gather_rows(expression, chunk),
                image_features: gather_rows(image_features, chunk),
            };
            let step_seed = mix(self.cfg.seed, &[stage::STEP, epoch as u64, step_idx as u64]);
            let stats = train_step(&mut self.state, &batch, &self.cfg, step_seed)?;
            sums.loss_total += stats.loss_total;
            sums.loss_contrastive += stats.loss_contrastive;
            sums.loss_rank += stats.loss_rank;
            sums.loss_distil += stats.loss_distil;
            steps += 1;
        }
        if steps == 0 {
            return Err(Error::Validation(
                "no batch of at least 3 spots; shrink the batch size or add data".into(),
            ));
        }
        let denom = steps as f64;
        let rank_acc = eval_rank_accuracy(
            &self.state.encoders,
            expression,
            image_features,
            held,
            &self.cfg,
            epoch as u64 + 1,
        )?;
        Ok(EpochStats {
            epoch,
            loss_total: sums.loss_total / denom,
            loss_contrastive: sums.loss_contrastive / denom,
            loss_rank: sums.loss_rank / denom,
            loss_distil: sums.loss_distil / denom,
            rank_accuracy: rank_acc,
        })
    }

    /// Snapshot sufficient to resume the run bit-exactly.
    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            encoders: self.state.encoders.clone(),
            adam_image: self.state.adam_image.clone(),
            adam_gene: self.state.adam_gene.clone(),
            config: self.cfg.clone(),
            epoch: self.completed_epochs,
            history: self.history.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        ckpt.config.validate()?;
        Ok(Trainer {
            state: TrainState {
                adam_image: ckpt.adam_image,
                adam_gene: ckpt.adam_gene,
                encoders: ckpt.encoders,
            },
            cfg: ckpt.config,
            completed_epochs: ckpt.epoch,
            history: ckpt.history,
        })
    }
}

/// Rank accuracy of teacher image embeddings against gene embeddings on the
/// held-out slice, with un-augmented inputs.
fn eval_rank_accuracy(
    encoders: &EncoderState,
    expression: &Matrix,
    image_features: &Matrix,
    held: &[usize],
    cfg: &TrainConfig,
    eval_index: u64,
) -> Result<f64> {
    let expr = gather_rows(expression, held);
    let feats = gather_rows(image_features, held);
    let gene = encode_gene(encoders, &expr)?;
    let image = encode_image(encoders, Branch::Teacher, &feats)?;
    rank_accuracy(
        &gene.embeddings,
        &image.embeddings,
        RANK_SIGNAL_TRIALS,
        mix(cfg.seed, &[stage::RANK_EVAL, eval_index]),
    )
}

/// Trains from scratch: epoch loop with seeded batch shuffling, per-epoch
/// loss/rank-accuracy history.
pub fn train(dataset: &SpotDataset, cfg: &TrainConfig) -> Result<(EncoderState, TrainHistory)> {
    let mut trainer = Trainer::new(dataset, cfg.clone())?;
    trainer.run(dataset)?;
    let Trainer { state, history, .. } = trainer;
    Ok((state.encoders, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate, SynthConfig};

    fn small_dataset() -> SpotDataset {
        generate(&SynthConfig {
            grid_h: 6,
            grid_w: 6,
            n_genes: 24,
            image_dim: 10,
            latent_dim: 4,
            ..SynthConfig::default()
        })
        .unwrap()
        .dataset
    }

    fn small_config(seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: 8,
            epochs: 2,
            embed_dim: 16,
            seed,
            ..TrainConfig::default()
        }
    }

    fn batch_from(ds: &SpotDataset, take: usize) -> Batch {
        let idx: Vec<usize> = (0..take).collect();
        Batch {
            expression: gather_rows(&ds.expression_matrix(), &idx),
            image_features: gather_rows(&ds.image_feature_matrix(), &idx),
        }
    }

    #[test]
    fn train_step_is_deterministic() {
        let ds = small_dataset();
        let cfg = small_config(5);
        let batch = batch_from(&ds, 8);
        let mut a = TrainState::new(EncoderState::new(24, 10, 16, 5));
        let mut b = a.clone();
        for step in 0..3 {
            let sa = train_step(&mut a, &batch, &cfg, mix(5, &[step])).unwrap();
            let sb = train_step(&mut b, &batch, &cfg, mix(5, &[step])).unwrap();
            assert_eq!(sa, sb);
        }
        assert_eq!(a, b);
    }

    #[test]
    fn ablation_mask_matches_zero_lambda_exactly() {
        let ds = small_dataset();
        let batch = batch_from(&ds, 8);
        let base = TrainState::new(EncoderState::new(24, 10, 16, 7));

        let masked_cfg = TrainConfig {
            ablation: Ablation::NoRank,
            ..small_config(7)
        };
        let zero_cfg = TrainConfig {
            ablation: Ablation::Full,
            loss: LossConfig {
                lambda1: 0.0,
                ..masked_cfg.loss
            },
            ..masked_cfg.clone()
        };
        let mut masked = base.clone();
        let mut zeroed = base.clone();
        for step in 0..3 {
            let seed = mix(7, &[step]);
            train_step(&mut masked, &batch, &masked_cfg, seed).unwrap();
            train_step(&mut zeroed, &batch, &zero_cfg, seed).unwrap();
        }
        assert_eq!(masked.encoders, zeroed.encoders);
        assert_eq!(masked.adam_image, zeroed.adam_image);
        assert_eq!(masked.adam_gene, zeroed.adam_gene);
    }

    #[test]
    fn contrastive_only_reports_zero_masked_losses() {
        let ds = small_dataset();
        let batch = batch_from(&ds, 8);
        let cfg = TrainConfig {
            ablation: Ablation::ContrastiveOnly,
            ..small_config(3)
        };
        let mut state = TrainState::new(EncoderState::new(24, 10, 16, 3));
        let stats = train_step(&mut state, &batch, &cfg, 1).unwrap();
        assert_eq!(stats.loss_rank, 0.0);
        assert_eq!(stats.loss_distil, 0.0);
        assert_eq!(stats.loss_total, stats.loss_contrastive);
    }

    #[test]
    fn teacher_changes_only_by_ema_blend() {
        let ds = small_dataset();
        let batch = batch_from(&ds, 8);
        let cfg = small_config(11);
        let mut state = TrainState::new(EncoderState::new(24, 10, 16, 11));
        // Give the teacher its own values so contamination would show.
        for layer in state.encoders.teacher_image.layers_mut() {
            for v in layer.weight.data_mut() {
                *v += 0.125;
            }
        }
        let teacher_before = state.encoders.teacher_image.to_flat();
        train_step(&mut state, &batch, &cfg, 2).unwrap();
        let student_after = state.encoders.student_image.to_flat();
        let teacher_after = state.encoders.teacher_image.to_flat();
        let m = cfg.ema_momentum;
        for ((t1, t0), s) in teacher_after
            .iter()
            .zip(&teacher_before)
            .zip(&student_after)
        {
            assert_eq!(*t1, m * t0 + (1.0 - m) * s);
        }
    }

    #[test]
    fn zero_learning_rate_freezes_parameters_except_counters() {
        let ds = small_dataset();
        let batch = batch_from(&ds, 8);
        // lr = 0 is rejected by validate() but legal at the step level.
        let cfg = TrainConfig {
            lr_image: 0.0,
            lr_gene: 0.0,
            ..small_config(13)
        };
        let mut state = TrainState::new(EncoderState::new(24, 10, 16, 13));
        let before = state.encoders.clone();
        train_step(&mut state, &batch, &cfg, 4).unwrap();
        assert_eq!(state.encoders.student_image, before.student_image);
        assert_eq!(state.encoders.gene, before.gene);
        // Teacher EMA pulls toward the unchanged student: no drift beyond
        // blend rounding.
        for (t1, t0) in state
            .encoders
            .teacher_image
            .to_flat()
            .iter()
            .zip(before.teacher_image.to_flat())
        {
            assert!((t1 - t0).abs() <= 1e-15 * t0.abs().max(1.0));
        }
        assert_eq!(state.adam_image.step, 1);
    }

    #[test]
    fn step_gradients_match_finite_differences_end_to_end() {
        use crate::numcore::{grad_check, MlpParams};
        let ds = small_dataset();
        let batch = batch_from(&ds, 6);
        let cfg = TrainConfig {
            // Smooth path: ranking has hinge kinks, checked at the op level.
            ablation: Ablation::NoRank,
            ..small_config(17)
        };
        let encoders = EncoderState::new(24, 10, 8, 17);
        let (_, grad_img, grad_gene) = step_losses(&encoders, &batch, &cfg, 9).unwrap();

        let dims = encoders.student_image.dims();
        let flat = encoders.student_image.to_flat();
        let mut analytic = Vec::new();
        grad_img.flatten_params_into(&mut analytic);
        let loss_fn = |p: &[f64]| {
            let mut e = encoders.clone();
            e.student_image = MlpParams::from_flat(&dims, p)?;
            Ok(step_losses(&e, &batch, &cfg, 9)?.0.loss_total)
        };
        let err = grad_check(loss_fn, &flat, &analytic, 1e-6).unwrap();
        assert!(err < 1e-4, "student image grad error {err}");

        let dims = encoders.gene.dims();
        let flat = encoders.gene.to_flat();
        let mut analytic = Vec::new();
        grad_gene.flatten_params_into(&mut analytic);
        let loss_fn = |p: &[f64]| {
            let mut e = encoders.clone();
            e.gene = MlpParams::from_flat(&dims, p)?;
            Ok(step_losses(&e, &batch, &cfg, 9)?.0.loss_total)
        };
        let err = grad_check(loss_fn, &flat, &analytic, 1e-6).unwrap();
        assert!(err < 1e-4, "gene grad error {err}");
    }

    #[test]
    fn training_runs_and_history_has_one_row_per_epoch() {
        let ds = small_dataset();
        let cfg = small_config(19);
        let (_, history) = train(&ds, &cfg).unwrap();
        assert_eq!(history.epochs.len(), cfg.epochs);
        for (i, e) in history.epochs.iter().enumerate() {
            assert_eq!(e.epoch, i);
            // Eq. 6 consistency of the logged means.
            let recomputed = e.loss_contrastive
                + cfg.loss.lambda1 * e.loss_rank
                + cfg.loss.lambda2 * e.loss_distil;
            assert!((e.loss_total - recomputed).abs() < 1e-9 * (1.0 + e.loss_total.abs()));
        }
    }

    #[test]
    fn zero_epochs_returns_initial_state() {
        let ds = small_dataset();
        let cfg = TrainConfig {
            epochs: 0,
            ..small_config(23)
        };
        let (encoders, history) = train(&ds, &cfg).unwrap();
        assert!(history.epochs.is_empty());
        assert_eq!(encoders, EncoderState::new(24, 10, 16, 23));
    }

    #[test]
    fn identical_seeds_reproduce_bitwise() {
        let ds = small_dataset();
        let cfg = small_config(29);
        let (enc_a, hist_a) = train(&ds, &cfg).unwrap();
        let (enc_b, hist_b) = train(&ds, &cfg).unwrap();
        assert_eq!(enc_a, enc_b);
        assert_eq!(hist_a, hist_b);
        assert_eq!(history_to_csv(&hist_a), history_to_csv(&hist_b));
    }

    #[test]
    fn rejects_undersized_batches_and_datasets() {
        let ds = small_dataset();
        let bad = TrainConfig {
            batch_size: 2,
            ..small_config(1)
        };
        assert!(train(&ds, &bad).is_err());
    }
}
