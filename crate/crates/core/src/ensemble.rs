//! Coil-level aggregation, meta-feature assembly, stacking, leave-coils-out
//! cross-validation, and the end-to-end evaluation pipeline.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ChannelSample, Dataset, Label, NcmSample, Provenance, NCM_DIM, NUM_CHANNELS};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::forest::{fit_forest, Forest, ForestParams};
use crate::metrics::{average_metrics, compute_metrics, pool_metrics, AveragedMetrics, Metrics};
use crate::models::{
    build_cnn_with_dropout, build_fcn, train, CnnVariant, TrainConfig, TrainedModel,
};
use crate::preprocess::{balance_to_ratio, Normalizer};
use crate::tensor::Tensor;

/// Per-coil stacked features: statistics of the coil's channel-level
/// normal-class probabilities plus the CNN broken-class probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaFeatureRow {
    pub coil_id: String,
    pub fcn_min: f64,
    pub fcn_std: f64,
    pub fcn_mean: f64,
    pub cnn_prob: f64,
    pub label: Label,
}

impl MetaFeatureRow {
    /// Fixed feature order (min, std, mean, cnn_prob).
    pub fn features(&self) -> [f64; 4] {
        [self.fcn_min, self.fcn_std, self.fcn_mean, self.cnn_prob]
    }
}

/// Minimum, population standard deviation, and mean of a value sequence.
pub fn aggregate_stats(values: &[f64]) -> (f64, f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    (min, var.sqrt(), mean)
}

/// (min, std, mean) over exactly 20 per-channel probabilities.
pub fn aggregate_coil(channel_probs: &[f64]) -> Result<(f64, f64, f64)> {
    if channel_probs.len() != NUM_CHANNELS {
        return Err(Error::Contract(format!(
            "aggregate_coil: expected {} channel probabilities, got {}",
            NUM_CHANNELS,
            channel_probs.len()
        )));
    }
    Ok(aggregate_stats(channel_probs))
}

/// Coil-disjoint fold assignments with stratified 70/30 base-train/tune
/// sub-splits inside each fold's fit set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub folds: Vec<FoldSplit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub test: Vec<String>,
    pub base_train: Vec<String>,
    pub tune: Vec<String>,
}

fn seeded_shuffle<T, R: Rng>(items: &mut [T], rng: &mut R) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}

/// Deals shuffled coils into k folds, balancing broken counts across folds.
pub fn group_kfold(
    coil_labels: &BTreeMap<String, Label>,
    k: usize,
    seed: u64,
) -> Result<FoldPlan> {
    if k == 0 || coil_labels.len() < k {
        return Err(Error::Contract(format!(
            "group_kfold: k={} with {} coils",
            k,
            coil_labels.len()
        )));
    }
    let mut broken: Vec<&String> = coil_labels
        .iter()
        .filter(|(_, &l)| l == Label::Broken)
        .map(|(c, _)| c)
        .collect();
    if broken.is_empty() {
        return Err(Error::Contract("group_kfold: no broken coils".into()));
    }
    let mut normal: Vec<&String> = coil_labels
        .iter()
        .filter(|(_, &l)| l == Label::Normal)
        .map(|(c, _)| c)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "kfold", 0));
    seeded_shuffle(&mut broken, &mut rng);
    seeded_shuffle(&mut normal, &mut rng);
    let mut tests: Vec<Vec<String>> = vec![Vec::new(); k];
    for (i, c) in broken.iter().chain(normal.iter()).enumerate() {
        tests[i % k].push((*c).clone());
    }
    let mut folds = Vec::with_capacity(k);
    for (f, test) in tests.iter().enumerate() {
        let test_set: BTreeSet<&str> = test.iter().map(|s| s.as_str()).collect();
        let mut fit_broken: Vec<&String> = Vec::new();
        let mut fit_normal: Vec<&String> = Vec::new();
        for (c, &l) in coil_labels {
            if test_set.contains(c.as_str()) {
                continue;
            }
            if l == Label::Broken {
                fit_broken.push(c);
            } else {
                fit_normal.push(c);
            }
        }
        let mut frng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "fit-split", f as u64));
        let mut base_train = Vec::new();
        let mut tune = Vec::new();
        for class in [&mut fit_broken, &mut fit_normal] {
            seeded_shuffle(class, &mut frng);
            let n_tune = (class.len() as f64 * 0.3).round() as usize;
            for (i, c) in class.iter().enumerate() {
                if i < n_tune {
                    tune.push((*c).clone());
                } else {
                    base_train.push((*c).clone());
                }
            }
        }
        let mut test = test.clone();
        test.sort();
        base_train.sort();
        tune.sort();
        folds.push(FoldSplit {
            test,
            base_train,
            tune,
        });
    }
    Ok(FoldPlan { k, folds })
}

/// Meta-learner plus the stratified 50/50 split it was fit on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackedModel {
    pub forest: Forest,
    pub fit_indices: Vec<usize>,
    pub holdout_indices: Vec<usize>,
    pub holdout_metrics: Metrics,
}

/// Stratified 50/50 split by coil; forest fit on one half, metrics on the
/// held-out half.
pub fn stacked_fit(
    rows: &[MetaFeatureRow],
    params: &ForestParams,
    split_seed: u64,
) -> Result<StackedModel> {
    let (fit_indices, holdout_indices) = stacked_split(rows, split_seed)?;
    let x: Vec<Vec<f64>> = fit_indices
        .iter()
        .map(|&i| rows[i].features().to_vec())
        .collect();
    let y: Vec<usize> = fit_indices
        .iter()
        .map(|&i| rows[i].label.class_index())
        .collect();
    let forest = fit_forest(&x, &y, params)?;
    let mut preds = Vec::new();
    let mut labels = Vec::new();
    for &i in &holdout_indices {
        let (c, _) = forest.predict(&rows[i].features())?;
        preds.push(c);
        labels.push(rows[i].label.class_index());
    }
    let holdout_metrics = compute_metrics(&preds, &labels)?;
    Ok(StackedModel {
        forest,
        fit_indices,
        holdout_indices,
        holdout_metrics,
    })
}

/// The stratified 50/50 fit/holdout split used by [`stacked_fit`].
pub fn stacked_split(rows: &[MetaFeatureRow], split_seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let broken: Vec<usize> = (0..rows.len())
        .filter(|&i| rows[i].label == Label::Broken)
        .collect();
    let normal: Vec<usize> = (0..rows.len())
        .filter(|&i| rows[i].label == Label::Normal)
        .collect();
    if broken.len() < 2 || normal.len() < 2 {
        return Err(Error::TrainingDegeneracy(format!(
            "stacked_fit: need >= 2 rows per class, have {} broken / {} normal",
            broken.len(),
            normal.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed);
    let mut fit = Vec::new();
    let mut holdout = Vec::new();
    for class in [broken, normal] {
        let mut idx = class;
        seeded_shuffle(&mut idx, &mut rng);
        let n_fit = idx.len().div_ceil(2);
        for (i, r) in idx.into_iter().enumerate() {
            if i < n_fit {
                fit.push(r);
            } else {
                holdout.push(r);
            }
        }
    }
    fit.sort_unstable();
    holdout.sort_unstable();
    Ok((fit, holdout))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub k_folds: usize,
    pub seed: u64,
    pub cnn_variants: Vec<CnnVariant>,
    pub cnn_dropout: f64,
    pub augment: bool,
    pub target_ratio: f64,
    pub fcn_hidden: [usize; 4],
    pub fcn_dropout: f64,
    pub fcn_train: TrainConfig,
    pub cnn_train: TrainConfig,
    pub forest: ForestParams,
    /// Additionally fit one meta model on a single 50/50 split over all
    /// folds' pooled meta rows (reported as `stacked_*_pooled`).
    pub pooled_meta_split: bool,
    pub jobs: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            k_folds: 10,
            seed: 0,
            cnn_variants: vec![CnnVariant::Cnn2],
            cnn_dropout: 0.3,
            augment: true,
            target_ratio: 0.2,
            fcn_hidden: [64, 64, 32, 16],
            fcn_dropout: 0.2,
            fcn_train: TrainConfig::default(),
            cnn_train: TrainConfig {
                max_epochs: 20,
                patience: 5,
                ..TrainConfig::default()
            },
            forest: ForestParams {
                // four meta features: use all of them at every split
                features_per_split: 0,
                ..ForestParams::default()
            },
            pooled_meta_split: true,
            jobs: 1,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_folds < 2 {
            return Err(Error::Contract("k_folds must be >= 2".into()));
        }
        if self.cnn_variants.is_empty() {
            return Err(Error::Contract("at least one CNN variant required".into()));
        }
        if !(self.target_ratio > 0.0 && self.target_ratio < 1.0) {
            return Err(Error::Contract(format!(
                "target ratio {} outside (0,1)",
                self.target_ratio
            )));
        }
        self.fcn_train.validate()?;
        self.cnn_train.validate()?;
        Ok(())
    }

    /// CNN variant feeding the stacked meta-learner.
    pub fn stack_variant(&self) -> CnnVariant {
        if self.cnn_variants.contains(&CnnVariant::Cnn2) {
            CnnVariant::Cnn2
        } else {
            self.cnn_variants[0]
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldAudit {
    pub fold: usize,
    pub test_coils: Vec<String>,
    pub base_train_coils: Vec<String>,
    pub tune_coils: Vec<String>,
    pub normalizer_means: Vec<f64>,
    pub normalizer_stds: Vec<f64>,
    /// Augmented samples seen in the test fold; the leak guard requires 0.
    pub test_augmented_count: usize,
    /// Test coils skipped in meta-feature assembly for lacking a data level.
    pub skipped_meta_coils: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldOutcome {
    pub fold: usize,
    pub ok: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: String,
    pub per_fold: Vec<Option<Metrics>>,
    /// Arithmetic mean of per-fold metrics.
    pub averaged: AveragedMetrics,
    /// Metrics recomputed from pooled confusion counts.
    pub pooled: Metrics,
}

/// Per-fold and averaged metrics for every model stage, plus the full
/// configuration fingerprint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: PipelineConfig,
    pub augmentation_enabled: bool,
    pub stages: Vec<StageReport>,
    pub folds: Vec<FoldOutcome>,
    pub audits: Vec<FoldAudit>,
}

impl EvalReport {
    pub fn stage(&self, name: &str) -> Option<&StageReport> {
        self.stages.iter().find(|s| s.stage == name)
    }

    pub fn any_fold_failed(&self) -> bool {
        self.folds.iter().any(|f| !f.ok)
    }
}

struct FoldResult {
    metrics: Vec<(String, Metrics)>,
    audit: FoldAudit,
    meta_rows: Vec<MetaFeatureRow>,
}

fn channel_rows_for<'a>(
    dataset: &'a Dataset,
    coils: &BTreeSet<&str>,
) -> Vec<&'a ChannelSample> {
    dataset
        .channel
        .iter()
        .filter(|s| coils.contains(s.coil_id.as_str()))
        .collect()
}

fn ncm_rows_for<'a>(dataset: &'a Dataset, coils: &BTreeSet<&str>) -> Vec<&'a NcmSample> {
    dataset
        .ncm
        .iter()
        .filter(|s| coils.contains(s.coil_id.as_str()))
        .collect()
}

fn channel_tensor(rows: &[&ChannelSample], normalizer: &Normalizer) -> (Tensor, Vec<usize>) {
    let mut data = Vec::with_capacity(rows.len() * 4);
    let mut labels = Vec::with_capacity(rows.len());
    for r in rows {
        data.extend(normalizer.transform(&r.features));
        labels.push(r.label.class_index());
    }
    (
        Tensor::new(vec![rows.len(), 4], data).unwrap(),
        labels,
    )
}

fn ncm_tensor(rows: &[&NcmSample]) -> (Tensor, Vec<usize>) {
    let mut data = Vec::with_capacity(rows.len() * NCM_DIM * NCM_DIM);
    let mut labels = Vec::with_capacity(rows.len());
    for r in rows {
        data.extend_from_slice(&r.matrix);
        labels.push(r.label.class_index());
    }
    (
        Tensor::new(vec![rows.len(), 1, NCM_DIM, NCM_DIM], data).unwrap(),
        labels,
    )
}

/// Groups a coil's channel rows into measurement events (file order within
/// each channel index) and returns per-event probability vectors of the
/// NORMAL class, one entry per channel.
fn coil_event_normal_probs(
    rows: &[&ChannelSample],
    broken_probs: &[f64],
) -> Vec<Vec<f64>> {
    debug_assert_eq!(rows.len(), broken_probs.len());
    let mut per_channel: Vec<Vec<f64>> = vec![Vec::new(); NUM_CHANNELS];
    for (r, &p) in rows.iter().zip(broken_probs) {
        per_channel[r.channel_index].push(1.0 - p);
    }
    let events = per_channel.iter().map(|v| v.len()).min().unwrap_or(0);
    (0..events)
        .map(|e| (0..NUM_CHANNELS).map(|c| per_channel[c][e]).collect())
        .collect()
}

/// Per-coil aggregated FCN statistics over the normal-class probabilities:
/// per-event (min, std, mean), then averaged across the coil's events.
pub fn coil_fcn_stats(
    rows: &[&ChannelSample],
    broken_probs: &[f64],
) -> Result<(f64, f64, f64)> {
    let events = coil_event_normal_probs(rows, broken_probs);
    if events.is_empty() {
        return Err(Error::Contract(
            "coil_fcn_stats: no complete measurement event".into(),
        ));
    }
    let mut acc = (0.0, 0.0, 0.0);
    for ev in &events {
        let (mn, sd, me) = aggregate_coil(ev)?;
        acc.0 += mn;
        acc.1 += sd;
        acc.2 += me;
    }
    let n = events.len() as f64;
    Ok((acc.0 / n, acc.1 / n, acc.2 / n))
}

/// One meta-feature row per coil in `coils` that has both data levels; the
/// second element counts skipped coils.
pub fn build_meta_features(
    fcn_model: &TrainedModel,
    cnn_model: &TrainedModel,
    dataset: &Dataset,
    coils: &[String],
) -> Result<(Vec<MetaFeatureRow>, usize)> {
    let normalizer = fcn_model
        .normalizer
        .as_ref()
        .ok_or_else(|| Error::Contract("FCN model lacks a normalizer".into()))?;
    let mut rows = Vec::new();
    let mut skipped = 0usize;
    for coil in coils {
        let set: BTreeSet<&str> = [coil.as_str()].into();
        let ch = channel_rows_for(dataset, &set);
        let ncms: Vec<&NcmSample> = ncm_rows_for(dataset, &set)
            .into_iter()
            .filter(|s| s.provenance == Provenance::Measured)
            .collect();
        if ch.is_empty() || ncms.is_empty() {
            skipped += 1;
            continue;
        }
        let (x, _) = channel_tensor(&ch, normalizer);
        let probs = batch_probs(fcn_model, &x)?;
        let (fcn_min, fcn_std, fcn_mean) = coil_fcn_stats(&ch, &probs)?;
        let (nx, _) = ncm_tensor(&ncms);
        let nprobs = batch_probs(cnn_model, &nx)?;
        let cnn_prob = nprobs.iter().sum::<f64>() / nprobs.len() as f64;
        rows.push(MetaFeatureRow {
            coil_id: coil.clone(),
            fcn_min,
            fcn_std,
            fcn_mean,
            cnn_prob,
            label: dataset
                .coil_label(coil)
                .ok_or_else(|| Error::Contract(format!("unknown coil {coil}")))?,
        });
    }
    Ok((rows, skipped))
}

/// Broken-class probabilities for a pre-assembled `[n, ...]` batch.
fn batch_probs(model: &TrainedModel, batch: &Tensor) -> Result<Vec<f64>> {
    let mut net = model.network.clone();
    Ok(net
        .infer_batch(batch)?
        .into_iter()
        .map(|r| r[crate::models::BROKEN_CLASS])
        .collect())
}

fn run_fold(
    dataset: &Dataset,
    config: &PipelineConfig,
    plan: &FoldPlan,
    fold: usize,
) -> Result<FoldResult> {
    let split = &plan.folds[fold];
    let test_set: BTreeSet<&str> = split.test.iter().map(|s| s.as_str()).collect();
    let train_set: BTreeSet<&str> = split.base_train.iter().map(|s| s.as_str()).collect();
    let tune_set: BTreeSet<&str> = split.tune.iter().map(|s| s.as_str()).collect();
    if train_set.iter().any(|c| test_set.contains(c))
        || tune_set.iter().any(|c| test_set.contains(c))
    {
        return Err(Error::Contract(format!(
            "fold {fold}: fit and test coil sets overlap"
        )));
    }

    // --- 1-D level: normalizer (base-train only) + FCN ---
    let train_ch = channel_rows_for(dataset, &train_set);
    let tune_ch = channel_rows_for(dataset, &tune_set);
    let test_ch = channel_rows_for(dataset, &test_set);
    let train_rows: Vec<&[f64]> = train_ch.iter().map(|s| s.features.as_slice()).collect();
    let normalizer = Normalizer::fit(&train_rows)?;

    let (fcn_x, fcn_y) = channel_tensor(&train_ch, &normalizer);
    let (tune_x, tune_y) = channel_tensor(&tune_ch, &normalizer);
    let fcn_spec = build_fcn(config.fcn_hidden, config.fcn_dropout)?;
    let mut fcn_cfg = config.fcn_train;
    fcn_cfg.seed = derive_seed(config.seed, "fcn", fold as u64);
    let mut fcn_model = train(fcn_spec, &fcn_x, &fcn_y, &tune_x, &tune_y, fcn_cfg)?;
    fcn_model.normalizer = Some(normalizer.clone());

    // --- matrix level: augmentation + CNNs ---
    let train_ncm_owned: Vec<NcmSample> = ncm_rows_for(dataset, &train_set)
        .into_iter()
        .cloned()
        .collect();
    let tune_ncm_owned: Vec<NcmSample> = ncm_rows_for(dataset, &tune_set)
        .into_iter()
        .cloned()
        .collect();
    let (train_ncm, tune_ncm) = if config.augment {
        let mut arng =
            ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "augment", fold as u64));
        (
            balance_to_ratio(&train_ncm_owned, config.target_ratio, &mut arng)?,
            balance_to_ratio(&tune_ncm_owned, config.target_ratio, &mut arng)?,
        )
    } else {
        (train_ncm_owned, tune_ncm_owned)
    };
    let train_ncm_refs: Vec<&NcmSample> = train_ncm.iter().collect();
    let tune_ncm_refs: Vec<&NcmSample> = tune_ncm.iter().collect();
    let (cnn_x, cnn_y) = ncm_tensor(&train_ncm_refs);
    let (ctune_x, ctune_y) = ncm_tensor(&tune_ncm_refs);

    let mut cnn_models: Vec<(CnnVariant, TrainedModel)> = Vec::new();
    for (vi, &variant) in config.cnn_variants.iter().enumerate() {
        let spec = build_cnn_with_dropout(variant, config.cnn_dropout);
        let mut cfg = config.cnn_train;
        cfg.seed = derive_seed(config.seed, variant.name(), (fold * 16 + vi) as u64);
        let model = train(spec, &cnn_x, &cnn_y, &ctune_x, &ctune_y, cfg)?;
        cnn_models.push((variant, model));
    }

    // --- evaluation on untouched test coils ---
    let test_augmented_count = ncm_rows_for(dataset, &test_set)
        .iter()
        .filter(|s| s.provenance == Provenance::Augmented)
        .count();
    if test_augmented_count > 0 {
        return Err(Error::Contract(format!(
            "fold {fold}: {test_augmented_count} augmented samples in the test fold"
        )));
    }

    let mut metrics: Vec<(String, Metrics)> = Vec::new();

    // FCN at channel level
    let (test_x, test_y) = channel_tensor(&test_ch, &fcn_model.normalizer.clone().unwrap());
    let test_probs = batch_probs(&fcn_model, &test_x)?;
    let ch_preds: Vec<usize> = test_probs.iter().map(|&p| usize::from(p >= 0.5)).collect();
    metrics.push((
        "fcn_channel".into(),
        compute_metrics(&ch_preds, &test_y)?,
    ));

    // FCN aggregated per coil: broken iff the minimum normal-class
    // probability across channels falls below 0.5
    let mut coil_preds = Vec::new();
    let mut coil_labels = Vec::new();
    let mut per_coil_stats: BTreeMap<String, (f64, f64, f64)> = BTreeMap::new();
    for coil in &split.test {
        let set: BTreeSet<&str> = [coil.as_str()].into();
        let ch = channel_rows_for(dataset, &set);
        if ch.is_empty() {
            continue;
        }
        let (x, _) = channel_tensor(&ch, fcn_model.normalizer.as_ref().unwrap());
        let probs = batch_probs(&fcn_model, &x)?;
        let stats = coil_fcn_stats(&ch, &probs)?;
        per_coil_stats.insert(coil.clone(), stats);
        coil_preds.push(usize::from(stats.0 < 0.5));
        coil_labels.push(dataset.coil_label(coil).unwrap().class_index());
    }
    metrics.push(("fcn_coil".into(), compute_metrics(&coil_preds, &coil_labels)?));

    // CNN stages per coil (mean broken probability over measured test NCMs)
    for (variant, model) in &cnn_models {
        let mut preds = Vec::new();
        let mut labels = Vec::new();
        for coil in &split.test {
            let set: BTreeSet<&str> = [coil.as_str()].into();
            let ncms: Vec<&NcmSample> = ncm_rows_for(dataset, &set)
                .into_iter()
                .filter(|s| s.provenance == Provenance::Measured)
                .collect();
            if ncms.is_empty() {
                continue;
            }
            let (x, _) = ncm_tensor(&ncms);
            let probs = batch_probs(model, &x)?;
            let p = probs.iter().sum::<f64>() / probs.len() as f64;
            preds.push(usize::from(p >= 0.5));
            labels.push(dataset.coil_label(coil).unwrap().class_index());
        }
        metrics.push((variant.name().to_string(), compute_metrics(&preds, &labels)?));
    }

    // stacking on the test coils (base models never saw them)
    let stack_variant = config.stack_variant();
    let stack_model = &cnn_models
        .iter()
        .find(|(v, _)| *v == stack_variant)
        .unwrap()
        .1;
    let (meta_rows, skipped_meta_coils) =
        build_meta_features(&fcn_model, stack_model, dataset, &split.test)?;
    let split_seed = derive_seed(config.seed, "meta-split", fold as u64);
    let stacked = stacked_fit(&meta_rows, &config.forest, split_seed)?;
    metrics.push(("stacked_rf".into(), stacked.holdout_metrics));
    let tree_params = ForestParams {
        tree_count: 1,
        bootstrap: false,
        features_per_split: 0,
        seed: derive_seed(config.seed, "meta-tree", fold as u64),
        ..config.forest
    };
    let stacked_tree = stacked_fit(&meta_rows, &tree_params, split_seed)?;
    metrics.push(("stacked_tree".into(), stacked_tree.holdout_metrics));

    Ok(FoldResult {
        metrics,
        audit: FoldAudit {
            fold,
            test_coils: split.test.clone(),
            base_train_coils: split.base_train.clone(),
            tune_coils: split.tune.clone(),
            normalizer_means: normalizer.means().to_vec(),
            normalizer_stds: normalizer.stds().to_vec(),
            test_augmented_count,
            skipped_meta_coils,
        },
        meta_rows,
    })
}

/// Executes the full per-fold pipeline and assembles the report.
pub fn run_pipeline(dataset: &Dataset, config: &PipelineConfig) -> Result<EvalReport> {
    config.validate()?;
    let plan = group_kfold(dataset.coil_labels(), config.k_folds, config.seed)?;
    let jobs = config.jobs.max(1);

    let results: Vec<std::result::Result<FoldResult, String>> = if jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::Contract(format!("thread pool: {e}")))?;
        pool.install(|| {
            use rayon::prelude::*;
            (0..config.k_folds)
                .into_par_iter()
                .map(|f| run_fold(dataset, config, &plan, f).map_err(|e| e.to_string()))
                .collect()
        })
    } else {
        (0..config.k_folds)
            .map(|f| run_fold(dataset, config, &plan, f).map_err(|e| e.to_string()))
            .collect()
    };

    let mut stage_names: Vec<String> = Vec::new();
    for r in results.iter().flatten() {
        for (name, _) in &r.metrics {
            if !stage_names.contains(name) {
                stage_names.push(name.clone());
            }
        }
    }
    let mut folds = Vec::new();
    let mut audits = Vec::new();
    let mut pooled_meta: Vec<MetaFeatureRow> = Vec::new();
    for (f, r) in results.iter().enumerate() {
        match r {
            Ok(res) => {
                folds.push(FoldOutcome {
                    fold: f,
                    ok: true,
                    error: None,
                });
                audits.push(res.audit.clone());
                pooled_meta.extend(res.meta_rows.iter().cloned());
            }
            Err(e) => folds.push(FoldOutcome {
                fold: f,
                ok: false,
                error: Some(e.clone()),
            }),
        }
    }

    let mut stages = Vec::new();
    for name in &stage_names {
        let mut per_fold: Vec<Option<Metrics>> = Vec::new();
        for r in &results {
            per_fold.push(match r {
                Ok(res) => res
                    .metrics
                    .iter()
                    .find(|(n, _)| n == name)
                    .map(|(_, m)| *m),
                Err(_) => None,
            });
        }
        let present: Vec<Metrics> = per_fold.iter().flatten().copied().collect();
        stages.push(StageReport {
            stage: name.clone(),
            averaged: average_metrics(&present),
            pooled: pool_metrics(&present),
            per_fold,
        });
    }

    // pooled-mode meta split: one 50/50 split over all folds' meta rows
    if config.pooled_meta_split && !pooled_meta.is_empty() {
        let split_seed = derive_seed(config.seed, "meta-split-pooled", 0);
        let stacked = stacked_fit(&pooled_meta, &config.forest, split_seed)?;
        stages.push(StageReport {
            stage: "stacked_rf_pooled".into(),
            per_fold: vec![None; config.k_folds],
            averaged: average_metrics(&[stacked.holdout_metrics]),
            pooled: stacked.holdout_metrics,
        });
        let tree_params = ForestParams {
            tree_count: 1,
            bootstrap: false,
            features_per_split: 0,
            seed: derive_seed(config.seed, "meta-tree-pooled", 0),
            ..config.forest
        };
        let stacked_tree = stacked_fit(&pooled_meta, &tree_params, split_seed)?;
        stages.push(StageReport {
            stage: "stacked_tree_pooled".into(),
            per_fold: vec![None; config.k_folds],
            averaged: average_metrics(&[stacked_tree.holdout_metrics]),
            pooled: stacked_tree.holdout_metrics,
        });
    }

    Ok(EvalReport {
        config: config.clone(),
        augmentation_enabled: config.augment,
        stages,
        folds,
        audits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};

    #[test]
    fn aggregate_example() {
        let (min, std, mean) = aggregate_stats(&[0.2, 0.4, 0.6]);
        assert_eq!(min, 0.2);
        assert!((mean - 0.4).abs() < 1e-15);
        // population std: sqrt(((0.2)^2 + 0 + (0.2)^2)/3) = sqrt(2/75)
        assert!((std - (2.0f64 / 75.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn aggregate_constant_input() {
        let (min, std, mean) = aggregate_stats(&[0.7; 5]);
        assert_eq!((min, std, mean), (0.7, 0.0, 0.7));
    }

    #[test]
    fn aggregate_coil_requires_twenty_channels() {
        assert!(aggregate_coil(&[0.5; 19]).is_err());
        assert!(aggregate_coil(&[0.5; 20]).is_ok());
    }

    fn labels(n_broken: usize, n_normal: usize) -> BTreeMap<String, Label> {
        let mut m = BTreeMap::new();
        for i in 0..n_broken {
            m.insert(format!("b{i:03}"), Label::Broken);
        }
        for i in 0..n_normal {
            m.insert(format!("n{i:03}"), Label::Normal);
        }
        m
    }

    #[test]
    fn kfold_partitions_coils() {
        let coils = labels(13, 87);
        let plan = group_kfold(&coils, 10, 7).unwrap();
        assert_eq!(plan.folds.len(), 10);
        let mut seen = BTreeSet::new();
        for fold in &plan.folds {
            for c in &fold.test {
                assert!(seen.insert(c.clone()), "{c} in two test folds");
            }
            // test / base_train / tune are disjoint and cover all coils
            let mut all: Vec<&String> = fold
                .test
                .iter()
                .chain(&fold.base_train)
                .chain(&fold.tune)
                .collect();
            all.sort();
            let before = all.len();
            all.dedup();
            assert_eq!(all.len(), before, "overlap inside fold");
            assert_eq!(all.len(), coils.len());
        }
        assert_eq!(seen.len(), coils.len());
    }

    #[test]
    fn kfold_spreads_broken_coils() {
        let coils = labels(20, 180);
        let plan = group_kfold(&coils, 10, 3).unwrap();
        for fold in &plan.folds {
            let broken = fold.test.iter().filter(|c| c.starts_with('b')).count();
            assert_eq!(broken, 2, "round-robin deal should give 2 per fold");
        }
    }

    #[test]
    fn kfold_is_deterministic_and_seed_sensitive() {
        let coils = labels(10, 90);
        let a = group_kfold(&coils, 5, 1).unwrap();
        let b = group_kfold(&coils, 5, 1).unwrap();
        let c = group_kfold(&coils, 5, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn kfold_contracts() {
        assert!(group_kfold(&labels(5, 5), 0, 0).is_err());
        assert!(group_kfold(&labels(5, 5), 11, 0).is_err());
        assert!(group_kfold(&labels(0, 10), 2, 0).is_err());
    }

    #[test]
    fn tune_split_is_thirty_percent_per_class() {
        let coils = labels(20, 80);
        let plan = group_kfold(&coils, 10, 5).unwrap();
        for fold in &plan.folds {
            // 18 broken + 72 normal in fit; 30% rounds to 5 + 22
            let tune_broken = fold.tune.iter().filter(|c| c.starts_with('b')).count();
            let tune_normal = fold.tune.len() - tune_broken;
            assert_eq!(tune_broken, 5);
            assert_eq!(tune_normal, 22);
        }
    }

    fn meta_rows(n_broken: usize, n_normal: usize) -> Vec<MetaFeatureRow> {
        let mut rows = Vec::new();
        for i in 0..(n_broken + n_normal) {
            let broken = i < n_broken;
            let shift = if broken { -0.4 } else { 0.0 };
            rows.push(MetaFeatureRow {
                coil_id: format!("c{i:03}"),
                fcn_min: 0.9 + shift + 0.01 * (i as f64 * 0.7).sin(),
                fcn_std: 0.05 - shift / 4.0,
                fcn_mean: 0.95 + shift / 2.0,
                cnn_prob: if broken { 0.8 } else { 0.1 },
                label: if broken { Label::Broken } else { Label::Normal },
            });
        }
        rows
    }

    #[test]
    fn stacked_split_is_stratified_half_and_half() {
        let rows = meta_rows(5, 9);
        let (fit, holdout) = stacked_split(&rows, 3).unwrap();
        assert_eq!(fit.len() + holdout.len(), rows.len());
        let count = |idx: &[usize], label| {
            idx.iter().filter(|&&i| rows[i].label == label).count()
        };
        // ceil halves go to the fit side
        assert_eq!(count(&fit, Label::Broken), 3);
        assert_eq!(count(&holdout, Label::Broken), 2);
        assert_eq!(count(&fit, Label::Normal), 5);
        assert_eq!(count(&holdout, Label::Normal), 4);
        let mut all: Vec<usize> = fit.iter().chain(&holdout).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..rows.len()).collect::<Vec<_>>());
    }

    #[test]
    fn stacked_split_needs_two_per_class() {
        assert!(stacked_split(&meta_rows(1, 10), 0).is_err());
        assert!(stacked_split(&meta_rows(10, 1), 0).is_err());
    }

    #[test]
    fn stacked_fit_separable_meta_features() {
        let rows = meta_rows(8, 24);
        let model = stacked_fit(&rows, &ForestParams::default(), 5).unwrap();
        assert!(
            model.holdout_metrics.f_score > 0.9,
            "holdout F {}",
            model.holdout_metrics.f_score
        );
        assert_eq!(
            model.fit_indices.len() + model.holdout_indices.len(),
            rows.len()
        );
    }

    #[test]
    fn pipeline_config_validation() {
        let mut cfg = PipelineConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.k_folds = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = PipelineConfig::default();
        cfg.cnn_variants.clear();
        assert!(cfg.validate().is_err());
        let mut cfg = PipelineConfig::default();
        cfg.target_ratio = 1.5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn stack_variant_prefers_cnn2() {
        let mut cfg = PipelineConfig::default();
        cfg.cnn_variants = vec![CnnVariant::Cnn1, CnnVariant::Cnn2, CnnVariant::Cnn3];
        assert_eq!(cfg.stack_variant(), CnnVariant::Cnn2);
        cfg.cnn_variants = vec![CnnVariant::Cnn4, CnnVariant::Cnn3];
        assert_eq!(cfg.stack_variant(), CnnVariant::Cnn4);
    }

    fn tiny_pipeline_config() -> PipelineConfig {
        let mut cfg = PipelineConfig::default();
        cfg.k_folds = 3;
        cfg.seed = 5;
        cfg.cnn_variants = vec![CnnVariant::Cnn2];
        cfg.fcn_hidden = [16, 16, 8, 8];
        cfg.fcn_train.max_epochs = 3;
        cfg.fcn_train.batch_size = 32;
        cfg.cnn_train.max_epochs = 2;
        cfg.cnn_train.batch_size = 16;
        cfg.forest.tree_count = 20;
        cfg
    }

    fn tiny_dataset(seed: u64) -> crate::data::Dataset {
        generate_synthetic(&SyntheticSpec {
            coils: 60,
            broken_fraction: 0.25,
            seed,
            ..SyntheticSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn pipeline_smoke_run() {
        let ds = tiny_dataset(1);
        let cfg = tiny_pipeline_config();
        let report = run_pipeline(&ds, &cfg).unwrap();
        assert!(!report.any_fold_failed(), "folds: {:?}", report.folds);
        for stage in ["fcn_channel", "fcn_coil", "cnn2", "stacked_rf", "stacked_tree"] {
            let s = report.stage(stage).unwrap_or_else(|| panic!("missing stage {stage}"));
            assert_eq!(s.per_fold.len(), 3);
            assert!(s.per_fold.iter().all(|m| m.is_some()));
        }
        // audits: no coil leaks between splits, no augmented data in test
        for audit in &report.audits {
            assert_eq!(audit.test_augmented_count, 0);
            let test: BTreeSet<_> = audit.test_coils.iter().collect();
            assert!(audit.base_train_coils.iter().all(|c| !test.contains(c)));
            assert!(audit.tune_coils.iter().all(|c| !test.contains(c)));
        }
    }

    #[test]
    fn pipeline_is_deterministic() {
        let ds = tiny_dataset(2);
        let cfg = tiny_pipeline_config();
        let a = run_pipeline(&ds, &cfg).unwrap();
        let b = run_pipeline(&ds, &cfg).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }
}
