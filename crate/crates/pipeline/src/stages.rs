//! The stages of one run and [`run_experiment`].
//!
//! Stage seeds, all `seed::derive(master, tag)`:
//!
//! | stage             | tag                    |
//! |-------------------|------------------------|
//! | dataset spec      | `dataset`              |
//! | embedder          | `embedder`             |
//! | noise predictor   | `denoiser`             |
//! | classifier        | `classifier/<arch>`    |
//! | val subsample     | `val_subsample`        |
//! | error predictor   | `error_predictor`      |
//! | generation        | `generate`             |
//! | control samples   | `controls`             |
//! | retraining seed s | `retrain/<s>`          |

use crate::config::{ReferenceSplit, RunConfig};
use crate::plot;
use crate::retrain::{mislabel, retrain_arms, samples_as_set, RetrainTable};
use crate::store::{write_json, RunRecord, StageKeys, Store};
use crate::PipelineError;
use riskydiff_core::dataset::{
    bayes_oracle, load_dataset, make_dataset, sample_mixture, save_dataset, LabeledDataset,
    LabeledSet, Split, SyntheticSpec,
};
use riskydiff_core::diffusion::{build_schedule, NoiseSchedule};
use riskydiff_core::evaluation::{evaluate, transfer_matrix, ErrorReference, EvalReport, TransferMatrix};
use riskydiff_core::models::{
    compute_model_errors, fit_error_predictor, train_classifier, train_denoiser, train_embedder,
    ClassifierArch, ErrorPredictor, IdentityDecoder, JointEmbedder, NoisePredictor, TargetClassifier,
};
use riskydiff_core::riskygen::{
    estimate_category_stats, generate, read_samples, write_sample_index, write_samples, CategoryStats,
    GeneratedSample, GenerationModels, GuidanceConfig,
};
use riskydiff_core::seed;
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::path::{Path, PathBuf};

/// Ablation arm a guidance config belongs to.
pub fn arm_label(g: &GuidanceConfig) -> &'static str {
    match (g.screening, g.s > 0.0) {
        (false, false) => "Base",
        (true, false) => "+Screening",
        (false, true) => "+Gradient",
        (true, true) => "+Both",
    }
}

/// Every trained model of one run.
pub struct Trained {
    pub dataset: LabeledDataset,
    pub embedder: JointEmbedder,
    pub denoiser: NoisePredictor,
    /// One per architecture, in [`ClassifierArch::ALL`] order.
    pub classifiers: Vec<(ClassifierArch, TargetClassifier)>,
    pub error_predictor: ErrorPredictor,
    pub stats: Vec<CategoryStats>,
}

impl Trained {
    pub fn classifier(&self, arch: ClassifierArch) -> &TargetClassifier {
        &self
            .classifiers
            .iter()
            .find(|(a, _)| *a == arch)
            .expect("every architecture is trained")
            .1
    }
}

/// `reports/eval-<run>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub arm: String,
    pub config_hash: String,
    pub generation_key: String,
    pub evaluation: EvalReport,
    pub transfer: TransferMatrix,
}

/// `reports/retrain-<run>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainReport {
    pub arm: String,
    pub config_hash: String,
    pub generation_key: String,
    pub config: serde_json::Value,
    pub table: RetrainTable,
}

/// Stratified subsample keeping `max(1, round(fraction·n_y))` rows of every
/// label, in their original order.
pub fn stratified_subsample(set: &LabeledSet, fraction: f64, seed: u64) -> LabeledSet {
    if fraction >= 1.0 {
        return set.clone();
    }
    let mut keep = Vec::new();
    for y in 0..set.num_classes() {
        let mut rows: Vec<usize> = (0..set.len()).filter(|&i| set.y[i] == y).collect();
        if rows.is_empty() {
            continue;
        }
        rows.sort_by_key(|&i| seed::derive(seed, &i.to_string()));
        let n = ((fraction * rows.len() as f64).round() as usize).clamp(1, rows.len());
        keep.extend_from_slice(&rows[..n]);
    }
    keep.sort_unstable();
    set.select(&keep)
}

/// One run over a shared [`Store`].
pub struct Pipeline<'a> {
    pub cfg: RunConfig,
    pub keys: StageKeys,
    pub record: RunRecord,
    store: &'a Store,
    schedule: NoiseSchedule,
}

impl<'a> Pipeline<'a> {
    pub fn new(cfg: RunConfig, store: &'a Store) -> Result<Self, PipelineError> {
        cfg.validate()?;
        let schedule = build_schedule(&cfg.schedule.beta, cfg.schedule.steps)
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        Ok(Self {
            keys: StageKeys::new(&cfg),
            record: RunRecord::new(&cfg),
            cfg,
            store,
            schedule,
        })
    }

    pub fn store(&self) -> &Store {
        self.store
    }

    fn seed(&self, tag: &str) -> u64 {
        seed::derive(self.cfg.seed, tag)
    }

    /// Short run identifier used in report names.
    pub fn run_tag(&self) -> String {
        self.record.config_hash[..16].to_string()
    }

    fn mark(&mut self, stage: &str, key: &str, paths: &[PathBuf]) -> Result<(), PipelineError> {
        self.record.mark(stage, key, self.store.root(), paths);
        self.record.save(self.store.root())
    }

    pub fn spec(&self) -> SyntheticSpec {
        SyntheticSpec::standard(&self.cfg.dataset, self.seed("dataset"))
    }

    pub fn dataset(&mut self) -> Result<LabeledDataset, PipelineError> {
        const STAGE: &str = "data";
        let key = self.keys.data.clone();
        let dir = self.store.checkpoint_dir(STAGE, &key);
        let path = dir.join("dataset.bin");
        let spec = self.spec();
        let ds = if self.store.is_cached_dir(&dir) {
            load_dataset(&path, Some(&spec.hash())).map_err(PipelineError::stage(STAGE))?
        } else {
            self.store.begin(&dir).map_err(PipelineError::stage(STAGE))?;
            let ds = make_dataset(&spec).map_err(PipelineError::stage(STAGE))?;
            save_dataset(&ds, &path).map_err(PipelineError::stage(STAGE))?;
            self.store.finish_dir(&dir).map_err(PipelineError::stage(STAGE))?;
            ds
        };
        self.mark(STAGE, &key, &[path])?;
        Ok(ds)
    }

    pub fn embedder(&mut self, ds: &LabeledDataset) -> Result<JointEmbedder, PipelineError> {
        const STAGE: &str = "embedder";
        let key = self.keys.embedder.clone();
        let dir = self.store.checkpoint_dir(STAGE, &key);
        let model = if self.store.is_cached_dir(&dir) {
            JointEmbedder::load(&dir).map_err(PipelineError::stage(STAGE))?
        } else {
            self.store.begin(&dir).map_err(PipelineError::stage(STAGE))?;
            let seed = self.seed("embedder");
            let m = train_embedder(&ds.split(Split::Pretrain), ds.spec.num_classes, &self.cfg.embedder, seed)
                .map_err(PipelineError::stage(STAGE))?;
            m.save(&dir, &self.cfg.embedder, seed)
                .map_err(PipelineError::stage(STAGE))?;
            self.store.finish_dir(&dir).map_err(PipelineError::stage(STAGE))?;
            m
        };
        self.mark(STAGE, &key, &[dir])?;
        Ok(model)
    }

    pub fn denoiser(&mut self, ds: &LabeledDataset, embedder: &JointEmbedder) -> Result<NoisePredictor, PipelineError> {
        const STAGE: &str = "denoiser";
        let key = self.keys.denoiser.clone();
        let dir = self.store.checkpoint_dir(STAGE, &key);
        let model = if self.store.is_cached_dir(&dir) {
            NoisePredictor::load(&dir).map_err(PipelineError::stage(STAGE))?
        } else {
            self.store.begin(&dir).map_err(PipelineError::stage(STAGE))?;
            let seed = self.seed("denoiser");
            let m = train_denoiser(
                &ds.split(Split::Pretrain),
                embedder,
                &self.schedule,
                &self.cfg.denoiser,
                seed,
            )
            .map_err(PipelineError::stage(STAGE))?;
            m.save(&dir, &self.cfg.denoiser, seed)
                .map_err(PipelineError::stage(STAGE))?;
            self.store.finish_dir(&dir).map_err(PipelineError::stage(STAGE))?;
            m
        };
        self.mark(STAGE, &key, &[dir])?;
        Ok(model)
    }

    /// All four architectures on the train split.
    pub fn classifiers(&mut self, ds: &LabeledDataset) -> Result<Vec<(ClassifierArch, TargetClassifier)>, PipelineError> {
        const STAGE: &str = "classifier";
        let mut out = Vec::new();
        let mut train = None;
        for arch in ClassifierArch::ALL {
            let key = self.keys.classifiers[arch.tag()].clone();
            let dir = self.store.checkpoint_dir(STAGE, &key);
            let model = if self.store.is_cached_dir(&dir) {
                TargetClassifier::load(&dir).map_err(PipelineError::stage(STAGE))?
            } else {
                self.store.begin(&dir).map_err(PipelineError::stage(STAGE))?;
                let seed = self.seed(&format!("classifier/{}", arch.tag()));
                let train = train.get_or_insert_with(|| ds.split(Split::Train));
                let m = train_classifier(train, arch, &self.cfg.classifier, seed)
                    .map_err(PipelineError::stage(STAGE))?;
                m.save(&dir, &self.cfg.classifier, seed)
                    .map_err(PipelineError::stage(STAGE))?;
                self.store.finish_dir(&dir).map_err(PipelineError::stage(STAGE))?;
                m
            };
            self.mark(&format!("classifier/{}", arch.tag()), &key, &[dir])?;
            out.push((arch, model));
        }
        Ok(out)
    }

    /// The error predictor and per-category embedding statistics, both
    /// fitted on the (possibly subsampled) validation split.
    pub fn error_predictor(
        &mut self,
        ds: &LabeledDataset,
        embedder: &JointEmbedder,
        target: &TargetClassifier,
    ) -> Result<(ErrorPredictor, Vec<CategoryStats>), PipelineError> {
        const STAGE: &str = "error_predictor";
        let key = self.keys.error_predictor.clone();
        let dir = self.store.checkpoint_dir(STAGE, &key);
        let stats_path = dir.join("category_stats.json");
        let out = if self.store.is_cached_dir(&dir) {
            let ep = ErrorPredictor::load(&dir).map_err(PipelineError::stage(STAGE))?;
            let stats: Vec<CategoryStats> = serde_json::from_slice(&std::fs::read(&stats_path)?)?;
            (ep, stats)
        } else {
            self.store.begin(&dir).map_err(PipelineError::stage(STAGE))?;
            let val = stratified_subsample(
                &ds.split(Split::Val),
                self.cfg.generation.val_fraction,
                self.seed("val_subsample"),
            );
            let emb = embedder.embed_image(val.x.view());
            let errors = compute_model_errors(target, &val);
            let seed = self.seed("error_predictor");
            let ep = fit_error_predictor(&emb, &errors, &self.cfg.error_predictor, seed)
                .map_err(PipelineError::stage(STAGE))?;
            ep.save(&dir, &self.cfg.error_predictor, seed)
                .map_err(PipelineError::stage(STAGE))?;
            let stats = (0..ds.spec.num_classes)
                .map(|y| estimate_category_stats(emb.view(), &val.y, y))
                .collect::<Result<Vec<_>, _>>()
                .map_err(PipelineError::stage(STAGE))?;
            write_json(&stats_path, &stats)?;
            self.store.finish_dir(&dir).map_err(PipelineError::stage(STAGE))?;
            (ep, stats)
        };
        self.mark(STAGE, &key, &[dir])?;
        Ok(out)
    }

    pub fn train(&mut self) -> Result<Trained, PipelineError> {
        let dataset = self.dataset()?;
        let embedder = self.embedder(&dataset)?;
        let denoiser = self.denoiser(&dataset, &embedder)?;
        let classifiers = self.classifiers(&dataset)?;
        let target = self.cfg.generation.target;
        let target_model = &classifiers.iter().find(|(a, _)| *a == target).expect("trained").1;
        let (error_predictor, stats) = self.error_predictor(&dataset, &embedder, target_model)?;
        Ok(Trained {
            dataset,
            embedder,
            denoiser,
            classifiers,
            error_predictor,
            stats,
        })
    }

    /// `per_category` samples of every category, attacking the target model.
    pub fn generate(&mut self, t: &Trained) -> Result<Vec<GeneratedSample>, PipelineError> {
        const STAGE: &str = "generate";
        let key = self.keys.generation.clone();
        let dir = self.store.samples_dir(&key);
        let dump = dir.join("samples.bin");
        let index = dir.join("index.csv");
        let samples = if self.store.is_cached_dir(&dir) {
            read_samples(&dump).map_err(PipelineError::stage(STAGE))?.samples
        } else {
            self.store.begin(&dir).map_err(PipelineError::stage(STAGE))?;
            let models = GenerationModels {
                denoiser: &t.denoiser,
                decoder: &IdentityDecoder,
                classifier: t.classifier(self.cfg.generation.target),
                embedder: &t.embedder,
            };
            let seed = self.seed("generate");
            let mut samples = Vec::new();
            for (y, stats) in t.stats.iter().enumerate() {
                samples.extend(
                    generate(
                        y,
                        self.cfg.generation.per_category,
                        &models,
                        stats,
                        &t.error_predictor,
                        &self.schedule,
                        &self.cfg.guidance,
                        seed,
                    )
                    .map_err(PipelineError::stage(STAGE))?,
                );
            }
            let meta = json!({
                "generation_key": key,
                "master_seed": self.cfg.seed,
                "guidance": self.cfg.guidance,
                "per_category": self.cfg.generation.per_category,
                "target": self.cfg.generation.target,
                "arm": arm_label(&self.cfg.guidance),
            });
            write_samples(&dump, &samples, meta).map_err(PipelineError::stage(STAGE))?;
            write_sample_index(&index, &samples).map_err(PipelineError::stage(STAGE))?;
            self.store.finish_dir(&dir).map_err(PipelineError::stage(STAGE))?;
            samples
        };
        self.mark(STAGE, &key, &[dump, index])?;
        Ok(samples)
    }

    /// Metrics, transfer matrix and a per-category chart. Cheap, so always
    /// recomputed; the output is deterministic.
    pub fn evaluate(&mut self, t: &Trained, samples: &[GeneratedSample]) -> Result<StageReport, PipelineError> {
        const STAGE: &str = "evaluate";
        let target = self.cfg.generation.target;
        let classifier = t.classifier(target);
        let oracle = bayes_oracle(&t.dataset.spec, &self.cfg.evaluation.oracle_scope);
        let split = match self.cfg.evaluation.reference_split {
            ReferenceSplit::Val => Split::Val,
            ReferenceSplit::Train => Split::Train,
        };
        let data = t.dataset.split(split);
        let reference = ErrorReference::from_data(data.x.view(), &data.y, classifier, &t.embedder);
        let evaluation = evaluate(samples, classifier, &t.embedder, &oracle, &reference, self.cfg.snapshot())
            .map_err(PipelineError::stage(STAGE))?;
        let others: Vec<(&str, &TargetClassifier)> = t.classifiers.iter().map(|(a, m)| (a.tag(), m)).collect();
        let transfer = transfer_matrix(samples, target.tag(), &others).map_err(PipelineError::stage(STAGE))?;
        let report = StageReport {
            arm: arm_label(&self.cfg.guidance).to_string(),
            config_hash: self.record.config_hash.clone(),
            generation_key: self.keys.generation.clone(),
            evaluation,
            transfer,
        };
        let tag = self.run_tag();
        let json_path = self.store.report_path(&format!("eval-{tag}.json"));
        let csv_path = self.store.report_path(&format!("transfer-{tag}.csv"));
        let cat_path = self.store.report_path(&format!("eval-categories-{tag}.csv"));
        let png_path = self.store.plot_path(&format!("eval-{tag}.png"));
        report.transfer.write_csv(&csv_path).map_err(PipelineError::stage(STAGE))?;
        let mut w = csv::Writer::from_path(&cat_path)?;
        w.write_record(["category", "count", "error_rate", "conformity_rate", "frechet_distance"])?;
        for c in &report.evaluation.per_category {
            w.write_record([
                c.category.to_string(),
                c.count.to_string(),
                c.error_rate.to_string(),
                c.conformity_rate.to_string(),
                c.frechet_distance.map(|f| f.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        let groups: Vec<String> = report
            .evaluation
            .per_category
            .iter()
            .map(|c| format!("class {}", c.category))
            .collect();
        let per = &report.evaluation.per_category;
        plot::bar_chart(
            &png_path,
            &format!("{} arm, target {}", report.arm, target.tag()),
            &groups,
            &[
                ("error rate", per.iter().map(|c| c.error_rate).collect()),
                ("conformity", per.iter().map(|c| c.conformity_rate).collect()),
            ],
        )?;
        write_json(&json_path, &report)?;
        let m = &mut self.record.metrics;
        m.insert("error_rate".into(), report.evaluation.error_rate);
        m.insert("conformity_rate".into(), report.evaluation.conformity_rate);
        m.insert("frechet_distance".into(), report.evaluation.frechet_distance);
        m.insert("screen_fallbacks".into(), report.evaluation.screen_fallbacks as f64);
        let key = self.keys.evaluation.clone();
        self.mark(STAGE, &key, &[json_path, csv_path, cat_path, png_path])?;
        Ok(report)
    }

    /// Retrains from scratch with the generated samples added, plus the
    /// optional control arms: fresh in-distribution mixture draws of the same
    /// size, and the same draws with every label shifted to a wrong class.
    pub fn retrain(&mut self, t: &Trained, samples: &[GeneratedSample]) -> Result<RetrainReport, PipelineError> {
        const STAGE: &str = "retrain";
        let key = self.keys.retrain.clone();
        let dir = self.store.checkpoint_dir(STAGE, &key);
        let table_path = dir.join("table.json");
        let table: RetrainTable = if self.store.is_cached_dir(&dir) {
            serde_json::from_slice(&std::fs::read(&table_path)?)?
        } else {
            self.store.begin(&dir).map_err(PipelineError::stage(STAGE))?;
            let ds = &t.dataset;
            let spec = &ds.spec;
            let mut arms = vec![("riskydiff", samples_as_set(samples, spec.dims))];
            if self.cfg.retrain.controls && !samples.is_empty() {
                let id = spec.id_domains();
                let cells = spec.num_classes * id.len();
                let per_cell = samples.len().div_ceil(cells);
                let seed = self.seed("controls");
                let positive = sample_mixture(spec, &id, per_cell, seed).map_err(PipelineError::stage(STAGE))?;
                let negative = mislabel(&positive, spec.num_classes, seed);
                arms.push(("positive_control", positive));
                arms.push(("negative_control", negative));
            }
            let seeds: Vec<u64> = self
                .cfg
                .retrain
                .seeds
                .iter()
                .map(|s| self.seed(&format!("retrain/{s}")))
                .collect();
            let table = retrain_arms(
                &ds.split(Split::Train),
                &arms,
                &ds.split(Split::TestId),
                &ds.split(Split::TestOod),
                self.cfg.retrain_arch(),
                &self.cfg.retrain_classifier(),
                &seeds,
            )
            .map_err(PipelineError::stage(STAGE))?;
            write_json(&table_path, &table)?;
            self.store.finish_dir(&dir).map_err(PipelineError::stage(STAGE))?;
            table
        };
        let report = RetrainReport {
            arm: arm_label(&self.cfg.guidance).to_string(),
            config_hash: self.record.config_hash.clone(),
            generation_key: self.keys.generation.clone(),
            config: self.cfg.snapshot(),
            table,
        };
        let tag = self.run_tag();
        let json_path = self.store.report_path(&format!("retrain-{tag}.json"));
        let csv_path = self.store.report_path(&format!("retrain-{tag}.csv"));
        let png_path = self.store.plot_path(&format!("retrain-{tag}.png"));
        report.table.write_csv(&csv_path)?;
        let arms = &report.table.arms;
        plot::bar_chart(
            &png_path,
            "accuracy change after retraining",
            &arms.iter().map(|a| a.name.clone()).collect::<Vec<_>>(),
            &[
                ("ID delta", arms.iter().map(|a| a.id_delta.mean).collect()),
                ("OOD delta", arms.iter().map(|a| a.ood_delta.mean).collect()),
            ],
        )?;
        write_json(&json_path, &report)?;
        let m = &mut self.record.metrics;
        m.insert("retrain.baseline.id".into(), report.table.baseline.id_summary.mean);
        m.insert("retrain.baseline.ood".into(), report.table.baseline.ood_summary.mean);
        for a in arms {
            m.insert(format!("retrain.{}.id_delta", a.name), a.id_delta.mean);
            m.insert(format!("retrain.{}.ood_delta", a.name), a.ood_delta.mean);
        }
        self.mark(STAGE, &key, &[table_path, json_path, csv_path, png_path])?;
        Ok(report)
    }

    fn run_all(&mut self) -> Result<(), PipelineError> {
        let trained = self.train()?;
        let samples = self.generate(&trained)?;
        self.evaluate(&trained, &samples)?;
        if self.cfg.retrain.enabled {
            self.retrain(&trained, &samples)?;
        }
        self.record.save(self.store.root())
    }

    /// Runs `f`, recording a failure in the manifest before passing it on.
    pub fn recording<T>(&mut self, f: impl FnOnce(&mut Self) -> Result<T, PipelineError>) -> Result<T, PipelineError> {
        let out = f(self);
        if let Err(e) = &out {
            self.record.error = Some(e.to_string());
            self.record.save(self.store.root())?;
        }
        out
    }
}

/// Every stage end to end. Complete stage outputs already on disk are reused
/// when `resume` is set.
pub fn run_experiment(cfg: &RunConfig, root: &Path, resume: bool) -> Result<RunRecord, PipelineError> {
    let store = Store::new(root, resume)?;
    let mut p = Pipeline::new(cfg.clone(), &store)?;
    p.recording(Pipeline::run_all)?;
    Ok(p.record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn arm_labels() {
        assert_eq!(arm_label(&GuidanceConfig::unguided()), "Base");
        assert_eq!(arm_label(&GuidanceConfig::default()), "+Both");
        let g = GuidanceConfig {
            screening: false,
            ..Default::default()
        };
        assert_eq!(arm_label(&g), "+Gradient");
        let g = GuidanceConfig {
            s: 0.0,
            ..Default::default()
        };
        assert_eq!(arm_label(&g), "+Screening");
    }

    #[test]
    fn subsample_is_stratified_and_deterministic() {
        let y: Vec<usize> = (0..100).map(|i| if i < 80 { 0 } else { 1 }).collect();
        let set = LabeledSet::new(Array2::from_shape_fn((100, 1), |(i, _)| i as f64), y);
        let a = stratified_subsample(&set, 0.1, 3);
        assert_eq!(a.y.iter().filter(|&&v| v == 0).count(), 8);
        assert_eq!(a.y.iter().filter(|&&v| v == 1).count(), 2);
        assert_eq!(a, stratified_subsample(&set, 0.1, 3));
        assert_ne!(a, stratified_subsample(&set, 0.1, 4));
        assert_eq!(stratified_subsample(&set, 1.0, 3), set);
        assert_eq!(stratified_subsample(&set, 0.001, 3).len(), 2);
    }
}
