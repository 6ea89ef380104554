//! End-to-end checks on the default toy task with trained models.

use ndarray::Array2;
use riskydiff_core::dataset::{
    bayes_oracle, make_dataset, sample_mixture, DomainScope, LabeledDataset, Split, StandardSpecParams,
    SyntheticSpec,
};
use riskydiff_core::diffusion::{build_schedule, BetaSchedule, NoiseSchedule};
use riskydiff_core::evaluation::{conformity_rate, error_rate, transfer_matrix};
use riskydiff_core::models::{
    accuracy, compute_model_errors, denoising_loss, fit_error_predictor, train_classifier, train_denoiser,
    train_embedder, ClassifierArch, ClassifierConfig, DenoiserConfig, EmbedderConfig, ErrorPredictor,
    ErrorPredictorConfig, IdentityDecoder, JointEmbedder, NoisePredictor, TargetClassifier,
};
use riskydiff_core::riskygen::{
    estimate_category_stats, generate, read_samples, sample_conditional, write_sample_index, write_samples,
    CategoryStats, GeneratedSample, GenerationModels, GuidanceConfig,
};
use std::sync::OnceLock;

struct Toy {
    data: LabeledDataset,
    schedule: NoiseSchedule,
    embedder: JointEmbedder,
    denoiser: NoisePredictor,
    classifier: TargetClassifier,
    error_predictor: ErrorPredictor,
    stats: Vec<CategoryStats>,
}

fn toy() -> &'static Toy {
    static TOY: OnceLock<Toy> = OnceLock::new();
    TOY.get_or_init(|| {
        let spec = SyntheticSpec::standard(&StandardSpecParams::default(), 1);
        let data = make_dataset(&spec).unwrap();
        let pre = data.split(Split::Pretrain);
        let schedule = build_schedule(&BetaSchedule::default(), 50).unwrap();
        let embedder = train_embedder(&pre, spec.num_classes, &EmbedderConfig::default(), 2).unwrap();
        let denoiser = train_denoiser(&pre, &embedder, &schedule, &DenoiserConfig::default(), 3).unwrap();
        let classifier =
            train_classifier(&data.split(Split::Train), ClassifierArch::Wide, &ClassifierConfig::default(), 4)
                .unwrap();
        let val = data.split(Split::Val);
        let emb = embedder.embed_image(val.x.view());
        let errors = compute_model_errors(&classifier, &val);
        let error_predictor = fit_error_predictor(&emb, &errors, &ErrorPredictorConfig::default(), 5).unwrap();
        let stats = (0..spec.num_classes)
            .map(|y| estimate_category_stats(emb.view(), &val.y, y).unwrap())
            .collect();
        Toy {
            data,
            schedule,
            embedder,
            denoiser,
            classifier,
            error_predictor,
            stats,
        }
    })
}

impl Toy {
    fn models(&self) -> GenerationModels<'_, NoisePredictor, IdentityDecoder> {
        GenerationModels {
            denoiser: &self.denoiser,
            decoder: &IdentityDecoder,
            classifier: &self.classifier,
            embedder: &self.embedder,
        }
    }

    fn generate_all(&self, cfg: &GuidanceConfig, per: usize, seed: u64) -> Vec<GeneratedSample> {
        (0..self.stats.len())
            .flat_map(|y| {
                generate(y, per, &self.models(), &self.stats[y], &self.error_predictor, &self.schedule, cfg, seed)
                    .unwrap()
            })
            .collect()
    }
}

#[test]
fn denoiser_beats_its_untrained_init() {
    let t = toy();
    let held_out = t.data.split(Split::TestId);
    let untrained = NoisePredictor::new(16, t.embedder.embed_dim(), &DenoiserConfig::default(), 3);
    let trained = denoising_loss(&t.denoiser, &held_out, &t.embedder, &t.schedule, 1, 9);
    let init = denoising_loss(&untrained, &held_out, &t.embedder, &t.schedule, 1, 9);
    assert!(trained < 0.9 * init, "trained {trained} vs untrained {init}");
}

#[test]
fn embedder_matches_images_to_their_category() {
    let t = toy();
    let held_out = t.data.split(Split::TestId);
    let h = t.embedder.embed_image(held_out.x.view());
    let scores = h.dot(&t.embedder.text_table().t());
    let matched = (0..held_out.len())
        .filter(|&i| {
            let y = held_out.y[i];
            (0..scores.ncols()).all(|k| k == y || scores[[i, y]] > scores[[i, k]])
        })
        .count();
    let frac = matched as f64 / held_out.len() as f64;
    // The Bayes oracle caps how separable the categories are.
    let oracle = bayes_oracle(&t.data.spec, &DomainScope::Id);
    let ceiling = oracle
        .labels(&held_out.x)
        .iter()
        .zip(&held_out.y)
        .filter(|(a, b)| a == b)
        .count() as f64
        / held_out.len() as f64;
    assert!(frac >= 0.9 * ceiling, "matched {frac:.3} with oracle ceiling {ceiling:.3}");
}

#[test]
fn error_flags_agree_with_accuracy() {
    let t = toy();
    for split in [Split::Val, Split::TestId, Split::TestOod] {
        let set = t.data.split(split);
        let flags = compute_model_errors(&t.classifier, &set);
        let mean = flags.iter().filter(|&&e| e).count() as f64 / flags.len() as f64;
        assert!((mean - (1.0 - accuracy(&t.classifier, &set))).abs() < 1e-12);
    }
}

#[test]
fn training_is_deterministic() {
    let t = toy();
    let train = t.data.split(Split::Train);
    let a = train_classifier(&train, ClassifierArch::Small, &ClassifierConfig::default(), 11).unwrap();
    let b = train_classifier(&train, ClassifierArch::Small, &ClassifierConfig::default(), 11).unwrap();
    assert_eq!(a, b);
}

#[test]
fn zero_guidance_reduces_to_conditional_sampling() {
    let t = toy();
    let cfg = GuidanceConfig {
        record_trace: true,
        ..GuidanceConfig::unguided()
    };
    for y in [0, 3] {
        let got = generate(y, 7, &t.models(), &t.stats[y], &t.error_predictor, &t.schedule, &cfg, 21).unwrap();
        let want = sample_conditional(y, 7, &t.denoiser, &IdentityDecoder, &t.embedder, &t.stats[y], &t.schedule, 1.0, 21)
            .unwrap();
        for (i, s) in got.iter().enumerate() {
            let trace = s.trace.as_ref().unwrap();
            assert_eq!(trace.len(), want.trajectory.len());
            for (step, state) in trace.iter().zip(&want.trajectory) {
                let row: Vec<f64> = state.row(i).to_vec();
                assert_eq!(step.state, row, "sample {i} step {}", step.t);
                assert!(!step.fired);
            }
            assert_eq!(s.x, want.x.row(i).to_vec());
        }
    }
}

#[test]
fn guidance_raises_the_error_rate() {
    let t = toy();
    let off = t.generate_all(&GuidanceConfig { s: 0.0, ..Default::default() }, 30, 5);
    let on = t.generate_all(&GuidanceConfig::default(), 30, 5);
    let (e0, e10) = (error_rate(&off, &t.classifier).unwrap(), error_rate(&on, &t.classifier).unwrap());
    assert!(e10 > e0, "s=10 error {e10} vs s=0 error {e0}");
}

#[test]
fn screening_is_sound() {
    let t = toy();
    let samples = t.generate_all(&GuidanceConfig { s: 0.0, ..Default::default() }, 20, 8);
    for s in &samples {
        let c = ndarray::Array1::from(s.embedding_condition.clone());
        let p = t.error_predictor.prob_error(c.view());
        if s.screen_accepted {
            // the condition is stored at f32 precision
            assert!(p >= t.error_predictor.threshold - 1e-6, "accepted with p = {p}");
        } else {
            assert_eq!(s.screen_attempts, GuidanceConfig::default().max_screen_attempts);
        }
        assert!(s.screen_attempts >= 1);
    }
}

#[test]
fn error_rate_matches_a_recount_of_the_dump() {
    let t = toy();
    let samples = t.generate_all(&GuidanceConfig::default(), 10, 2);
    let dir = tempfile::tempdir().unwrap();
    write_samples(&dir.path().join("s.bin"), &samples, serde_json::json!({})).unwrap();
    write_sample_index(&dir.path().join("s.csv"), &samples).unwrap();
    let reloaded = read_samples(&dir.path().join("s.bin")).unwrap().samples;
    let x = Array2::from_shape_fn((reloaded.len(), 16), |(i, j)| reloaded[i].x[j]);
    let pred = t.classifier.predict(x.view());
    let mut rdr = csv::Reader::from_path(dir.path().join("s.csv")).unwrap();
    let mut wrong = 0;
    let mut rows = 0;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.unwrap();
        let intended: usize = rec[1].parse().unwrap();
        let recorded: usize = rec[2].parse().unwrap();
        assert_eq!(recorded, pred[i], "dump prediction disagrees with the reloaded sample");
        wrong += usize::from(recorded != intended);
        rows += 1;
    }
    let recount = wrong as f64 / rows as f64;
    assert_eq!(error_rate(&samples, &t.classifier).unwrap(), recount);
    let risky = samples.iter().filter(|s| s.is_risky).count() as f64 / samples.len() as f64;
    assert_eq!(risky, recount);
}

#[test]
fn transfer_rows_match_individual_error_rates() {
    let t = toy();
    let samples = t.generate_all(&GuidanceConfig::default(), 10, 3);
    let other =
        train_classifier(&t.data.split(Split::Train), ClassifierArch::Linear, &ClassifierConfig::default(), 6).unwrap();
    let m = transfer_matrix(&samples, "wide", &[("wide", &t.classifier), ("linear", &other)]).unwrap();
    assert_eq!(m.rows[0].error_rate, error_rate(&samples, &t.classifier).unwrap());
    assert_eq!(m.rows[1].error_rate, error_rate(&samples, &other).unwrap());
}

fn as_samples(x: &Array2<f64>, labels: &[usize]) -> Vec<GeneratedSample> {
    (0..labels.len())
        .map(|i| GeneratedSample {
            x: x.row(i).to_vec(),
            intended_category: labels[i],
            prediction: 0,
            is_risky: false,
            embedding_condition: vec![],
            screen_attempts: 1,
            screen_accepted: true,
            trace: None,
        })
        .collect()
}

#[test]
fn conformity_of_true_draws_is_the_component_bayes_accuracy() {
    // Two independent Monte-Carlo estimates of P(oracle(x) = y | x ~ component y)
    // agree within sampling error.
    let t = toy();
    let spec = &t.data.spec;
    let oracle = bayes_oracle(spec, &DomainScope::All);
    let all: Vec<usize> = (0..spec.domains.len()).collect();
    let a = sample_mixture(spec, &all, 400, 100).unwrap();
    let b = sample_mixture(spec, &all, 400, 200).unwrap();
    let ca = conformity_rate(&as_samples(&a.x, &a.y), &oracle).unwrap();
    let cb = conformity_rate(&as_samples(&b.x, &b.y), &oracle).unwrap();
    let se = (ca * (1.0 - ca) / a.len() as f64).sqrt() * 2f64.sqrt();
    assert!((ca - cb).abs() < 3.0 * se, "{ca} vs {cb}, se {se}");
    // and the oracle is far better than chance
    assert!(ca > 0.5);
}

#[test]
fn oracle_dominates_trained_classifiers() {
    for seed in 0..3u64 {
        let spec = SyntheticSpec::standard(&StandardSpecParams::default(), 40 + seed);
        let data = make_dataset(&spec).unwrap();
        let fresh = sample_mixture(&spec, &spec.id_domains(), 300, 7 + seed).unwrap();
        let oracle = bayes_oracle(&spec, &DomainScope::Id);
        let oracle_acc =
            oracle.labels(&fresh.x).iter().zip(&fresh.y).filter(|(a, b)| a == b).count() as f64 / fresh.len() as f64;
        let se = (oracle_acc * (1.0 - oracle_acc) / fresh.len() as f64).sqrt();
        for arch in ClassifierArch::ALL {
            let m = train_classifier(&data.split(Split::Train), arch, &ClassifierConfig::default(), seed).unwrap();
            let acc = accuracy(&m, &fresh);
            assert!(oracle_acc + se >= acc, "seed {seed} {arch:?}: oracle {oracle_acc} vs {acc}");
        }
    }
}
