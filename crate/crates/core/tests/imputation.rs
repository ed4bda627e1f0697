use confed::cohort::{generate_cohort, CodeVector, CohortConfig, DataType, PersonRecord, TypeTriple};
use confed::imputation::*;
use confed::metrics::auc_roc;
use confed::nn::ModelParams;
use confed::silo::{partition, PartitionSpec, SiloKind};
use rand::Rng;

mod common;
use common::{copy_dataset, random_vector, record};

#[test]
fn identity_task_is_learned_and_replays() {
    let records = copy_dataset(2_000, 100, 3);
    let hyper = CganHyper::default();
    let t0 = std::time::Instant::now();
    let a = train_cgan(&records, DataType::Diag, DataType::Med, (100, 100), &hyper, 11).unwrap();
    let l1 = a.history[a.best_epoch].val_l1.unwrap();
    assert!(l1 < 0.05, "validation L1 {l1}");
    assert!(t0.elapsed().as_secs() < 120);
    let b = train_cgan(&records, DataType::Diag, DataType::Med, (100, 100), &hyper, 11).unwrap();
    assert_eq!(a.generator, b.generator);
    assert_eq!(a.discriminator, b.discriminator);
    assert_eq!(a.history, b.history);

    // noise matters, and the same seed reproduces the draw
    let x = &records[0].x.diag.clone().unwrap();
    let draws: Vec<Vec<f64>> = (0..10).map(|z| impute(&a, x, z).unwrap().0).collect();
    assert!(draws.iter().any(|d| d != &draws[0]));
    assert_eq!(impute(&a, x, 4).unwrap(), impute(&a, x, 4).unwrap());
    assert!(impute(&a, &CodeVector::empty(99), 0).is_err());
}

fn tiny_hyper() -> CganHyper {
    CganHyper {
        generator_hidden: vec![8],
        discriminator_hidden: vec![4],
        noise_dim: 100,
        epochs: 3,
        batch_size: 16,
        ..CganHyper::default()
    }
}

#[test]
fn frozen_discriminator_gives_constant_generator_loss() {
    let records = copy_dataset(64, 10, 1);
    let hyper = CganHyper {
        lambda_match: 0.0,
        discriminator_lr: 0.0,
        ..tiny_hyper()
    };
    let g = ModelParams::init(hyper.generator_arch(10, 10), 1).unwrap();
    let d = ModelParams::zeros(hyper.discriminator_arch(10, 10)).unwrap();
    let m = train_cgan_with_init(&records, DataType::Diag, DataType::Med, &hyper, 5, g.clone(), d.clone()).unwrap();
    // a zero discriminator scores everything 0, so the generator loss is (0 - 1)^2
    for e in &m.history {
        assert_eq!(e.gen_loss, 1.0);
        assert_eq!(e.disc_loss, 1.0);
    }
    assert_eq!(m.discriminator, d);
    // zero output weights in the discriminator leave no gradient to the generator
    assert_eq!(m.generator, g);
}

#[test]
fn zero_generator_outputs_one_half_and_binarizes_empty() {
    let hyper = tiny_hyper();
    let model = CganModel {
        src: DataType::Diag,
        tgt: DataType::Lab,
        generator: ModelParams::zeros(hyper.generator_arch(10, 7)).unwrap(),
        discriminator: ModelParams::zeros(hyper.discriminator_arch(10, 7)).unwrap(),
        lambda_match: 10.0,
        noise_dim: 100,
        best_epoch: 0,
        history: vec![],
        warning: None,
    };
    let (p, v) = impute(&model, &CodeVector::new(10, vec![1, 2]).unwrap(), 3).unwrap();
    assert_eq!(p, vec![0.5; 7]);
    assert_eq!(v, CodeVector::empty(7));
    assert_eq!(model.role(), "generator:diag->lab");
}

#[test]
fn unpaired_only_data_trains_adversarially_with_warning() {
    let mut r = confed::rng::rng(2);
    let records: Vec<_> = (0..50)
        .map(|i| record(i, TypeTriple::new(Some(random_vector(&mut r, 10, 0.2)), None, None), vec![false]))
        .collect();
    let m = train_cgan(&records, DataType::Diag, DataType::Med, (10, 6), &tiny_hyper(), 0).unwrap();
    assert_eq!(m.warning, Some(CganWarning::AdversarialOnly));
    assert!(m.history.iter().all(|e| e.val_l1.is_none()));
    assert_eq!(m.best_epoch, m.history.len() - 1);
    let none = train_cgan(&records, DataType::Med, DataType::Diag, (6, 10), &tiny_hyper(), 0);
    assert!(matches!(none, Err(ImputeError::NoSourceRows { .. })));
}

#[test]
fn classifier_fits_separable_data_and_ignores_noise() {
    // label = code 0 present
    let mut r = confed::rng::rng(7);
    let records: Vec<_> = (0..400)
        .map(|i| {
            let v = random_vector(&mut r, 20, 0.3);
            let y = v.contains(0);
            record(i, TypeTriple::new(Some(v), None, None), vec![y])
        })
        .collect();
    let hyper = ClassifierHyper {
        max_epochs: 300,
        patience: 300,
        lr: 0.5,
        ..ClassifierHyper::default()
    };
    let c = train_label_classifier(&records, DataType::Diag, 0, 20, &hyper, 1).unwrap();
    let xs: Vec<&CodeVector> = records.iter().map(|r| r.x.diag.as_ref().unwrap()).collect();
    let p = c.predict(&xs).unwrap();
    let bce: f64 = p
        .iter()
        .zip(&records)
        .map(|(p, r)| if r.labels[0] { -p.ln() } else { -(1.0 - p).ln() })
        .sum::<f64>()
        / p.len() as f64;
    assert!(bce < 0.1, "training BCE {bce}");
    assert_eq!(c, train_label_classifier(&records, DataType::Diag, 0, 20, &hyper, 1).unwrap());

    let noise: Vec<_> = (0..2_000)
        .map(|i| {
            record(
                i,
                TypeTriple::new(Some(random_vector(&mut r, 20, 0.3)), None, None),
                vec![r.random::<bool>()],
            )
        })
        .collect();
    let c = train_label_classifier(&noise[..1_000], DataType::Diag, 0, 20, &ClassifierHyper::default(), 1).unwrap();
    let held = &noise[1_000..];
    let xs: Vec<&CodeVector> = held.iter().map(|r| r.x.diag.as_ref().unwrap()).collect();
    let labels: Vec<bool> = held.iter().map(|r| r.labels[0]).collect();
    let auc = auc_roc(&c.predict(&xs).unwrap(), &labels).unwrap();
    assert!((0.4..=0.6).contains(&auc), "held-out AUC {auc}");
}

#[test]
fn single_class_labels_are_rejected() {
    let records = copy_dataset(30, 5, 0);
    let err = train_label_classifier(&records, DataType::Diag, 0, 5, &ClassifierHyper::default(), 0).unwrap_err();
    assert!(matches!(err, ImputeError::DegenerateLabels { positives: 0, .. }));
}

struct World {
    config: CohortConfig,
    cohort: confed::Cohort,
    models: StepOneModels,
}

fn small_world() -> World {
    let mut config = CohortConfig::desk();
    config.n_people = 3_000;
    config.n_regions = 3;
    config.region_weights = vec![0.5, 0.25, 0.25];
    let cohort = generate_cohort(&config).unwrap();
    let central: Vec<PersonRecord> = cohort.records.iter().filter(|r| r.region == 0).cloned().collect();
    let mut hyper = StepOneHyper::default();
    hyper.cgan.epochs = 15;
    let models = train_step_one(&central, &config.vocab_sizes, 3, &hyper, 4).unwrap();
    World { config, cohort, models }
}

#[test]
fn imputed_views_keep_observed_data_and_tag_sources() {
    let w = small_world();
    let spec = PartitionSpec {
        n_regions: 3,
        central_region: 0,
        vocab_sizes: w.config.vocab_sizes,
        silo_validation_fraction: 0.2,
        seed: 1,
    };
    let net = partition(&w.cohort.records, &spec).unwrap();
    assert_eq!(w.models.cgans.len(), 6);
    assert_eq!(w.models.classifiers.len(), 9);
    for silo in &net.silos {
        let src = silo.kind().data_type();
        let options = ViewOptions {
            labels: Binarize::Threshold,
            vectors: Binarize::Threshold,
            ..ViewOptions::default()
        };
        let view = build_imputed_view(silo, &w.models, 3, &options, 9).unwrap();
        assert_eq!(view, build_imputed_view(silo, &w.models, 3, &options, 9).unwrap());
        assert_eq!(view.records().len(), silo.len());
        let xs: Vec<&CodeVector> = silo.records().iter().map(|r| &r.x).collect();
        for (raw, rec) in silo.records().iter().zip(view.records()) {
            assert_eq!(rec.local_id(), raw.local_id);
            assert_eq!(rec.vector(src), Some(&raw.x));
            for t in DataType::ALL {
                let want = if t == src { VectorSource::Observed } else { VectorSource::Imputed };
                assert_eq!(rec.source(t), Some(want));
                assert_eq!(rec.vector(t).unwrap().vocab_size() as usize, w.config.vocab_sizes[t]);
            }
        }
        if silo.kind() == SiloKind::Clinic {
            for (raw, rec) in silo.records().iter().zip(view.records()) {
                let labels: Vec<bool> = rec.labels().iter().map(|l| l.0).collect();
                assert_eq!(&labels, raw.true_labels.as_ref().unwrap());
                assert!(rec.labels().iter().all(|l| l.1 == LabelSource::True));
            }
        } else {
            // threshold labels are the standalone classifier's output cut at 0.5
            for d in 0..3 {
                let p = w.models.classifier(src, d).unwrap().predict(&xs).unwrap();
                for (rec, p) in view.records().iter().zip(p) {
                    assert_eq!(rec.labels()[d], (p > 0.5, LabelSource::Inferred));
                }
            }
        }
        // imputed vectors are the generator's output binarized at 0.5
        if let Some(rec) = view.records().first() {
            for t in DataType::ALL.into_iter().filter(|&t| t != src) {
                let z = z_seed(9, silo.id(), 0, t);
                let (_, v) = impute(w.models.cgan(src, t).unwrap(), &silo.records()[0].x, z).unwrap();
                assert_eq!(rec.vector(t), Some(&v));
            }
        }
    }

    let everywhere = ViewOptions {
        label_mode: LabelMode::InferredEverywhere,
        ..ViewOptions::default()
    };
    let clinic = net.silos_of(SiloKind::Clinic).next().unwrap();
    let view = build_imputed_view(clinic, &w.models, 3, &everywhere, 9).unwrap();
    // sampled labels track the classifier's mean probability
    let xs: Vec<&CodeVector> = clinic.records().iter().map(|r| &r.x).collect();
    let p = w.models.classifier(DataType::Diag, 0).unwrap().predict(&xs).unwrap();
    let mean_p = p.iter().sum::<f64>() / p.len() as f64;
    let rate = view.records().iter().filter(|r| r.labels()[0].0).count() as f64 / p.len() as f64;
    let sd = (mean_p * (1.0 - mean_p) / p.len() as f64).sqrt();
    assert!((rate - mean_p).abs() < 5.0 * sd, "rate {rate} vs mean p {mean_p}");
    assert!(view
        .records()
        .iter()
        .all(|r| r.labels().iter().all(|l| l.1 == LabelSource::Inferred)));

    let missing = StepOneModels {
        cgans: vec![],
        classifiers: w.models.classifiers.clone(),
    };
    assert!(matches!(
        build_imputed_view(clinic, &missing, 3, &ViewOptions::default(), 0),
        Err(ImputeError::MissingModel(_))
    ));
}

#[test]
fn diag_to_med_imputation_beats_chance() {
    let w = small_world();
    // held-out people from a non-central region, all paired
    let held: Vec<&PersonRecord> = w.cohort.records.iter().filter(|r| r.region != 0 && r.is_fully_paired()).collect();
    let cgan = w.models.cgan(DataType::Diag, DataType::Med).unwrap();
    let src: Vec<&CodeVector> = held.iter().map(|r| r.x.diag.as_ref().unwrap()).collect();
    let seeds: Vec<u64> = (0..held.len() as u64).collect();
    let dense = ndarray::Array2::from_shape_fn((src.len(), cgan.src_width()), |(i, j)| f64::from(src[i].contains(j as u32)));
    let probs = generate(cgan, &dense, &seeds).unwrap();
    let mut aucs = Vec::new();
    for code in 0..w.config.vocab_sizes.med {
        let truth: Vec<bool> = held.iter().map(|r| r.x.med.as_ref().unwrap().contains(code as u32)).collect();
        let pos = truth.iter().filter(|&&t| t).count();
        if pos < 10 || pos == truth.len() {
            continue;
        }
        aucs.push(auc_roc(&probs.column(code).to_vec(), &truth).unwrap());
    }
    let mean = aucs.iter().sum::<f64>() / aucs.len() as f64;
    assert!(mean > 0.6, "mean per-code AUC {mean} over {} codes", aucs.len());
}

#[test]
fn discriminator_step_lowers_its_loss_on_a_fixed_batch() {
    let records = copy_dataset(32, 8, 5);
    let hyper = CganHyper {
        generator_lr: 0.0,
        discriminator_lr: 0.01,
        lambda_match: 0.0,
        batch_size: 32,
        epochs: 5,
        validation_fraction: 0.0,
        ..tiny_hyper()
    };
    // a zero generator emits 0.5 everywhere whatever the noise, so every
    // epoch sees the same batch
    let g = ModelParams::zeros(hyper.generator_arch(8, 8)).unwrap();
    let d = ModelParams::init(hyper.discriminator_arch(8, 8), 3).unwrap();
    let m = train_cgan_with_init(&records, DataType::Diag, DataType::Med, &hyper, 2, g, d).unwrap();
    let losses: Vec<f64> = m.history.iter().map(|e| e.disc_loss).collect();
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
}

#[test]
fn arch_helpers_use_the_noise_width() {
    let h = CganHyper::default();
    assert_eq!(h.noise_dim, 100);
    let g = h.generator_arch(500, 300);
    assert_eq!(g.input_width(), 600);
    assert_eq!(g.output_width(), 300);
    assert_eq!(h.discriminator_arch(500, 300).input_width(), 800);
}
