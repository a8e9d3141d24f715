mod common;

use coal_core::data::{generate_twin_domains, TwinDomainConfig};
use coal_core::model::ModelParams;
use coal_core::numerics::{mean_entropy, ParamSet};
use coal_core::objectives::{adaptive_objective, entropy_objective, source_classification_loss, ActiveTerms, LabeledBatch, PseudoBatch};
use coal_core::evaluation::{render_table, TableFormat};
use coal_core::trainer::{
    apply_update, build_model, epoch_pairs, evaluate, prepare_domains, pretrain, run_experiment, Ablations, Method, RunReport,
    TrainConfig, UpdateScope,
};
use coal_core::Tensor2;

use common::{fixture, small_fixture};

fn bits(model: &ModelParams) -> Vec<u64> {
    model
        .blocks()
        .iter()
        .flat_map(|b| b.value.data().iter().chain(b.momentum.data()).map(|v| v.to_bits()).collect::<Vec<_>>())
        .collect()
}

fn grad_bits(model: &ModelParams) -> Vec<u64> {
    model.blocks().iter().flat_map(|b| b.grad.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect()
}

struct Batches {
    model: ModelParams,
    xs: Tensor2,
    ys: Vec<usize>,
    xt: Tensor2,
    pseudo: Vec<usize>,
    masks: Vec<bool>,
}

fn batches(train: &TrainConfig) -> Batches {
    let cfg = small_fixture(Method::Coal, 5);
    let domains = prepare_domains(&cfg).unwrap();
    let mut model = build_model(train, domains.source.feature_dim(), domains.source.num_classes).unwrap();
    pretrain(&mut model, &domains.source, train, &mut Vec::new()).unwrap();
    let (src, tgt) = epoch_pairs(&domains.source, domains.target_train.len(), train, 0).unwrap().remove(0);
    let (xs, ys) = domains.source.batch(&src);
    let xt = domains.target_train.features.select_rows(&tgt);
    let pseudo = model.classify(&xt).unwrap().labels();
    let masks = (0..pseudo.len()).map(|i| i % 3 != 0).collect();
    Batches {
        model,
        xs,
        ys,
        xt,
        pseudo,
        masks,
    }
}

impl Batches {
    fn step(&self, alpha: f64, terms: ActiveTerms, train: &TrainConfig) -> (ModelParams, Vec<u64>, f64) {
        let mut m = self.model.clone();
        m.zero_grads();
        let loss = adaptive_objective(
            &mut m,
            LabeledBatch {
                inputs: &self.xs,
                labels: &self.ys,
            },
            PseudoBatch {
                inputs: &self.xt,
                labels: &self.pseudo,
                masks: &self.masks,
            },
            alpha,
            terms,
        )
        .unwrap();
        let grads = grad_bits(&m);
        apply_update(&mut m, train, UpdateScope::All).unwrap();
        (m, grads, loss.l_h)
    }
}

#[test]
fn objective_without_terms_is_the_source_step() {
    let train = small_fixture(Method::Coal, 5).train;
    let b = batches(&train);
    let none = ActiveTerms {
        pseudo: false,
        entropy: false,
    };
    let (ablated, _, _) = b.step(train.alpha, none, &train);

    let mut plain = b.model.clone();
    plain.zero_grads();
    source_classification_loss(
        &mut plain,
        LabeledBatch {
            inputs: &b.xs,
            labels: &b.ys,
        },
    )
    .unwrap();
    apply_update(&mut plain, &train, UpdateScope::All).unwrap();
    assert_eq!(bits(&ablated), bits(&plain));
}

#[test]
fn disabled_entropy_matches_zero_alpha_and_still_reports_entropy() {
    let train = small_fixture(Method::Coal, 5).train;
    let b = batches(&train);
    let no_entropy = ActiveTerms {
        pseudo: true,
        entropy: false,
    };
    let (_, g_off, l_h) = b.step(train.alpha, no_entropy, &train);
    let (_, g_zero, _) = b.step(0.0, ActiveTerms::ALL, &train);
    assert_eq!(g_off, g_zero);
    let expected = mean_entropy(&b.model.forward(&b.xt).unwrap().probabilities).unwrap().loss;
    assert_eq!(l_h.to_bits(), expected.to_bits());
}

#[test]
fn disabled_pseudo_term_reduces_l_st_to_l_sc() {
    let mut cfg = small_fixture(Method::Coal, 4);
    cfg.train.ablations = Ablations {
        disable_pseudo_term: true,
        disable_entropy_term: false,
    };
    let out = run_experiment(&cfg).unwrap();
    let adapt: Vec<_> = out.steps.iter().filter(|s| s.phase == "adapt").collect();
    assert!(!adapt.is_empty());
    for s in adapt {
        assert_eq!(s.l_target_pseudo, 0.0);
        assert_eq!(s.l_st.to_bits(), s.l_sc.to_bits());
        assert!(s.l_h > 0.0);
    }
}

/// Mean change in `L_H` on each target batch after one momentum-free step
/// of the entropy objective restricted to `scope`.
fn entropy_change(scope: UpdateScope) -> f64 {
    let cfg = fixture(Method::Coal, 100.0, 2);
    let mut train = cfg.train.clone();
    let domains = prepare_domains(&cfg).unwrap();
    let mut model = build_model(&train, domains.source.feature_dim(), domains.source.num_classes).unwrap();
    pretrain(&mut model, &domains.source, &train, &mut Vec::new()).unwrap();
    train.momentum = 0.0;
    let pairs = epoch_pairs(&domains.source, domains.target_train.len(), &train, 0).unwrap();
    let mut total = 0.0;
    for (_, tgt) in &pairs {
        let xt = domains.target_train.features.select_rows(tgt);
        let mut m = model.clone();
        m.zero_grads();
        let before = entropy_objective(&mut m, &xt, train.alpha).unwrap();
        apply_update(&mut m, &train, scope).unwrap();
        let after = mean_entropy(&m.forward(&xt).unwrap().probabilities).unwrap().loss;
        total += after - before;
    }
    total / pairs.len() as f64
}

#[test]
fn classifier_step_raises_entropy_and_extractor_step_lowers_it() {
    let c = entropy_change(UpdateScope::ClassifierOnly);
    let f = entropy_change(UpdateScope::ExtractorOnly);
    assert!(c > 0.0, "classifier-only step changed L_H by {c}");
    assert!(f < 0.0, "extractor-only step changed L_H by {f}");
}

#[test]
fn separable_two_class_toy_is_learned() {
    let twin = TwinDomainConfig {
        num_classes: 2,
        noise_std: 0.5,
        rotation_deg: 0.0,
        per_class: 200,
        ..TwinDomainConfig::default()
    };
    let (data, _) = generate_twin_domains(&twin, &twin.class_means(), 3).unwrap();
    let train = TrainConfig {
        hidden_dims: vec![16],
        lr_other: 0.01,
        seed: 3,
        ..TrainConfig::default()
    };
    let mut model = build_model(&train, 2, 2).unwrap();
    let mut step = 0;
    'outer: for epoch in 0.. {
        for (src, _) in epoch_pairs(&data, data.len(), &train, epoch).unwrap() {
            let (x, y) = data.batch(&src);
            model.zero_grads();
            source_classification_loss(&mut model, LabeledBatch { inputs: &x, labels: &y }).unwrap();
            apply_update(&mut model, &train, UpdateScope::All).unwrap();
            step += 1;
            if step == 200 {
                break 'outer;
            }
        }
    }
    let acc = evaluate(&model, &data).unwrap().overall_accuracy;
    assert!(acc > 0.95, "accuracy {acc}");
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let cfg = small_fixture(Method::Coal, 9);
    let a = run_experiment(&cfg).unwrap();
    let b = run_experiment(&cfg).unwrap();
    let ja = serde_json::to_string(&a.model.to_checkpoint()).unwrap();
    let jb = serde_json::to_string(&b.model.to_checkpoint()).unwrap();
    assert_eq!(ja, jb);
    assert_eq!(a.report.metrics, b.report.metrics);

    let mut other = cfg.clone();
    other.train.seed = 10;
    let c = run_experiment(&other).unwrap();
    assert_ne!(serde_json::to_string(&c.model.to_checkpoint()).unwrap(), ja);
}

#[test]
fn discriminator_is_driven_toward_chance() {
    let cfg = fixture(Method::MarginalAlign, 100.0, 1);
    let out = run_experiment(&cfg).unwrap();
    let acc: Vec<f64> = out.report.metrics.epochs.iter().map(|e| e.discriminator_accuracy.unwrap()).collect();
    let gap = |s: &[f64]| s.iter().map(|a| (a - 0.5).abs()).sum::<f64>() / s.len() as f64;
    let early = gap(&acc[..5]);
    let late = gap(&acc[acc.len() - 5..]);
    assert!(late <= early, "early gap {early}, late gap {late}: {acc:?}");
}

#[test]
fn pseudo_label_accuracy_does_not_degrade() {
    let cfg = fixture(Method::Coal, 100.0, 1);
    let out = run_experiment(&cfg).unwrap();
    let acc = |e: usize| out.report.metrics.epochs[e].pseudo_label_accuracy.unwrap();
    assert!(acc(25) >= acc(1), "epoch 1 {}, epoch 25 {}", acc(1), acc(25));
}

#[test]
fn sweep_yields_one_report_per_degree_in_column_order() {
    let base = small_fixture(Method::Coal, 2);
    let degrees = [100.0, 0.0, 60.0, 20.0, 80.0, 40.0];
    let reports: Vec<RunReport> = base.sweep(&degrees).iter().map(|c| run_experiment(c).unwrap().report).collect();
    assert_eq!(reports.len(), 6);
    for (r, d) in reports.iter().zip(degrees) {
        assert_eq!(r.metrics.degree, d);
    }

    let table = render_table(&reports, TableFormat::Csv).unwrap();
    let mut reader = csv::Reader::from_reader(table.as_bytes());
    let header: Vec<String> = reader.headers().unwrap().iter().map(String::from).collect();
    let task = &reports[0].metrics.task;
    let expected: Vec<String> = std::iter::once("method".to_string())
        .chain([0, 20, 40, 60, 80, 100].iter().map(|d| format!("{task} d={d}")))
        .collect();
    assert_eq!(header, expected);
    let rows: Vec<csv::StringRecord> = reader.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 1);
    for (col, d) in [0.0, 20.0, 40.0, 60.0, 80.0, 100.0].iter().enumerate() {
        let r = reports.iter().find(|r| r.metrics.degree == *d).unwrap();
        let cell: f64 = rows[0][col + 1].parse().unwrap();
        assert!((cell - 100.0 * r.metrics.summary.per_class_mean_accuracy).abs() <= 0.005 + 1e-9);
    }
}

#[test]
fn empty_sweep_table_is_an_error() {
    assert!(render_table(&[], TableFormat::Markdown).is_err());
}
