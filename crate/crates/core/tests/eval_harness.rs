//! Sweep and attribution behaviour on hand-built and briefly trained networks.

use potsal::cnn::{Architecture, ToyCnn};
use potsal::data::{Sample, Split, SyntheticDataset};
use potsal::eval::{
    attribution_report, collect_misclassified, collect_profiles, finetune_sweep, pruning_sweep,
    write_attribution_csv, write_report_csv, EvalConfig, Misclassified, Ranker,
};
use potsal::rank::Method;
use potsal::tail::fit_tail_model;
use potsal::train::{train, TrainConfig};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One 3×3 filter on a 2×2 image feeding a two-class classifier. With the
/// filter active class 1 wins; with it zeroed the class-0 bias wins.
fn micro() -> (ToyCnn, Misclassified) {
    let arch = Architecture {
        input_channels: 1,
        input_size: 2,
        stages: vec![1],
        num_classes: 2,
    };
    let mut params = vec![0.0; arch.num_params()];
    params[4] = 1.0; // kernel centre
                     // fc weights [class0, class1] then biases
    params[10] = -1.0;
    params[11] = 1.0;
    params[12] = 0.5;
    let net = ToyCnn::from_params(arch, params).unwrap();
    let sample = Sample {
        index: 0,
        image: vec![1.0; 4],
        label: 0,
    };
    assert_eq!(net.forward(&sample.image).unwrap().argmax(), 1);
    (net, Misclassified { sample, predicted: 1 })
}

fn micro_config(method: Method) -> EvalConfig {
    EvalConfig {
        max_filters: 1,
        ..EvalConfig::new(method)
    }
}

#[test]
fn pruning_the_bad_filter_corrects_the_sample() {
    let (net, m) = micro();
    let report = pruning_sweep(&net, &[m], &Ranker::LastGroup, &micro_config(Method::LastGroup)).unwrap();
    assert_eq!(report.rows.len(), 2);
    assert_eq!(report.rows[0].frac_corrected, 0.0);
    assert_eq!(report.rows[1].frac_corrected, 1.0);
    // zeroed feature leaves logits [0.5, 0]
    let e = 0.5f64.exp();
    assert!((report.rows[1].correct_conf - e / (e + 1.0)).abs() < 1e-15);
}

#[test]
fn finetuning_the_bad_filter_raises_correct_confidence() {
    let (net, m) = micro();
    let report = finetune_sweep(&net, &[m], &Ranker::LastGroup, &micro_config(Method::LastGroup)).unwrap();
    assert!(report.rows[1].correct_conf > report.rows[0].correct_conf);
    assert!(report.rows[1].incorrect_conf < report.rows[0].incorrect_conf);
}

#[test]
fn too_many_filters_is_a_config_error() {
    let (net, m) = micro();
    let c = EvalConfig {
        max_filters: 2,
        ..EvalConfig::new(Method::LastGroup)
    };
    assert!(pruning_sweep(&net, &[m], &Ranker::LastGroup, &c).is_err());
}

struct Fixture {
    net: ToyCnn,
    mis: Vec<Misclassified>,
    model: potsal::tail::TailModel,
}

fn fixture() -> Fixture {
    let data = SyntheticDataset::generate(4, Split::Train, 400);
    let config = TrainConfig {
        epochs: 2,
        ..TrainConfig::default()
    };
    let net = train(&data, &config).unwrap();
    let reference = collect_profiles(&net, &SyntheticDataset::generate(5, Split::Shifted, 200)).unwrap();
    let model = fit_tail_model(&reference, 0.9).unwrap();
    let mis = collect_misclassified(&net, &SyntheticDataset::generate(6, Split::Shifted, 120)).unwrap();
    assert!(mis.len() >= 10, "only {} misclassified", mis.len());
    Fixture { net, mis, model }
}

#[test]
fn sweeps_on_trained_network() {
    let f = fixture();
    for m in &f.mis {
        assert_ne!(f.net.forward(&m.sample.image).unwrap().argmax(), m.sample.label);
    }

    let baseline: f64 = f
        .mis
        .iter()
        .map(|m| f.net.forward(&m.sample.image).unwrap().probs[m.predicted])
        .sum::<f64>()
        / f.mis.len() as f64;

    let mut shuffled = f.mis.clone();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(1));

    for method in Method::ALL {
        let config = EvalConfig {
            max_filters: 12,
            random_seeds: vec![7, 8, 9],
            ..EvalConfig::new(method)
        };
        let ranker = Ranker::from_config(&config, Some(&f.model)).unwrap();
        let prune = pruning_sweep(&f.net, &f.mis, &ranker, &config).unwrap();
        assert_eq!(prune.n_samples, f.mis.len());
        assert_eq!(prune.n_seeds, if method == Method::Random { 3 } else { 1 });
        assert!((prune.rows[0].incorrect_conf - baseline).abs() < 1e-12);
        assert_eq!(prune.rows[0].frac_corrected, 0.0);
        for row in &prune.rows {
            for v in [row.incorrect_conf, row.correct_conf, row.frac_corrected] {
                assert!((0.0..=1.0).contains(&v));
            }
        }
        // sample order does not matter, and reruns are identical
        assert_eq!(prune, pruning_sweep(&f.net, &shuffled, &ranker, &config).unwrap());

        // a vanishing step leaves every row at the baseline
        let tiny = EvalConfig {
            lr: 1e-300,
            ..config.clone()
        };
        let ft = finetune_sweep(&f.net, &f.mis, &ranker, &tiny).unwrap();
        let base = ft.rows[0];
        for r in &ft.rows {
            assert_eq!(
                (r.incorrect_conf, r.correct_conf, r.frac_corrected),
                (base.incorrect_conf, base.correct_conf, base.frac_corrected)
            );
        }
    }
}

#[test]
fn random_rankings_depend_only_on_seed_and_sample() {
    let f = fixture();
    let ranker = Ranker::Random(vec![3, 4]);
    let m = &f.mis[0];
    let profile = vec![0.0; 56];
    let a = ranker.rankings(&f.net, &m.sample, &profile).unwrap();
    let b = ranker.rankings(&f.net, &m.sample, &profile).unwrap();
    assert_eq!(a, b);
    assert_ne!(a[0], a[1]);
    let other = Sample {
        index: m.sample.index + 1,
        ..m.sample.clone()
    };
    assert_ne!(a, ranker.rankings(&f.net, &other, &profile).unwrap());
}

#[test]
fn attribution_at_full_depth_matches_group_sizes() {
    let f = fixture();
    for ranker in [Ranker::Pot(&f.model), Ranker::Random(vec![1, 2])] {
        let shares = attribution_report(&f.net, &f.mis, &ranker, 56).unwrap();
        let want = [8.0, 16.0, 32.0].map(|n| 100.0 * n / 56.0);
        for (s, w) in shares.iter().zip(want) {
            assert!((s.percent - w).abs() < 1e-9, "{shares:?}");
        }
    }
    let last = attribution_report(&f.net, &f.mis, &Ranker::LastGroup, 20).unwrap();
    assert_eq!(
        last.iter().map(|s| s.percent).collect::<Vec<_>>(),
        vec![0.0, 0.0, 100.0]
    );
    assert!(attribution_report(&f.net, &f.mis, &Ranker::LastGroup, 0).is_err());
}

#[test]
fn csv_outputs() {
    let (net, m) = micro();
    let c = micro_config(Method::LastGroup);
    let report = pruning_sweep(&net, std::slice::from_ref(&m), &Ranker::LastGroup, &c).unwrap();
    let mut buf = Vec::new();
    write_report_csv(&mut buf, &[report]).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(
        lines[0],
        "method,k,incorrect_conf,correct_conf,frac_corrected,n_samples,n_seeds"
    );
    assert_eq!(lines.len(), 3);
    assert!(lines[2].starts_with("lastgroup,1,"));
    assert!(lines[2].ends_with(",1,1,1"));

    let shares = attribution_report(&net, &[m], &Ranker::LastGroup, 1).unwrap();
    let mut buf = Vec::new();
    write_attribution_csv(&mut buf, &[(Method::LastGroup, 1, shares)]).unwrap();
    assert_eq!(
        String::from_utf8(buf).unwrap(),
        "method,k,layer_group,percent\nlastgroup,1,conv1,100\n"
    );
}
