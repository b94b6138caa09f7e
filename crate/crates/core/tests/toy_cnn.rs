//! Toy CNN gradients, pruning and fine-tuning semantics.

mod common;

use common::gradient_check;
use potsal::cnn::{Architecture, ToyCnn};
use potsal::data::{Split, SyntheticDataset};
use potsal::train::{train, TrainConfig};

fn net() -> ToyCnn {
    ToyCnn::init(Architecture::standard(), 3).unwrap()
}

#[test]
fn analytic_gradient_matches_finite_differences() {
    // Briefly trained so biases are nonzero and activations are spread out.
    let data = SyntheticDataset::generate(8, Split::Train, 200);
    let config = TrainConfig {
        epochs: 1,
        seed: 3,
        ..TrainConfig::default()
    };
    let trained = train(&data, &config).unwrap();
    let (worst, checked) = gradient_check(&trained, 40);
    assert!(checked >= 200);
    assert!(worst < 1e-4, "max relative error {worst}");
}

#[test]
fn backward_is_deterministic() {
    let n = net();
    let s = &SyntheticDataset::generate(1, Split::Val, 1).samples[0];
    assert_eq!(
        n.backward(&s.image, s.label).unwrap(),
        n.backward(&s.image, s.label).unwrap()
    );
}

#[test]
fn profile_is_mean_abs_gradient() {
    let arch = Architecture {
        input_channels: 1,
        input_size: 2,
        stages: vec![1],
        num_classes: 2,
    };
    let n = ToyCnn::zeros(arch).unwrap();
    // filter 0 owns nine kernel weights and one bias
    let mut grad = vec![0.0; n.params().len()];
    grad[0] = 1.0;
    grad[9] = -3.0;
    let p = n.profile_from_gradient(&grad);
    assert_eq!(p, vec![0.4]);
    assert_eq!(n.profile_from_gradient(&vec![0.0; grad.len()]), vec![0.0]);

    let big = net();
    let s = &SyntheticDataset::generate(1, Split::Val, 1).samples[0];
    let prof = big.filter_saliency_profile(&s.image, s.label).unwrap();
    assert_eq!(prof.len(), 56);
    assert!(prof.iter().all(|v| *v >= 0.0));
}

#[test]
fn zeroed_filters_output_exact_zeros() {
    let n = net();
    let ids = [0, 3, 9, 20, 40, 55];
    let z = n.zero_filters(&ids).unwrap();
    let data = SyntheticDataset::generate(2, Split::Shifted, 16);
    let arch = n.architecture();
    for s in &data.samples {
        let acts = z.conv_activations(&s.image).unwrap();
        let mut first = 0;
        for (stage, &filters) in arch.stages.iter().enumerate() {
            let plane = acts[stage].len() / filters;
            for &j in ids.iter().filter(|&&j| j >= first && j < first + filters) {
                let f = j - first;
                assert!(acts[stage][f * plane..(f + 1) * plane].iter().all(|&v| v == 0.0));
            }
            first += filters;
        }
    }
    assert_eq!(n.zero_filters(&[]).unwrap(), n);
    // original untouched
    assert_ne!(z, n);
}

#[test]
fn zeroing_first_stage_matches_zero_feature_network() {
    let n = net();
    let arch = n.architecture().clone();
    let all_conv1: Vec<usize> = (0..arch.stages[0]).collect();
    let pruned = n.zero_filters(&all_conv1).unwrap();
    // With a dead first stage every downstream activation only sees biases,
    // so the output cannot depend on the image.
    let data = SyntheticDataset::generate(3, Split::Val, 4);
    let outs: Vec<_> = data
        .samples
        .iter()
        .map(|s| pruned.forward(&s.image).unwrap().logits)
        .collect();
    for o in &outs[1..] {
        assert_eq!(o, &outs[0]);
    }
    assert_eq!(
        outs[0],
        pruned.forward(&vec![0.0; arch.input_len()]).unwrap().logits
    );
}

#[test]
fn finetune_touches_only_named_filters() {
    let n = net();
    let s = &SyntheticDataset::generate(5, Split::Val, 1).samples[0];
    let ids = [2, 17, 50];
    let updated = n.one_step_finetune(&s.image, s.label, &ids, 0.001).unwrap();
    let grad = n.backward(&s.image, s.label).unwrap().values;
    let arch = n.architecture();
    let mut owned = vec![false; n.params().len()];
    for &j in &ids {
        let (k, b) = arch.filter_params(j).unwrap();
        for i in k.chain(std::iter::once(b)) {
            owned[i] = true;
        }
    }
    for i in 0..owned.len() {
        if owned[i] {
            assert_eq!(updated.params()[i], n.params()[i] - 0.001 * grad[i]);
        } else {
            assert_eq!(updated.params()[i].to_bits(), n.params()[i].to_bits());
        }
    }
    assert_eq!(n.one_step_finetune(&s.image, s.label, &[], 0.001).unwrap(), n);
    assert!(n.one_step_finetune(&s.image, s.label, &[56], 0.001).is_err());
}

#[test]
fn small_step_descends() {
    let n = net();
    let all: Vec<usize> = (0..56).collect();
    for s in &SyntheticDataset::generate(6, Split::Shifted, 8).samples {
        let before = n.loss(&s.image, s.label).unwrap();
        let after = n
            .one_step_finetune(&s.image, s.label, &all, 1e-5)
            .unwrap()
            .loss(&s.image, s.label)
            .unwrap();
        assert!(after <= before + 1e-6);
    }
}

#[test]
fn logits_match_recorded_values() {
    // Seed-3 initialization, first validation image of seed 1. Recorded after
    // the gradient check passed.
    let golden = [
        0.4414595006136333,
        -0.31200496905156905,
        -1.5071353285581592,
        -0.8864803576255713,
    ];
    let s = potsal::data::sample(1, Split::Val, 0);
    let logits = net().forward(&s.image).unwrap().logits;
    for (a, b) in logits.iter().zip(golden) {
        assert!((a - b).abs() < 1e-12, "{logits:?}");
    }
}
