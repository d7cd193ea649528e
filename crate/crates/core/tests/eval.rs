mod common;

use common::*;
use dpg_core::eval::{chance_inputs, condition_alignment, image_alignment, make_report, ContextProbe, ProbeConfig};
use dpg_core::networks::Parameterized;
use dpg_core::numerics::{RngStream, Tensor};
use dpg_core::par::Execution;
use proptest::prelude::*;

proptest! {
    #[test]
    fn scores_are_bounded(seed in 0u64..1000) {
        let setup = mixture_setup(seed, 3, 2, 20, 1.0);
        let r = &mut rng(seed, "bounded");
        let gen: Vec<Tensor> = (0..6).map(|_| randn(r, &[1, 2]).scale(3.0)).collect();
        let ia = image_alignment(&gen, &setup.dataset.sets[0], &setup.encoder).unwrap();
        prop_assert!((-1.0..=1.0).contains(&ia));
        let probe = ContextProbe::train(&setup.dataset, &ProbeConfig { steps: 50, ..ProbeConfig::default() }, &RngStream::new(seed, "probe")).unwrap();
        let conds: Vec<_> = (0..6).map(|i| setup.dataset.spec(i % setup.dataset.n_tokens())).collect();
        let ca = condition_alignment(&gen, &conds, &probe).unwrap();
        prop_assert!((0.0..=1.0).contains(&ca));
    }
}

#[test]
fn encoder_separates_concepts() {
    let setup = mixture_setup(0, 10, 5, 20, 1.0);
    let sets = &setup.dataset.sets;
    let mut intra = 0.0;
    let mut inter = 0.0;
    for (i, a) in sets.iter().enumerate() {
        for (j, b) in sets.iter().enumerate() {
            let s = image_alignment(&a.samples, b, &setup.encoder).unwrap();
            if i == j {
                intra += s;
            } else {
                inter += s;
            }
        }
    }
    let n = sets.len() as f64;
    let (intra, inter) = (intra / n, inter / (n * (n - 1.0)));
    assert!(intra > inter + 0.3, "intra {intra} inter {inter}");
}

#[test]
fn probe_is_accurate_on_references_and_at_chance_on_noise() {
    let setup = mixture_setup(1, 5, 3, 20, 1.0);
    let probe = ContextProbe::train(&setup.dataset, &ProbeConfig::default(), &RngStream::new(1, "probe")).unwrap();
    assert!(probe.train_accuracy() > 0.95);
    let (inputs, conds) = chance_inputs(&setup.dataset, 3000, &RngStream::new(1, "chance"));
    let acc = condition_alignment(&inputs, &conds, &probe).unwrap();
    let chance = 1.0 / 3.0;
    assert!((acc - chance).abs() < 0.1, "{acc}");
}

#[test]
fn reports_are_deterministic_and_paired() {
    let setup = mixture_setup(2, 3, 2, 20, 1.0);
    let probe = ContextProbe::train(&setup.dataset, &ProbeConfig::default(), &RngStream::new(2, "probe")).unwrap();
    let policy = setup.init_policy(0);
    let a = make_report(&policy, &setup, &probe, 7, 4, Execution::Parallel).unwrap();
    let b = make_report(&policy, &setup, &probe, 7, 4, Execution::Sequential).unwrap();
    assert_eq!(a.to_text(), b.to_text());

    // Same parameters under another name: identical report. Different
    // parameters: the only thing that changes.
    let twin = policy.clone();
    assert_eq!(
        make_report(&twin, &setup, &probe, 7, 4, Execution::Parallel).unwrap(),
        a
    );
    let mut other = policy.clone();
    let r = &mut rng(2, "perturb");
    let flat: Vec<f64> = other
        .flat_params()
        .iter()
        .map(|v| v + 0.05 * randn(r, &[1]).item())
        .collect();
    other.load_flat(&flat).unwrap();
    let c = make_report(&other, &setup, &probe, 7, 4, Execution::Parallel).unwrap();
    assert_ne!(c.image_alignment, a.image_alignment);
    assert_eq!(c.n_samples, a.n_samples);
}
