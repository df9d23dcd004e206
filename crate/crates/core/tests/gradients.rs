mod common;

use common::{random_model, random_tokens};
use ihlab::datagen::{SequenceSample, TriggeredBigram};
use ihlab::model::{ForwardOptions, Normalization, ParamName, PeMode};
use ihlab::numeric::SeededRng;
use ihlab::training::{backward, finite_difference_check, MaskPolicy};

fn assert_close(pe: PeMode, seed: u64, sample: &SequenceSample, policy: MaskPolicy, opts: ForwardOptions) {
    let p = random_model(16, 6, 10, pe, seed);
    for c in finite_difference_check(&p, sample, policy, &ParamName::ALL, opts, 1e-5).unwrap() {
        assert!(c.analytic_norm > 0.0, "{} has no gradient", c.name);
        assert!(c.relative_error < 1e-5, "{pe:?} seed {seed} {}: {}", c.name, c.relative_error);
    }
}

#[test]
fn all_positions_both_encodings() {
    for pe in [PeMode::Ape, PeMode::Rpe] {
        for seed in 0..3 {
            let s = random_tokens(9, 6, &mut SeededRng::new(100 + seed));
            assert_close(pe, seed, &s, MaskPolicy::All, ForwardOptions::default());
        }
    }
}

#[test]
fn output_mask_on_bigram_data() {
    let data = TriggeredBigram::random(6, 2, 0.5, &mut SeededRng::new(4)).unwrap();
    for seed in 0..3 {
        let s = data.sample_sequence(10, &mut SeededRng::new(seed)).unwrap();
        if s.is_output_position[1..].iter().any(|&m| m) {
            assert_close(PeMode::Rpe, seed, &s, MaskPolicy::OutputsOnly, ForwardOptions::default());
        }
    }
}

#[test]
fn linearized_second_layer() {
    let opts = ForwardOptions {
        layer2: Normalization::Linearized,
    };
    for pe in [PeMode::Ape, PeMode::Rpe] {
        let s = random_tokens(8, 6, &mut SeededRng::new(7));
        assert_close(pe, 11, &s, MaskPolicy::FinalOnly, opts);
    }
}

#[test]
fn frozen_parameters_get_no_gradient() {
    let p = random_model(16, 6, 10, PeMode::Ape, 0);
    let s = random_tokens(8, 6, &mut SeededRng::new(0));
    let g = backward(&p, &s, MaskPolicy::All, &[ParamName::WK1, ParamName::W2]).unwrap();
    assert_eq!(g.names().collect::<Vec<_>>(), vec![ParamName::WK1, ParamName::W2]);
}
