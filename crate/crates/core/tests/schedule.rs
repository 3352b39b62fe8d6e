//! Fine-tuning schedules: bit-exact trajectory invariants and the LR shape.

mod common;

use common::invariants;
use finetune_lab::optim::{lr_at, warmup_steps};
use finetune_lab::schedule::gu_layers;
use proptest::prelude::*;

#[test]
fn unreachable_threshold_matches_no_clipping() {
    invariants::degenerate_clip().unwrap();
}

#[test]
fn gu_keeps_lower_layers_frozen() {
    invariants::gu_freeze().unwrap();
}

#[test]
fn restart_last_iteration_is_full_finetune() {
    invariants::restart_equals_full().unwrap();
}

#[test]
fn first_gu_iteration_moves_top_only() {
    invariants::gu_first_iteration_deltas().unwrap();
}

#[test]
fn gu_layers_cover_top_down() {
    for l in 1..8 {
        for k in 0..l {
            let layers = gu_layers(l, k).unwrap();
            assert_eq!(layers.len(), k + 1);
            assert_eq!(*layers.last().unwrap(), l);
        }
        assert!(gu_layers(l, l).is_err());
    }
}

proptest! {
    #[test]
    fn lr_peaks_at_warmup_and_ends_at_zero(total in 1usize..500, frac in 0.0f64..1.0, base in 1e-5f64..1e-1) {
        let w = warmup_steps(total, frac);
        let mut prev = -1.0;
        for s in 0..=total {
            let lr = lr_at(s, total, w, base).unwrap();
            prop_assert!((0.0..=base).contains(&lr));
            if s <= w {
                prop_assert!(lr >= prev);
            } else {
                prop_assert!(lr <= prev);
            }
            prev = lr;
        }
        prop_assert_eq!(lr_at(w, total, w, base).unwrap(), base);
        if w < total {
            prop_assert_eq!(lr_at(total, total, w, base).unwrap(), 0.0);
        }
    }
}
