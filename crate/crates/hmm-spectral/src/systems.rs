//! Bundled 3-state example systems spanning a wide cond(OT) range.
//!
//! Eight systems, all with three hidden states and three or ten symbols.
//! The `low` class sits below cond 10, `medium` inside [10, 50] and `high`
//! above 100 (built from nearly collinear observation columns, which is
//! what makes spectral recovery hard). Initial distributions are the
//! stationary distributions of the transition matrices, so consecutive
//! sequences start in steady state and need no burn-in.

use ndarray::{arr2, Array2};
use serde::{Deserialize, Serialize};

use crate::eval::cond_ot;
use crate::model::{stationary_distribution, HmmModel, TOL_STATIONARY};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CondClass {
    Low,
    Medium,
    High,
}

/// One bundled system with its intended difficulty class and the computed
/// condition number of `O T`.
#[derive(Debug, Clone)]
pub struct ExampleSystem {
    pub id: &'static str,
    pub model: HmmModel,
    pub intended_cond_class: CondClass,
    pub cond_ot: f64,
}

struct Spec {
    id: &'static str,
    class: CondClass,
    t: fn() -> Array2<f64>,
    o: fn() -> Array2<f64>,
}

fn t_sym_sticky() -> Array2<f64> {
    arr2(&[[0.80, 0.10, 0.10], [0.10, 0.80, 0.10], [0.10, 0.10, 0.80]])
}

fn t_skewed() -> Array2<f64> {
    arr2(&[[0.70, 0.20, 0.10], [0.20, 0.70, 0.15], [0.10, 0.10, 0.75]])
}

fn t_mixing() -> Array2<f64> {
    arr2(&[[0.60, 0.25, 0.15], [0.25, 0.60, 0.15], [0.15, 0.15, 0.70]])
}

fn t_ten_symbol() -> Array2<f64> {
    arr2(&[[0.75, 0.15, 0.10], [0.15, 0.70, 0.15], [0.10, 0.15, 0.75]])
}

const SPECS: &[Spec] = &[
    Spec {
        id: "low-3a",
        class: CondClass::Low,
        t: t_sym_sticky,
        o: || arr2(&[[0.80, 0.10, 0.10], [0.10, 0.80, 0.10], [0.10, 0.10, 0.80]]),
    },
    Spec {
        id: "low-3b",
        class: CondClass::Low,
        t: t_skewed,
        o: || {
            arr2(&[
                [0.6250, 0.1700, 0.2050],
                [0.1650, 0.6200, 0.1650],
                [0.2100, 0.2100, 0.6300],
            ])
        },
    },
    Spec {
        id: "low-10a",
        class: CondClass::Low,
        t: t_ten_symbol,
        o: || {
            arr2(&[
                [0.27, 0.03, 0.03],
                [0.23, 0.04, 0.03],
                [0.18, 0.03, 0.04],
                [0.10, 0.05, 0.03],
                [0.05, 0.28, 0.05],
                [0.04, 0.24, 0.05],
                [0.03, 0.19, 0.10],
                [0.04, 0.08, 0.19],
                [0.03, 0.03, 0.23],
                [0.03, 0.03, 0.25],
            ])
        },
    },
    Spec {
        id: "mid-3a",
        class: CondClass::Medium,
        t: t_skewed,
        o: || {
            arr2(&[
                [0.4167, 0.2867, 0.2967],
                [0.2733, 0.4033, 0.2733],
                [0.3100, 0.3100, 0.4300],
            ])
        },
    },
    Spec {
        id: "mid-3b",
        class: CondClass::Medium,
        t: t_mixing,
        o: || {
            arr2(&[
                [0.3828, 0.3045, 0.3126],
                [0.2872, 0.3655, 0.2872],
                [0.3300, 0.3300, 0.4002],
            ])
        },
    },
    Spec {
        id: "mid-3c",
        class: CondClass::Medium,
        t: t_skewed,
        o: || {
            arr2(&[
                [0.3637, 0.3163, 0.3200],
                [0.3008, 0.3483, 0.3008],
                [0.3355, 0.3354, 0.3792],
            ])
        },
    },
    Spec {
        id: "high-3a",
        class: CondClass::High,
        t: t_mixing,
        o: || {
            arr2(&[
                [0.3438, 0.3273, 0.3290],
                [0.3078, 0.3244, 0.3078],
                [0.3484, 0.3483, 0.3632],
            ])
        },
    },
    Spec {
        id: "high-10a",
        class: CondClass::High,
        t: t_ten_symbol,
        o: || {
            arr2(&[
                [0.1159, 0.1121, 0.1121],
                [0.1020, 0.0991, 0.0989],
                [0.0849, 0.0825, 0.0826],
                [0.0605, 0.0599, 0.0596],
                [0.1322, 0.1356, 0.1322],
                [0.1089, 0.1119, 0.1092],
                [0.1055, 0.1079, 0.1066],
                [0.0989, 0.0997, 0.1014],
                [0.0989, 0.0991, 0.1020],
                [0.0923, 0.0922, 0.0954],
            ])
        },
    },
];

/// All bundled systems, in a fixed order.
pub fn bundled_examples() -> Vec<ExampleSystem> {
    SPECS.iter().map(build).collect()
}

/// Look up one bundled system by id.
pub fn bundled_example(id: &str) -> Option<ExampleSystem> {
    SPECS.iter().find(|s| s.id == id).map(build)
}

/// Ids of all bundled systems.
pub fn bundled_ids() -> Vec<&'static str> {
    SPECS.iter().map(|s| s.id).collect()
}

fn build(spec: &Spec) -> ExampleSystem {
    let t = (spec.t)();
    let o = (spec.o)();
    let pi = stationary_distribution(&t, TOL_STATIONARY)
        .expect("bundled transition matrices have simple unit eigenvalues");
    let model = HmmModel::new(t, o, pi).expect("bundled matrices are consistent");
    let cond = cond_ot(&model);
    ExampleSystem {
        id: spec.id,
        model,
        intended_cond_class: spec.class,
        cond_ot: cond,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TOL_CONSTRUCTED;

    #[test]
    fn at_least_seven_three_state_systems() {
        let systems = bundled_examples();
        assert!(systems.len() >= 7);
        for s in &systems {
            assert_eq!(s.model.num_states(), 3, "{}", s.id);
            assert!(s.model.num_symbols() == 3 || s.model.num_symbols() == 10);
        }
        let ten = systems.iter().filter(|s| s.model.num_symbols() == 10).count();
        assert!(ten >= 2, "need at least two ten-symbol systems");
    }

    #[test]
    fn every_bundled_model_validates() {
        for s in bundled_examples() {
            assert!(
                s.model.validate(TOL_CONSTRUCTED).valid,
                "{}: {:?}",
                s.id,
                s.model.validate(TOL_CONSTRUCTED).violations
            );
        }
    }

    #[test]
    fn cond_classes_hold() {
        let systems = bundled_examples();
        let in_class = |class: CondClass| systems.iter().filter(move |s| s.intended_cond_class == class);
        for s in in_class(CondClass::Low) {
            assert!(s.cond_ot < 10.0, "{}: cond {}", s.id, s.cond_ot);
        }
        for s in in_class(CondClass::Medium) {
            assert!(
                (10.0..=50.0).contains(&s.cond_ot),
                "{}: cond {}",
                s.id,
                s.cond_ot
            );
        }
        for s in in_class(CondClass::High) {
            assert!(s.cond_ot > 100.0, "{}: cond {}", s.id, s.cond_ot);
        }
        assert!(in_class(CondClass::Low).count() >= 2);
        assert!(in_class(CondClass::Medium).count() >= 2);
        assert!(in_class(CondClass::High).count() >= 2);
    }

    #[test]
    fn frozen_cond_values() {
        // Computed once with the cond_ot operation and pinned; a drift here
        // means the matrices or the SVD changed.
        let expected = [
            ("low-3a", 2.04),
            ("low-3b", 4.40),
            ("low-10a", 3.16),
            ("mid-3a", 15.40),
            ("mid-3b", 36.70),
            ("mid-3c", 42.19),
            ("high-3a", 173.79),
            ("high-10a", 216.62),
        ];
        for (id, cond) in expected {
            let s = bundled_example(id).unwrap();
            assert!(
                (s.cond_ot - cond).abs() / cond < 0.01,
                "{id}: cond {} vs pinned {cond}",
                s.cond_ot
            );
        }
    }

    #[test]
    fn lookup_by_id() {
        assert!(bundled_example("low-3a").is_some());
        assert!(bundled_example("nope").is_none());
        assert_eq!(bundled_ids().len(), bundled_examples().len());
    }
}
