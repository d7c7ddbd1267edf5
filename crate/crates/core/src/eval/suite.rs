//! The built-in synthetic suite: five source users with mild per-user
//! affine shifts and one strongly shifted target user.

use crate::data::synth::{DriftSpec, SynthSpec, UserTransform};
use crate::data::types::SubjectId;
use crate::model::arch::{ArchConfig, DecaySchedule, TrainHyper};

pub const SUITE_TARGET: SubjectId = SubjectId(5);
pub const SUITE_DRIFT_AT: usize = 160;

const SOURCES: [([f64; 3], [f64; 3]); 5] = [
    ([0.6, -0.4, 0.2], [1.3, 0.8, 1.0]),
    ([-0.5, 0.5, 0.4], [0.75, 1.25, 1.35]),
    ([0.2, 0.6, -0.6], [1.4, 1.0, 0.75]),
    ([-0.4, -0.6, 0.0], [0.8, 1.4, 1.2]),
    ([0.0, 0.1, 0.5], [1.0, 0.7, 0.85]),
];
const TARGET: ([f64; 3], [f64; 3]) = ([1.2, -1.0, 0.9], [1.6, 0.65, 1.5]);

fn transform(user: u32, (offset, scale): ([f64; 3], [f64; 3])) -> UserTransform {
    UserTransform { user, offset, scale }
}

/// Sources plus the shifted target.
pub fn suite_spec(seed: u64) -> SynthSpec {
    let mut spec = SynthSpec {
        seed,
        num_users: 6,
        classes: 4,
        samples_per_class: 2400,
        ..Default::default()
    };
    spec.shift.users = SOURCES.iter().enumerate().map(|(k, t)| transform(k as u32, *t)).collect();
    spec.shift.users.push(transform(SUITE_TARGET.0, TARGET));
    spec
}

/// Same sources; the target starts unshifted and switches to the shifted
/// transform at window [`SUITE_DRIFT_AT`] of its stream.
pub fn suite_drift_spec(seed: u64) -> SynthSpec {
    let mut spec = suite_spec(seed);
    spec.shift.users.pop();
    let (offset, scale) = TARGET;
    spec.shift.drift = Some(DriftSpec {
        user: SUITE_TARGET.0,
        at_window: SUITE_DRIFT_AT,
        offset,
        scale,
    });
    spec
}

pub fn suite_arch(classes: usize) -> ArchConfig {
    ArchConfig::tiny(classes).with_dropout_rate(0.1)
}

pub fn suite_hyper(seed: u64) -> TrainHyper {
    TrainHyper {
        learning_rate: 3e-3,
        decay: 1e-3,
        decay_schedule: DecaySchedule::InverseTime,
        epochs: 30,
        batch_size: 32,
        seed,
        ..Default::default()
    }
}
