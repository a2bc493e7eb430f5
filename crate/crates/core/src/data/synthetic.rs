use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FuxiError, Result};

use super::parse::InteractionEvent;

/// Gaps drawn uniformly from `[min_secs, max_secs]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapClass {
    pub min_secs: i64,
    pub max_secs: i64,
}

/// How the item after `current` is chosen, given the class of the gap that
/// led into `current`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GapRule {
    /// Every item equally likely regardless of history.
    Uniform,
    /// Gap class `c` sends any item to `targets[c]` with probability
    /// `fidelity`.
    Fixed { targets: Vec<usize>, fidelity: f64 },
    /// Gap class `c` sends item `i` to `(i − 1 + shifts[c]) mod items + 1`
    /// with probability `fidelity`.
    Shift { shifts: Vec<usize>, fidelity: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub users: usize,
    pub items: usize,
    /// Events per user.
    pub length: usize,
    pub seed: u64,
    pub gap_classes: Vec<GapClass>,
    pub rule: GapRule,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            users: 500,
            items: 60,
            length: 40,
            seed: 7,
            gap_classes: vec![
                GapClass { min_secs: 1, max_secs: 20 },
                GapClass { min_secs: 3_600, max_secs: 7_200 },
                GapClass { min_secs: 86_400, max_secs: 172_800 },
                GapClass { min_secs: 2_592_000, max_secs: 5_184_000 },
            ],
            rule: GapRule::Fixed {
                targets: vec![1, 2, 3, 4],
                fidelity: 0.9,
            },
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.users == 0 || self.items == 0 || self.length == 0 {
            return Err(FuxiError::Config("synthetic users, items and length must be positive".into()));
        }
        if self.gap_classes.is_empty() {
            return Err(FuxiError::Config("synthetic data needs at least one gap class".into()));
        }
        if let Some(c) = self.gap_classes.iter().find(|c| c.min_secs < 0 || c.max_secs < c.min_secs) {
            return Err(FuxiError::Config(format!("invalid gap class {c:?}")));
        }
        let classes = self.gap_classes.len();
        match &self.rule {
            GapRule::Uniform => Ok(()),
            GapRule::Fixed { targets, fidelity } => {
                if targets.len() != classes || targets.iter().any(|&t| t == 0 || t > self.items) {
                    return Err(FuxiError::Config("fixed rule needs one target in [1, items] per gap class".into()));
                }
                check_fidelity(*fidelity, self.items)
            }
            GapRule::Shift { shifts, fidelity } => {
                if shifts.len() != classes {
                    return Err(FuxiError::Config("shift rule needs one shift per gap class".into()));
                }
                check_fidelity(*fidelity, self.items)
            }
        }
    }

    /// The item the rule prefers after `current` under gap class `class`.
    pub fn rule_target(&self, current: usize, class: usize) -> Option<usize> {
        match &self.rule {
            GapRule::Uniform => None,
            GapRule::Fixed { targets, .. } => Some(targets[class]),
            GapRule::Shift { shifts, .. } => Some((current - 1 + shifts[class]) % self.items + 1),
        }
    }

    fn fidelity(&self) -> f64 {
        match &self.rule {
            GapRule::Uniform => 0.0,
            GapRule::Fixed { fidelity, .. } | GapRule::Shift { fidelity, .. } => *fidelity,
        }
    }
}

fn check_fidelity(fidelity: f64, items: usize) -> Result<()> {
    if !(0.0..=1.0).contains(&fidelity) || (items < 2 && fidelity < 1.0) {
        return Err(FuxiError::Config("rule fidelity must lie in [0, 1] (and be 1 with a single item)".into()));
    }
    Ok(())
}

/// Index of the first class whose range contains `gap`.
pub fn gap_class_of(spec: &SyntheticSpec, gap: i64) -> Option<usize> {
    spec.gap_classes.iter().position(|c| (c.min_secs..=c.max_secs).contains(&gap))
}

/// Generates `users × length` events. Per user the first two items are
/// uniform; after that, the item following position `j` depends on item `j`
/// and the class of the gap `t_j − t_{j−1}`: with probability `fidelity` it
/// is the rule target, otherwise uniform over the remaining items. Item and
/// user ids start at 1.
pub fn synthesize_dataset(spec: &SyntheticSpec) -> Result<Vec<InteractionEvent>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let all: Vec<usize> = (1..=spec.items).collect();
    let mut events = Vec::with_capacity(spec.users * spec.length);
    for user in 1..=spec.users as u64 {
        let mut t: i64 = rng.gen_range(1_000_000_000..1_100_000_000);
        // class of the gap that led into `current`
        let mut into_current: Option<usize> = None;
        let mut current = 0usize;
        for j in 0..spec.length {
            let mut into_next = None;
            if j > 0 {
                let class = rng.gen_range(0..spec.gap_classes.len());
                let g = spec.gap_classes[class];
                t += rng.gen_range(g.min_secs..=g.max_secs);
                into_next = Some(class);
            }
            let target = into_current.and_then(|class| spec.rule_target(current, class));
            let item = match target {
                Some(target) if rng.gen_bool(spec.fidelity()) => target,
                Some(target) => loop {
                    let c = *all.choose(&mut rng).expect("items");
                    if c != target {
                        break c;
                    }
                },
                None => *all.choose(&mut rng).expect("items"),
            };
            events.push(InteractionEvent {
                user,
                item: item as u64,
                timestamp: t,
                rating: None,
            });
            current = item;
            into_current = into_next;
        }
    }
    Ok(events)
}
