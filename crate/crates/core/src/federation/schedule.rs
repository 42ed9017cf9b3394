//! Round schedules: FedAvg-initialization cadence, client sampling, and
//! per-group distillation step budgets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};

/// True iff parameter averaging runs this round. The rate is a percentage:
/// 100 initializes every round, 20 every 5th round. Rounds are 1-based and
/// the period is `round(100 / rate)` with ties-to-even.
pub fn schedule_fedavg_init(round: usize, rate: f64) -> Result<bool> {
    if !(rate > 0.0 && rate <= 100.0) {
        return Err(Error::InvalidRate(rate));
    }
    let period = ((100.0 / rate).round_ties_even() as usize).max(1);
    Ok(round % period == 0)
}

/// Seeded sample without replacement of `max(1, round(C * n))` client ids,
/// ascending; deterministic per `(seed, round)`.
pub fn sample_clients(round: usize, n_clients: usize, participation: f64, seed: u64) -> Result<Vec<usize>> {
    if n_clients == 0 {
        return Err(Error::EmptyData("no clients to sample".into()));
    }
    if !(participation > 0.0 && participation <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "participation must be in (0, 1], got {participation}"
        )));
    }
    let k = ((participation * n_clients as f64).round() as usize).clamp(1, n_clients);
    let mut rng = stream(seed, Purpose::ClientSample, &[round as u64]);
    let mut picked = rand::seq::index::sample(&mut rng, n_clients, k).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// How server-side distillation steps are budgeted across rounds and
/// architecture groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum DistillSchedule {
    /// The same step count for every group every round.
    Uniform { steps_per_round: usize },
    /// A per-round total divided across groups proportionally to their
    /// member counts; rounding remainder goes to the largest group.
    Proportional { total_per_round: usize },
    /// Geometrically decaying per-round budgets normalized so the grand
    /// total over all rounds and groups equals `total_steps`; each round's
    /// budget splits evenly across groups.
    FrontLoaded { total_steps: usize, decay: f64 },
}

impl DistillSchedule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            DistillSchedule::FrontLoaded { decay, .. } if !(decay > 0.0 && decay <= 1.0) => Err(
                Error::InvalidConfig(format!("front_loaded decay must be in (0, 1], got {decay}")),
            ),
            _ => Ok(()),
        }
    }
}

/// Largest-remainder split of `total` by `weights`; ties go to the lower
/// index, so the allocation is deterministic and sums exactly to `total`.
fn largest_remainder(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if sum <= 0.0 {
        let mut out = vec![0; weights.len()];
        if !out.is_empty() {
            out[0] = total;
        }
        return out;
    }
    let exact: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut out: Vec<usize> = exact.iter().map(|&e| e.floor() as usize).collect();
    let mut leftover = total - out.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for i in order {
        if leftover == 0 {
            break;
        }
        out[i] += 1;
        leftover -= 1;
    }
    out
}

/// Step budget for `(round, group)`; rounds are 1-based. `group_sizes` are
/// member counts per architecture group; `total_rounds` is needed only by
/// the front-loaded mode.
pub fn schedule_distillation_steps(
    round: usize,
    group: usize,
    group_sizes: &[usize],
    total_rounds: usize,
    schedule: &DistillSchedule,
) -> Result<usize> {
    schedule.validate()?;
    if group >= group_sizes.len() {
        return Err(Error::IndexOutOfRange {
            index: group,
            len: group_sizes.len(),
        });
    }
    match *schedule {
        DistillSchedule::Uniform { steps_per_round } => Ok(steps_per_round),
        DistillSchedule::Proportional { total_per_round } => {
            let total_size: usize = group_sizes.iter().sum();
            if total_size == 0 {
                return Ok(0);
            }
            let mut out: Vec<usize> = group_sizes
                .iter()
                .map(|&s| total_per_round * s / total_size)
                .collect();
            let leftover = total_per_round - out.iter().sum::<usize>();
            let largest = (0..group_sizes.len())
                .max_by(|&a, &b| group_sizes[a].cmp(&group_sizes[b]).then(b.cmp(&a)))
                .unwrap();
            out[largest] += leftover;
            Ok(out[group])
        }
        DistillSchedule::FrontLoaded { total_steps, decay } => {
            if round == 0 || round > total_rounds {
                return Err(Error::InvalidConfig(format!(
                    "round {round} outside 1..={total_rounds}"
                )));
            }
            let weights: Vec<f64> = (0..total_rounds).map(|r| decay.powi(r as i32)).collect();
            let per_round = largest_remainder(total_steps, &weights);
            let even = vec![1.0; group_sizes.len()];
            let per_group = largest_remainder(per_round[round - 1], &even);
            Ok(per_group[group])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_rate_100_fires_every_round() {
        for round in 1..=30 {
            assert!(schedule_fedavg_init(round, 100.0).unwrap());
        }
    }

    #[test]
    fn init_rate_20_fires_every_fifth_round() {
        let fired: Vec<usize> = (1..=10)
            .filter(|&r| schedule_fedavg_init(r, 20.0).unwrap())
            .collect();
        assert_eq!(fired, vec![5, 10]);
    }

    #[test]
    fn init_rate_50_has_period_two() {
        let fired: Vec<usize> = (1..=4)
            .filter(|&r| schedule_fedavg_init(r, 50.0).unwrap())
            .collect();
        assert_eq!(fired, vec![2, 4]);
    }

    #[test]
    fn init_rate_must_be_positive_percentage() {
        assert!(matches!(
            schedule_fedavg_init(1, 0.0),
            Err(Error::InvalidRate(_))
        ));
        assert!(schedule_fedavg_init(1, 101.0).is_err());
    }

    #[test]
    fn sampling_identities() {
        // Full participation selects everyone.
        assert_eq!(
            sample_clients(3, 5, 1.0, 9).unwrap(),
            vec![0, 1, 2, 3, 4]
        );
        // 20 clients at C = 0.4 -> 8 clients.
        assert_eq!(sample_clients(1, 20, 0.4, 9).unwrap().len(), 8);
        // Deterministic per (seed, round).
        assert_eq!(
            sample_clients(7, 20, 0.4, 9).unwrap(),
            sample_clients(7, 20, 0.4, 9).unwrap()
        );
        // At least one client even at tiny participation.
        assert_eq!(sample_clients(1, 10, 0.01, 0).unwrap().len(), 1);
    }

    #[test]
    fn uniform_schedule_is_constant() {
        let s = DistillSchedule::Uniform {
            steps_per_round: 500,
        };
        for round in 1..=30 {
            for group in 0..3 {
                assert_eq!(
                    schedule_distillation_steps(round, group, &[6, 7, 7], 30, &s).unwrap(),
                    500
                );
            }
        }
    }

    #[test]
    fn proportional_schedule_matches_arithmetic() {
        let s = DistillSchedule::Proportional {
            total_per_round: 1500,
        };
        let sizes = [6, 7, 7];
        let got: Vec<usize> = (0..3)
            .map(|g| schedule_distillation_steps(1, g, &sizes, 30, &s).unwrap())
            .collect();
        assert_eq!(got, vec![450, 525, 525]);
    }

    #[test]
    fn front_loaded_grand_total_is_exact() {
        let uniform_total = 3 * 30 * 500;
        let target = (uniform_total as f64 * 0.75) as usize;
        let s = DistillSchedule::FrontLoaded {
            total_steps: target,
            decay: 0.9,
        };
        let sizes = [6, 7, 7];
        let mut grand = 0usize;
        let mut first_round = 0usize;
        let mut last_round = 0usize;
        for round in 1..=30 {
            for group in 0..3 {
                let steps = schedule_distillation_steps(round, group, &sizes, 30, &s).unwrap();
                grand += steps;
                if round == 1 {
                    first_round += steps;
                }
                if round == 30 {
                    last_round += steps;
                }
            }
        }
        let err = (grand as f64 - target as f64).abs() / target as f64;
        assert!(err < 0.01, "grand total {grand} vs target {target}");
        assert!(first_round > last_round, "schedule should decay");
    }

    #[test]
    fn unknown_group_errors() {
        let s = DistillSchedule::Uniform {
            steps_per_round: 10,
        };
        assert!(schedule_distillation_steps(1, 3, &[1, 1, 1], 5, &s).is_err());
    }
}
