//! Planted cohort dataset with lagged co-purchase structure.
//!
//! Items are grouped into blocks. A global clock advances through phases and
//! every cohort walks the same block sequence, cohort `c` trailing cohort 0 by
//! `c * lag` phases. So what one cohort buys now, the next cohort buys later.
//! Users skip phases at random, so the last purchase alone does not say where
//! the cohort is now; the elapsed time does.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ctbg::Interaction;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantedConfig {
    pub users: usize,
    pub cohorts: usize,
    pub items: usize,
    pub block_size: usize,
    pub phases: usize,
    /// Interactions per user in each phase the user is active.
    pub per_phase: usize,
    /// Probability that a user is active in a given phase.
    pub activity: f64,
    /// Probability that an interaction picks a uniformly random item.
    pub noise: f64,
    /// Phase lag between consecutive cohorts.
    pub lag: usize,
    pub phase_seconds: f64,
    pub start: f64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        PlantedConfig {
            users: 200,
            cohorts: 4,
            items: 100,
            block_size: 5,
            phases: 40,
            per_phase: 2,
            activity: 0.5,
            noise: 0.1,
            lag: 1,
            phase_seconds: 86_400.0,
            start: 1.0e9,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Planted {
    /// Raw-second timestamps, sorted ascending.
    pub interactions: Vec<Interaction>,
    pub cohort_of_user: Vec<usize>,
    /// Block visited by each cohort in each phase.
    pub schedule: Vec<Vec<usize>>,
    pub num_users: usize,
    pub num_items: usize,
}

impl PlantedConfig {
    pub fn num_blocks(&self) -> usize {
        self.items / self.block_size
    }

    fn validate(&self) -> Result<()> {
        let ok = self.users >= self.cohorts
            && self.cohorts > 0
            && self.block_size > 0
            && self.items >= self.block_size
            && self.items % self.block_size == 0
            && self.phases > 0
            && self.per_phase > 0
            && (0.0..=1.0).contains(&self.noise)
            && self.activity > 0.0
            && self.activity <= 1.0
            && self.phase_seconds > 0.0
            && self.start >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("bad planted dataset config {self:?}")))
        }
    }
}

pub fn planted(config: &PlantedConfig, seed: u64) -> Result<Planted> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nb = config.num_blocks();
    let mut order: Vec<usize> = (0..nb).collect();
    order.shuffle(&mut rng);
    let schedule: Vec<Vec<usize>> = (0..config.cohorts)
        .map(|c| {
            (0..config.phases)
                .map(|p| order[(p + nb * config.cohorts * config.lag.max(1) - c * config.lag) % nb])
                .collect()
        })
        .collect();
    let cohort_of_user: Vec<usize> = (0..config.users).map(|u| u % config.cohorts).collect();
    let mut interactions = Vec::with_capacity(config.users * config.phases * config.per_phase);
    for (u, &c) in cohort_of_user.iter().enumerate() {
        for (p, &block) in schedule[c].iter().enumerate() {
            if rng.gen::<f64>() >= config.activity {
                continue;
            }
            let mut picks: Vec<usize> = (0..config.block_size).map(|k| block * config.block_size + k).collect();
            picks.shuffle(&mut rng);
            let mut times: Vec<f64> = (0..config.per_phase)
                .map(|_| config.start + (p as f64 + rng.gen::<f64>()) * config.phase_seconds)
                .collect();
            times.sort_by(f64::total_cmp);
            for (k, t) in times.into_iter().enumerate() {
                let item = if rng.gen::<f64>() < config.noise {
                    rng.gen_range(0..config.items)
                } else {
                    picks[k % picks.len()]
                };
                interactions.push(Interaction::new(u, item, t.round()));
            }
        }
    }
    interactions.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    Ok(Planted {
        interactions,
        cohort_of_user,
        schedule,
        num_users: config.users,
        num_items: config.items,
    })
}
