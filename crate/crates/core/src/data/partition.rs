use std::collections::BTreeSet;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};

const MIN_SAMPLES_PER_CLIENT: usize = 2;
const MAX_PARTITION_ATTEMPTS: usize = 1000;

/// Assignment of dataset indices to clients, the held-out (OOD) set, and
/// each client's train/test split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionPlan {
    pub num_clients: usize,
    pub assignments: Vec<Vec<usize>>,
    pub ood_clients: BTreeSet<usize>,
    pub train_fraction: f64,
    pub train: Vec<Vec<usize>>,
    pub test: Vec<Vec<usize>>,
}

impl PartitionPlan {
    pub fn from_assignments(assignments: Vec<Vec<usize>>) -> Self {
        let n = assignments.len();
        Self {
            num_clients: n,
            train: assignments.clone(),
            test: vec![Vec::new(); n],
            assignments,
            ood_clients: BTreeSet::new(),
            train_fraction: 1.0,
        }
    }

    /// Clients that take part in training, ascending.
    pub fn training_pool(&self) -> Vec<usize> {
        (0..self.num_clients)
            .filter(|c| !self.ood_clients.contains(c))
            .collect()
    }

    pub fn is_ood(&self, client: usize) -> bool {
        self.ood_clients.contains(&client)
    }

    /// Per-client class histogram.
    pub fn histogram(&self, data: &Dataset) -> Vec<Vec<usize>> {
        self.assignments
            .iter()
            .map(|idx| {
                let mut h = vec![0; data.num_classes];
                for &i in idx {
                    h[data.labels[i]] += 1;
                }
                h
            })
            .collect()
    }

    /// Number of distinct classes held by each client.
    pub fn classes_per_client(&self, data: &Dataset) -> Vec<usize> {
        self.histogram(data)
            .iter()
            .map(|h| h.iter().filter(|&&c| c > 0).count())
            .collect()
    }

    pub fn validate(&self, data: &Dataset) -> Result<()> {
        let n = self.num_clients;
        if self.assignments.len() != n || self.train.len() != n || self.test.len() != n {
            return Err(Error::Partition("per-client lists disagree with num_clients".into()));
        }
        let mut seen = vec![false; data.len()];
        for (c, idx) in self.assignments.iter().enumerate() {
            if idx.len() < MIN_SAMPLES_PER_CLIENT {
                return Err(Error::Partition(format!("client {c} has fewer than 2 samples")));
            }
            for &i in idx {
                if i >= data.len() || std::mem::replace(&mut seen[i], true) {
                    return Err(Error::Partition(format!("index {i} invalid or assigned twice")));
                }
            }
            let mut split: Vec<usize> = self.train[c].iter().chain(&self.test[c]).copied().collect();
            split.sort_unstable();
            let mut own = idx.clone();
            own.sort_unstable();
            if split != own {
                return Err(Error::Partition(format!("client {c} train/test split does not cover its samples")));
            }
        }
        if let Some(&c) = self.ood_clients.iter().find(|&&c| c >= n) {
            return Err(Error::Partition(format!("ood client {c} out of range")));
        }
        Ok(())
    }
}

/// Draws one Dirichlet(alpha_dot * 1) vector by normalising Gamma draws.
fn dirichlet(alpha_dot: f64, n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let gamma = Gamma::new(alpha_dot, 1.0).expect("positive shape");
    loop {
        let draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
        let sum: f64 = draws.iter().sum();
        if sum > 0.0 && sum.is_finite() {
            return draws.into_iter().map(|g| g / sum).collect();
        }
    }
}

/// Class-wise Dirichlet allocation: each class's samples are split across
/// clients by a fresh Dirichlet(alpha_dot) proportion vector. Draws that
/// leave any client with fewer than two samples are redrawn.
pub fn dirichlet_partition(
    data: &Dataset,
    num_clients: usize,
    alpha_dot: f64,
    rng: &mut impl Rng,
) -> Result<PartitionPlan> {
    if !(alpha_dot > 0.0 && alpha_dot.is_finite()) {
        return Err(Error::InvalidArgument(format!("alpha_dot must be > 0, got {alpha_dot}")));
    }
    if num_clients == 0 {
        return Err(Error::InvalidArgument("need at least one client".into()));
    }
    if data.len() < MIN_SAMPLES_PER_CLIENT * num_clients {
        return Err(Error::Partition(format!(
            "{} samples cannot give {num_clients} clients two samples each",
            data.len()
        )));
    }
    let by_class = data.class_indices();
    for _ in 0..MAX_PARTITION_ATTEMPTS {
        let mut assignments = vec![Vec::new(); num_clients];
        for class in &by_class {
            if class.is_empty() {
                continue;
            }
            let mut idx = class.clone();
            idx.shuffle(rng);
            let p = dirichlet(alpha_dot, num_clients, rng);
            let n = idx.len();
            let mut start = 0usize;
            let mut cum = 0.0;
            for (client, share) in p.iter().enumerate() {
                cum += share;
                let end = if client + 1 == num_clients {
                    n
                } else {
                    ((cum * n as f64).floor() as usize).clamp(start, n)
                };
                assignments[client].extend_from_slice(&idx[start..end]);
                start = end;
            }
        }
        if assignments.iter().all(|a| a.len() >= MIN_SAMPLES_PER_CLIENT) {
            for a in &mut assignments {
                a.sort_unstable();
            }
            return Ok(PartitionPlan::from_assignments(assignments));
        }
    }
    Err(Error::Partition(format!(
        "no draw gave every client two samples after {MAX_PARTITION_ATTEMPTS} attempts"
    )))
}

/// Marks `num_ood` uniformly chosen clients as held out.
pub fn holdout_ood(plan: &PartitionPlan, num_ood: usize, rng: &mut impl Rng) -> Result<PartitionPlan> {
    if num_ood > plan.num_clients {
        return Err(Error::InvalidArgument(format!(
            "cannot hold out {num_ood} of {} clients",
            plan.num_clients
        )));
    }
    let mut out = plan.clone();
    out.ood_clients = index::sample(rng, plan.num_clients, num_ood).into_iter().collect();
    Ok(out)
}

/// Per-client train/test split, stratified by class. With a fraction below
/// one, any class with at least two samples lands in both halves and every
/// client keeps at least one sample on each side.
pub fn client_train_test_split(
    plan: &PartitionPlan,
    data: &Dataset,
    fraction: f64,
    rng: &mut impl Rng,
) -> Result<PartitionPlan> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("train fraction must lie in (0, 1], got {fraction}")));
    }
    let mut out = plan.clone();
    out.train_fraction = fraction;
    for (c, idx) in plan.assignments.iter().enumerate() {
        let mut by_class = vec![Vec::new(); data.num_classes];
        for &i in idx {
            by_class[data.labels[i]].push(i);
        }
        let mut train = Vec::new();
        let mut test = Vec::new();
        for mut members in by_class.into_iter().filter(|m| !m.is_empty()) {
            members.shuffle(rng);
            let count = members.len();
            let mut n_train = (count as f64 * fraction).round() as usize;
            if fraction < 1.0 && count >= 2 {
                n_train = n_train.clamp(1, count - 1);
            }
            let n_train = n_train.min(count);
            train.extend_from_slice(&members[..n_train]);
            test.extend_from_slice(&members[n_train..]);
        }
        if fraction < 1.0 && idx.len() >= 2 {
            if test.is_empty() {
                let k = rng.random_range(0..train.len());
                test.push(train.swap_remove(k));
            } else if train.is_empty() {
                let k = rng.random_range(0..test.len());
                train.push(test.swap_remove(k));
            }
        }
        train.sort_unstable();
        test.sort_unstable();
        out.train[c] = train;
        out.test[c] = test;
    }
    Ok(out)
}
