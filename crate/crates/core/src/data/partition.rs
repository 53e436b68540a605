//! Splitting a dataset across clients.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Gamma};

use super::Dataset;
use crate::math::log_sum_exp;
use crate::rng::{self, Rng};
use crate::{Error, Result};

/// Disjoint, non-empty sample index lists, one per client.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionPlan {
    assignments: Vec<Vec<usize>>,
}

impl PartitionPlan {
    /// Validates disjointness, bounds (`< dataset_len`) and non-emptiness.
    pub fn new(assignments: Vec<Vec<usize>>, dataset_len: usize) -> Result<Self> {
        let mut seen = vec![false; dataset_len];
        for (client, indices) in assignments.iter().enumerate() {
            if indices.is_empty() {
                return Err(Error::Partition(format!("client {client} received no samples")));
            }
            for &i in indices {
                if i >= dataset_len {
                    return Err(Error::Partition(format!("index {i} out of bounds for {dataset_len} samples")));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::Partition(format!("sample {i} assigned twice")));
                }
            }
        }
        Ok(Self { assignments })
    }

    pub fn clients(&self) -> usize {
        self.assignments.len()
    }

    pub fn assignments(&self) -> &[Vec<usize>] {
        &self.assignments
    }

    pub fn client(&self, r: usize) -> &[usize] {
        &self.assignments[r]
    }

    /// `histogram[r][c]` = samples of class `c` held by client `r`.
    pub fn class_histogram(&self, ds: &Dataset) -> Vec<Vec<usize>> {
        self.assignments
            .iter()
            .map(|idx| {
                let mut h = vec![0; ds.class_count()];
                for &i in idx {
                    h[ds.labels()[i]] += 1;
                }
                h
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DirichletConfig {
    /// Concentration; smaller is more skewed.
    pub alpha: f64,
    pub clients: usize,
    pub min_samples_per_client: usize,
    pub max_redraws: usize,
}

impl DirichletConfig {
    /// One batch of 64.
    pub const DEFAULT_MIN_SAMPLES: usize = 64;
    pub const DEFAULT_MAX_REDRAWS: usize = 100;

    pub fn new(alpha: f64, clients: usize) -> Self {
        Self {
            alpha,
            clients,
            min_samples_per_client: Self::DEFAULT_MIN_SAMPLES,
            max_redraws: Self::DEFAULT_MAX_REDRAWS,
        }
    }
}

/// Draws from `Dir(alpha, ..., alpha)` of dimension `k`.
///
/// Gamma variates are generated in log space via
/// `Gamma(a) = Gamma(a + 1) * U^(1/a)` so that very small `alpha` does not
/// underflow every component to zero.
fn sample_dirichlet(alpha: f64, k: usize, rng: &mut Rng) -> Vec<f64> {
    let gamma = Gamma::new(alpha + 1.0, 1.0).expect("alpha > 0");
    let logs: Vec<f64> = (0..k)
        .map(|_| {
            let g: f64 = gamma.sample(rng);
            let u: f64 = rng.random::<f64>();
            // `random` yields [0, 1); map 0 to the smallest positive value.
            g.ln() + u.max(f64::MIN_POSITIVE).ln() / alpha
        })
        .collect();
    let total = log_sum_exp(&logs);
    logs.iter().map(|l| (l - total).exp()).collect()
}

/// Integer counts summing to `total`, proportional to `shares`.
///
/// Floors first, then hands the leftover units to the largest fractional
/// remainders; ties go to the lower index.
fn largest_remainder(shares: &[f64], total: usize) -> Vec<usize> {
    let exact: Vec<f64> = shares.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Label-skewed split: every class is divided among the clients according to
/// its own Dirichlet draw.
///
/// The whole plan is redrawn (up to `max_redraws` times) until every client
/// holds at least `min_samples_per_client` samples.
pub fn partition_dirichlet(ds: &Dataset, cfg: &DirichletConfig, seed: u64) -> Result<PartitionPlan> {
    let DirichletConfig { alpha, clients, min_samples_per_client, max_redraws } = *cfg;
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidArgument(format!("alpha must be finite and > 0, got {alpha}")));
    }
    if clients < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 clients, got {clients}")));
    }
    let floor = min_samples_per_client.max(1);
    if clients * floor > ds.len() {
        return Err(Error::Partition(format!(
            "{} samples cannot give {clients} clients {floor} samples each",
            ds.len()
        )));
    }

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.class_count()];
    for (i, &y) in ds.labels().iter().enumerate() {
        by_class[y].push(i);
    }

    let mut rng = rng::rng_from(seed);
    for _ in 0..=max_redraws {
        let mut assignments = vec![Vec::new(); clients];
        for members in &by_class {
            if members.is_empty() {
                continue;
            }
            let shares = sample_dirichlet(alpha, clients, &mut rng);
            let counts = largest_remainder(&shares, members.len());
            let mut shuffled = members.clone();
            shuffled.shuffle(&mut rng);
            let mut rest = shuffled.as_slice();
            for (client, &count) in counts.iter().enumerate() {
                let (take, tail) = rest.split_at(count);
                assignments[client].extend_from_slice(take);
                rest = tail;
            }
        }
        if assignments.iter().all(|a| a.len() >= floor) {
            for a in &mut assignments {
                a.sort_unstable();
            }
            return PartitionPlan::new(assignments, ds.len());
        }
    }
    Err(Error::Partition(format!(
        "no Dirichlet(alpha = {alpha}) draw gave all {clients} clients >= {floor} of {} samples after {max_redraws} redraws",
        ds.len()
    )))
}

/// Assigns each client the samples whose labels fall in its class group.
///
/// Groups must be pairwise identical or disjoint. Clients that share an
/// identical group split its samples round-robin in index order, so two
/// clients sharing a group get the even- and odd-ranked samples.
pub fn partition_label_split(ds: &Dataset, groups: &[Vec<usize>]) -> Result<PartitionPlan> {
    if groups.is_empty() {
        return Err(Error::InvalidArgument("label split needs at least one group".into()));
    }
    let sets: Vec<BTreeSet<usize>> = groups.iter().map(|g| g.iter().copied().collect()).collect();
    for (r, set) in sets.iter().enumerate() {
        if let Some(&c) = set.iter().find(|&&c| c >= ds.class_count()) {
            return Err(Error::InvalidArgument(format!(
                "group {r} references class {c} but the dataset has {} classes",
                ds.class_count()
            )));
        }
        if set.is_empty() {
            return Err(Error::InvalidArgument(format!("group {r} is empty")));
        }
    }
    for a in 0..sets.len() {
        for b in a + 1..sets.len() {
            if sets[a] != sets[b] && !sets[a].is_disjoint(&sets[b]) {
                return Err(Error::InvalidArgument(format!("groups {a} and {b} partially overlap")));
            }
        }
    }

    let mut assignments = vec![Vec::new(); sets.len()];
    let mut done = vec![false; sets.len()];
    for r in 0..sets.len() {
        if done[r] {
            continue;
        }
        let sharers: Vec<usize> = (r..sets.len()).filter(|&q| sets[q] == sets[r]).collect();
        let members = ds.labels().iter().enumerate().filter(|(_, y)| sets[r].contains(y)).map(|(i, _)| i);
        for (rank, i) in members.enumerate() {
            assignments[sharers[rank % sharers.len()]].push(i);
        }
        for &q in &sharers {
            done[q] = true;
        }
    }
    PartitionPlan::new(assignments, ds.len())
}
