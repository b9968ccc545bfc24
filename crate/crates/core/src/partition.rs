//! Non-iid client splits: label sharding and Dirichlet (LDA) allocation.

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dirichlet, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Strategy {
    /// `shards_per_client` equal same-class shards per client.
    Shard { shards_per_client: usize },
    /// Per-class proportions drawn from `Dir(alpha)` over clients.
    Lda { alpha: f64 },
}

/// Client → sample-index lists over a training set, plus the matching test
/// split once [`Partition::assign_test`] has run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub n_clients: usize,
    pub strategy: Strategy,
    pub seed: u64,
    /// Sorted, pairwise disjoint index lists into the training set.
    pub train: Vec<Vec<usize>>,
    /// Sorted index lists into the test set. Disjoint under sharding; under
    /// LDA different clients may draw the same test sample.
    #[serde(default)]
    pub test: Option<Vec<Vec<usize>>>,
}

fn class_buckets(labels: &[usize]) -> Vec<Vec<usize>> {
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut buckets = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        buckets[y].push(i);
    }
    buckets
}

/// Splits `total` into integer parts proportional to `weights` (which sum
/// to 1): floor everything, then hand the leftover units to the largest
/// fractional parts, lower index first on ties.
pub fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    let raw: Vec<f64> = weights.iter().map(|w| w * total as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut leftover = total.saturating_sub(assigned);
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &k in order.iter().cycle() {
        if leftover == 0 {
            break;
        }
        counts[k] += 1;
        leftover -= 1;
    }
    counts
}

impl Partition {
    /// Label sharding: every class is cut into same-class shards of size
    /// `|D| / (n_clients · s)`, the shards are shuffled, and each client gets
    /// `s` of them.
    pub fn shard(
        labels: &[usize],
        n_clients: usize,
        shards_per_client: usize,
        rng: &SeededRng,
    ) -> Result<Self> {
        let shards = shard_lists(labels, n_clients, shards_per_client, rng, "shard")?;
        Ok(Partition {
            n_clients,
            strategy: Strategy::Shard { shards_per_client },
            seed: rng.root_seed(),
            train: deal(shards, n_clients, shards_per_client, rng),
            test: None,
        })
    }

    /// LDA: for each class, draw client proportions from `Dir(alpha)` and hand
    /// out that class's samples by largest remainder, so every sample is
    /// assigned.
    pub fn lda(labels: &[usize], n_clients: usize, alpha: f64, rng: &SeededRng) -> Result<Self> {
        if n_clients == 0 {
            return Err(Error::Partition("need at least one client".into()));
        }
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::Parameter(format!("LDA alpha must be > 0, got {alpha}")));
        }
        let mut train = vec![Vec::new(); n_clients];
        for (c, mut members) in class_buckets(labels).into_iter().enumerate() {
            if members.is_empty() {
                continue;
            }
            let key = rng.derive("lda-class", c as u64);
            let mut stream = key.stream();
            let weights = dirichlet(alpha, n_clients, &mut stream)?;
            members.shuffle(&mut stream);
            let counts = largest_remainder(&weights, members.len());
            let mut start = 0;
            for (client, count) in counts.into_iter().enumerate() {
                train[client].extend_from_slice(&members[start..start + count]);
                start += count;
            }
        }
        for list in &mut train {
            list.sort_unstable();
        }
        Ok(Partition {
            n_clients,
            strategy: Strategy::Lda { alpha },
            seed: rng.root_seed(),
            train,
            test: None,
        })
    }

    pub fn build(
        strategy: Strategy,
        labels: &[usize],
        n_clients: usize,
        rng: &SeededRng,
    ) -> Result<Self> {
        match strategy {
            Strategy::Shard { shards_per_client } => {
                Self::shard(labels, n_clients, shards_per_client, rng)
            }
            Strategy::Lda { alpha } => Self::lda(labels, n_clients, alpha, rng),
        }
    }

    /// Builds per-client test splits that mirror each client's training
    /// classes.
    ///
    /// Sharding cuts the test set into same-class shards of size
    /// `|D_test| / (n_clients · s)` and gives each client one test shard per
    /// training shard, of the same class. LDA samples, for each client, a test
    /// set whose class frequencies match its training histogram and whose
    /// size is proportional to its training size.
    pub fn assign_test(
        &mut self,
        train_labels: &[usize],
        test_labels: &[usize],
        rng: &SeededRng,
    ) -> Result<()> {
        let test = match self.strategy {
            Strategy::Shard { shards_per_client } => {
                self.shard_test(train_labels, test_labels, shards_per_client, rng)?
            }
            Strategy::Lda { .. } => self.lda_test(train_labels, test_labels, rng)?,
        };
        self.test = Some(test);
        Ok(())
    }

    fn shard_test(
        &self,
        train_labels: &[usize],
        test_labels: &[usize],
        shards_per_client: usize,
        rng: &SeededRng,
    ) -> Result<Vec<Vec<usize>>> {
        let train_shard = train_labels.len() / (self.n_clients * shards_per_client);
        let test_shards = shard_lists(test_labels, self.n_clients, shards_per_client, rng, "shard-test")?;
        let mut pools: Vec<Vec<Vec<usize>>> = Vec::new();
        for shard in test_shards {
            let c = test_labels[shard[0]];
            if pools.len() <= c {
                pools.resize(c + 1, Vec::new());
            }
            pools[c].push(shard);
        }
        let mut test = Vec::with_capacity(self.n_clients);
        for (k, members) in self.train.iter().enumerate() {
            let mut per_class = std::collections::BTreeMap::<usize, usize>::new();
            for &i in members {
                *per_class.entry(train_labels[i]).or_default() += 1;
            }
            let mut mine = Vec::new();
            for (c, count) in per_class {
                for _ in 0..count / train_shard {
                    let shard = pools.get_mut(c).and_then(Vec::pop).ok_or_else(|| {
                        Error::Partition(format!(
                            "test set has too few shards of class {c} for client {k}"
                        ))
                    })?;
                    mine.extend(shard);
                }
            }
            mine.sort_unstable();
            test.push(mine);
        }
        Ok(test)
    }

    fn lda_test(
        &self,
        train_labels: &[usize],
        test_labels: &[usize],
        rng: &SeededRng,
    ) -> Result<Vec<Vec<usize>>> {
        let pools = class_buckets(test_labels);
        let ratio = test_labels.len() as f64 / train_labels.len().max(1) as f64;
        let mut test = Vec::with_capacity(self.n_clients);
        for (k, members) in self.train.iter().enumerate() {
            if members.is_empty() {
                test.push(Vec::new());
                continue;
            }
            let classes = pools.len().max(train_labels.iter().max().map_or(0, |m| m + 1));
            let mut hist = vec![0usize; classes];
            for &i in members {
                hist[train_labels[i]] += 1;
            }
            let wanted = ((members.len() as f64 * ratio).round() as usize).max(1);
            let weights: Vec<f64> = hist.iter().map(|&h| h as f64 / members.len() as f64).collect();
            let counts = largest_remainder(&weights, wanted);
            let mut stream = rng.derive("lda-test", k as u64).stream();
            let mut mine = Vec::with_capacity(wanted);
            for (c, count) in counts.into_iter().enumerate() {
                let pool = pools.get(c).map_or(&[][..], Vec::as_slice);
                let take = count.min(pool.len());
                if take == 0 {
                    continue;
                }
                mine.extend(index::sample(&mut stream, pool.len(), take).into_iter().map(|j| pool[j]));
            }
            mine.sort_unstable();
            test.push(mine);
        }
        Ok(test)
    }

    /// Checks index ranges and pairwise disjointness of the training lists.
    pub fn validate(&self, n_train: usize) -> Result<()> {
        if self.train.len() != self.n_clients {
            return Err(Error::Partition(format!(
                "{} client lists for {} clients",
                self.train.len(),
                self.n_clients
            )));
        }
        let mut seen = vec![false; n_train];
        for (k, list) in self.train.iter().enumerate() {
            for &i in list {
                if i >= n_train {
                    return Err(Error::Partition(format!("client {k}: index {i} out of range")));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::Partition(format!("index {i} assigned twice")));
                }
            }
        }
        if let Some(test) = &self.test {
            if test.len() != self.n_clients {
                return Err(Error::Partition("test split has wrong client count".into()));
            }
        }
        Ok(())
    }

    pub fn client_sizes(&self) -> Vec<usize> {
        self.train.iter().map(Vec::len).collect()
    }

    pub fn total_assigned(&self) -> usize {
        self.train.iter().map(Vec::len).sum()
    }
}

/// Shuffles each class and slices it into shards of the common size.
fn shard_lists(
    labels: &[usize],
    n_clients: usize,
    shards_per_client: usize,
    rng: &SeededRng,
    label: &str,
) -> Result<Vec<Vec<usize>>> {
    if n_clients == 0 || shards_per_client == 0 {
        return Err(Error::Partition("need at least one client and one shard per client".into()));
    }
    let n_shards = n_clients * shards_per_client;
    if !labels.len().is_multiple_of(n_shards) {
        return Err(Error::Partition(format!(
            "{} samples do not divide into {n_shards} shards (remainder {})",
            labels.len(),
            labels.len() % n_shards
        )));
    }
    let size = labels.len() / n_shards;
    if size == 0 {
        return Err(Error::Partition(format!(
            "{} samples are too few for {n_shards} shards",
            labels.len()
        )));
    }
    let mut shards = Vec::with_capacity(n_shards);
    for (c, mut members) in class_buckets(labels).into_iter().enumerate() {
        if members.len() % size != 0 {
            return Err(Error::Partition(format!(
                "class {c} has {} samples, not a multiple of shard size {size} (remainder {})",
                members.len(),
                members.len() % size
            )));
        }
        members.shuffle(&mut rng.derive(label, c as u64).stream());
        shards.extend(members.chunks_exact(size).map(<[usize]>::to_vec));
    }
    Ok(shards)
}

fn deal(
    mut shards: Vec<Vec<usize>>,
    n_clients: usize,
    shards_per_client: usize,
    rng: &SeededRng,
) -> Vec<Vec<usize>> {
    shards.shuffle(&mut rng.derive("deal", 0).stream());
    shards
        .chunks_exact(shards_per_client)
        .take(n_clients)
        .map(|group| {
            let mut list = group.concat();
            list.sort_unstable();
            list
        })
        .collect()
}

/// Per-client label statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionStats {
    pub num_classes: usize,
    /// `histograms[k][c]` = training samples of class `c` at client `k`.
    pub histograms: Vec<Vec<usize>>,
    /// Shannon entropy of each client's label distribution, in nats.
    pub entropy: Vec<f64>,
    /// Classes with at least `threshold` training samples.
    pub observed: Vec<Vec<usize>>,
    /// Complement of `observed` in `[C]`.
    pub unobserved: Vec<Vec<usize>>,
    pub threshold: usize,
}

impl PartitionStats {
    /// Mask form of `observed[client]`.
    pub fn observed_mask(&self, client: usize) -> Vec<bool> {
        let mut mask = vec![false; self.num_classes];
        for &c in &self.observed[client] {
            mask[c] = true;
        }
        mask
    }

    pub fn distinct_classes(&self, client: usize) -> usize {
        self.observed[client].len()
    }
}

/// Histograms, entropy and observed/unobserved class sets. A class is
/// observed at a client when it has at least `threshold` (normally 1)
/// training samples there.
pub fn partition_stats(
    p: &Partition,
    labels: &[usize],
    num_classes: usize,
    threshold: usize,
) -> PartitionStats {
    let threshold = threshold.max(1);
    let histograms: Vec<Vec<usize>> = p
        .train
        .iter()
        .map(|list| {
            let mut h = vec![0usize; num_classes];
            for &i in list {
                h[labels[i]] += 1;
            }
            h
        })
        .collect();
    let entropy = histograms
        .iter()
        .map(|h| {
            let total: usize = h.iter().sum();
            if total == 0 {
                return 0.0;
            }
            -h.iter()
                .filter(|&&n| n > 0)
                .map(|&n| {
                    let q = n as f64 / total as f64;
                    q * q.ln()
                })
                .sum::<f64>()
        })
        .collect();
    let observed: Vec<Vec<usize>> = histograms
        .iter()
        .map(|h| (0..num_classes).filter(|&c| h[c] >= threshold).collect())
        .collect();
    let unobserved = histograms
        .iter()
        .map(|h| (0..num_classes).filter(|&c| h[c] < threshold).collect())
        .collect();
    PartitionStats {
        num_classes,
        histograms,
        entropy,
        observed,
        unobserved,
        threshold,
    }
}
