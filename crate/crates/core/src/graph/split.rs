//! Leave-one-out train/test partition with frozen evaluation negatives.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{HeteroGraph, NodeType};
use crate::error::{Error, Result};
use crate::params::write_atomic;

/// Negatives ranked against each test item.
pub const EVAL_NEGATIVES: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct InteractionSplit {
    pub seed: u64,
    /// `(user, recipe)` training interactions, sorted.
    pub train: Vec<(usize, usize)>,
    /// One held-out `(user, recipe)` per evaluated user, sorted by user.
    pub test: Vec<(usize, usize)>,
    /// Frozen candidate negatives per evaluated user.
    pub negatives: BTreeMap<usize, Vec<usize>>,
    n_recipes: usize,
    train_by_user: Vec<Vec<usize>>,
}

/// On-disk form: `{seed, test: [[user, recipe]...], negatives: {user: [ids...]}}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFile {
    pub seed: u64,
    pub test: Vec<[usize; 2]>,
    pub negatives: BTreeMap<usize, Vec<usize>>,
}

pub fn leave_one_out_split(g: &HeteroGraph, seed: u64) -> Result<InteractionSplit> {
    leave_one_out_split_with(g, seed, EVAL_NEGATIVES)
}

/// Holds out one uniformly chosen interaction for every user with at least two,
/// then samples `n_negatives` distinct never-interacted recipes for each of them.
/// Users with a single interaction stay in training and are not evaluated.
pub fn leave_one_out_split_with(g: &HeteroGraph, seed: u64, n_negatives: usize) -> Result<InteractionSplit> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let interactions = g.interactions();
    let n_recipes = g.count(NodeType::Recipe);
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut negatives = BTreeMap::new();
    for (user, items) in interactions.iter().enumerate() {
        if items.len() < 2 {
            train.extend(items.iter().map(|&r| (user, r)));
            continue;
        }
        let held = rng.random_range(0..items.len());
        for (k, &r) in items.iter().enumerate() {
            if k == held {
                test.push((user, r));
            } else {
                train.push((user, r));
            }
        }
        let pool: Vec<usize> = complement(items, n_recipes);
        if pool.len() < n_negatives {
            return Err(Error::Sample(format!(
                "user {user} has only {} non-interacted recipes, {n_negatives} negatives needed",
                pool.len()
            )));
        }
        let picked = index::sample(&mut rng, pool.len(), n_negatives)
            .into_iter()
            .map(|i| pool[i])
            .collect();
        negatives.insert(user, picked);
    }
    train.sort_unstable();
    Ok(InteractionSplit::assemble(
        seed,
        train,
        test,
        negatives,
        g.count(NodeType::User),
        n_recipes,
    ))
}

/// Recipes in `0..n` not in the sorted `items`.
fn complement(items: &[usize], n: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(n.saturating_sub(items.len()));
    let mut it = items.iter().peekable();
    for r in 0..n {
        if it.peek() == Some(&&r) {
            it.next();
        } else {
            out.push(r);
        }
    }
    out
}

/// Uniform recipe outside `user`'s training interactions.
pub fn sample_training_negative<R: Rng + ?Sized>(split: &InteractionSplit, user: usize, rng: &mut R) -> Result<usize> {
    let seen = split
        .train_by_user
        .get(user)
        .ok_or_else(|| Error::contract(format!("user {user} does not exist")))?;
    let n = split.n_recipes;
    if seen.len() >= n {
        return Err(Error::Sample(format!("user {user} interacted with all {n} recipes")));
    }
    if seen.len() * 2 <= n {
        loop {
            let r = rng.random_range(0..n);
            if seen.binary_search(&r).is_err() {
                return Ok(r);
            }
        }
    }
    let pool = complement(seen, n);
    Ok(pool[rng.random_range(0..pool.len())])
}

impl InteractionSplit {
    fn assemble(
        seed: u64,
        train: Vec<(usize, usize)>,
        test: Vec<(usize, usize)>,
        negatives: BTreeMap<usize, Vec<usize>>,
        n_users: usize,
        n_recipes: usize,
    ) -> Self {
        let mut train_by_user = vec![Vec::new(); n_users];
        for &(u, r) in &train {
            train_by_user[u].push(r);
        }
        train_by_user.iter_mut().for_each(|v| v.sort_unstable());
        Self {
            seed,
            train,
            test,
            negatives,
            n_recipes,
            train_by_user,
        }
    }

    pub fn train_items(&self, user: usize) -> &[usize] {
        &self.train_by_user[user]
    }

    pub fn n_users(&self) -> usize {
        self.train_by_user.len()
    }

    pub fn n_recipes(&self) -> usize {
        self.n_recipes
    }

    /// The graph with every test interaction removed.
    pub fn train_graph(&self, g: &HeteroGraph) -> Result<HeteroGraph> {
        g.without_interactions(&self.test)
    }

    /// Checks every split invariant against the full graph.
    pub fn validate(&self, g: &HeteroGraph) -> Result<()> {
        let interactions = g.interactions();
        let bad = |msg: String| Err(Error::contract(msg));
        for &(u, r) in &self.test {
            if u >= interactions.len() || interactions[u].binary_search(&r).is_err() {
                return bad(format!("test pair ({u}, {r}) is not a user-recipe edge"));
            }
            if self.train_by_user[u].binary_search(&r).is_ok() {
                return bad(format!("test recipe {r} of user {u} is also in train"));
            }
            let Some(neg) = self.negatives.get(&u) else {
                return bad(format!("user {u} has a test item but no negatives"));
            };
            let mut sorted = neg.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != neg.len() {
                return bad(format!("negatives of user {u} contain duplicates"));
            }
            if let Some(x) = neg.iter().find(|x| interactions[u].binary_search(x).is_ok()) {
                return bad(format!("negative {x} of user {u} was interacted with"));
            }
            if neg.iter().any(|&x| x >= self.n_recipes) {
                return bad(format!("negative of user {u} out of range"));
            }
        }
        if self.negatives.len() != self.test.len() {
            return bad("negative lists and test pairs disagree".into());
        }
        Ok(())
    }

    pub fn to_file(&self) -> SplitFile {
        SplitFile {
            seed: self.seed,
            test: self.test.iter().map(|&(u, r)| [u, r]).collect(),
            negatives: self.negatives.clone(),
        }
    }

    /// Rebuilds a split from its file form; training pairs are the graph's
    /// user-recipe edges minus the test pairs.
    pub fn from_file(file: SplitFile, g: &HeteroGraph) -> Result<Self> {
        let test: Vec<(usize, usize)> = file.test.iter().map(|p| (p[0], p[1])).collect();
        let held: std::collections::HashSet<_> = test.iter().copied().collect();
        let mut train: Vec<(usize, usize)> = g
            .edges(super::RelationType::UserRecipe)
            .iter()
            .map(|e| (e.src, e.dst))
            .filter(|p| !held.contains(p))
            .collect();
        train.sort_unstable();
        let split = Self::assemble(
            file.seed,
            train,
            test,
            file.negatives,
            g.count(NodeType::User),
            g.count(NodeType::Recipe),
        );
        split.validate(g)?;
        Ok(split)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &serde_json::to_vec_pretty(&self.to_file())?)
    }

    pub fn load(path: &Path, g: &HeteroGraph) -> Result<Self> {
        let file: SplitFile = serde_json::from_slice(&std::fs::read(path)?)?;
        Self::from_file(file, g)
    }
}
