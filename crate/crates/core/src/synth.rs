//! Planted-cluster synthetic user-recipe-ingredient graphs.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{save_dir, Edge, HeteroGraph};
use crate::rng::{stream, Stream};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub users: usize,
    pub recipes: usize,
    pub ingredients: usize,
    pub clusters: usize,
    /// User-recipe edge probability inside a cluster.
    pub p_intra: f64,
    /// User-recipe edge probability across clusters.
    pub p_inter: f64,
    /// Recipe-recipe edge probability between same-cluster recipes.
    pub p_recipe_link: f64,
    /// Chance that an ingredient is drawn from the recipe's own cluster.
    pub p_ingredient_intra: f64,
    pub min_ingredients: usize,
    pub max_ingredients: usize,
    pub recipe_dim: usize,
    pub ingredient_dim: usize,
    /// 0 writes no user feature file (users then get trainable input vectors).
    pub user_dim: usize,
    /// Standard deviation of feature noise around the cluster centroid.
    pub feature_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            users: 50,
            recipes: 200,
            ingredients: 30,
            clusters: 4,
            p_intra: 0.3,
            p_inter: 0.01,
            p_recipe_link: 0.05,
            p_ingredient_intra: 0.8,
            min_ingredients: 3,
            max_ingredients: 8,
            recipe_dim: 16,
            ingredient_dim: 16,
            user_dim: 0,
            feature_noise: 1.0,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let mut v = Vec::new();
        if self.users == 0 || self.recipes == 0 || self.ingredients == 0 {
            v.push("counts: every node count must be >= 1".to_string());
        }
        if self.clusters == 0 {
            v.push("clusters: must be >= 1".into());
        }
        for (name, p) in [
            ("p_intra", self.p_intra),
            ("p_inter", self.p_inter),
            ("p_recipe_link", self.p_recipe_link),
            ("p_ingredient_intra", self.p_ingredient_intra),
        ] {
            if !(0.0..=1.0).contains(&p) {
                v.push(format!("{name}: must be a probability"));
            }
        }
        if self.p_intra <= self.p_inter {
            v.push("p_intra: must exceed p_inter".into());
        }
        if self.min_ingredients == 0 || self.min_ingredients > self.max_ingredients {
            v.push("min_ingredients: need 1 <= min <= max".into());
        }
        if self.max_ingredients > self.ingredients {
            v.push("max_ingredients: exceeds the ingredient count".into());
        }
        if self.recipe_dim == 0 || self.ingredient_dim == 0 {
            v.push("recipe_dim/ingredient_dim: must be >= 1".into());
        }
        if !(self.feature_noise >= 0.0) {
            v.push("feature_noise: must be >= 0".into());
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v.join("; ")))
        }
    }

    /// Cluster of node `i` of any type.
    pub fn cluster(&self, i: usize) -> usize {
        i % self.clusters
    }

    /// Expected number of user-recipe edges.
    pub fn expected_interactions(&self) -> f64 {
        (0..self.users)
            .map(|u| {
                let same = (0..self.recipes)
                    .filter(|&r| self.cluster(r) == self.cluster(u))
                    .count();
                same as f64 * self.p_intra + (self.recipes - same) as f64 * self.p_inter
            })
            .sum()
    }
}

fn clustered_features<R: Rng>(rng: &mut R, spec: &SyntheticSpec, n: usize, dim: usize) -> Tensor {
    let centroids: Vec<Vec<f64>> = (0..spec.clusters)
        .map(|_| (0..dim).map(|_| StandardNormal.sample(rng)).collect())
        .collect();
    let mut data = Vec::with_capacity(n * dim);
    for i in 0..n {
        for &c in &centroids[spec.cluster(i)] {
            let z: f64 = StandardNormal.sample(rng);
            data.push(c + spec.feature_noise * z);
        }
    }
    Tensor::matrix(n, dim, data).expect("shape matches data")
}

pub fn generate(spec: &SyntheticSpec) -> Result<HeteroGraph> {
    spec.validate()?;
    let mut rng = stream(spec.seed, Stream::Synthetic, 0);
    let c = |i| spec.cluster(i);

    let mut ur = Vec::new();
    for u in 0..spec.users {
        for r in 0..spec.recipes {
            let p = if c(u) == c(r) { spec.p_intra } else { spec.p_inter };
            if rng.random::<f64>() < p {
                ur.push(Edge {
                    src: u,
                    dst: r,
                    weight: 1.0,
                });
            }
        }
    }

    let mut rr = Vec::new();
    for a in 0..spec.recipes {
        for b in a + 1..spec.recipes {
            if c(a) == c(b) && rng.random::<f64>() < spec.p_recipe_link {
                rr.push(Edge {
                    src: a,
                    dst: b,
                    weight: rng.random_range(0.5..1.0),
                });
            }
        }
    }

    let by_cluster: Vec<Vec<usize>> = (0..spec.clusters)
        .map(|k| (0..spec.ingredients).filter(|&i| c(i) == k).collect())
        .collect();
    let mut sets: Vec<Vec<usize>> = Vec::with_capacity(spec.recipes);
    for r in 0..spec.recipes {
        let want = rng.random_range(spec.min_ingredients..=spec.max_ingredients);
        let mut set = Vec::with_capacity(want);
        while set.len() < want {
            let own = &by_cluster[c(r)];
            let i = if !own.is_empty() && rng.random::<f64>() < spec.p_ingredient_intra {
                own[rng.random_range(0..own.len())]
            } else {
                rng.random_range(0..spec.ingredients)
            };
            if !set.contains(&i) {
                set.push(i);
            }
        }
        set.sort_unstable();
        sets.push(set);
    }
    let ri = sets
        .iter()
        .enumerate()
        .flat_map(|(r, s)| {
            s.iter().map(move |&i| Edge {
                src: r,
                dst: i,
                weight: 1.0,
            })
        })
        .collect();

    // Ingredient pairs linked by positive normalised PMI of co-occurrence.
    let n = spec.recipes as f64;
    let mut single = vec![0usize; spec.ingredients];
    let mut pair: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for s in &sets {
        for (k, &a) in s.iter().enumerate() {
            single[a] += 1;
            for &b in &s[k + 1..] {
                *pair.entry((a, b)).or_default() += 1;
            }
        }
    }
    let mut ii = Vec::new();
    for (&(a, b), &cnt) in &pair {
        let pab = cnt as f64 / n;
        let npmi = if pab >= 1.0 {
            1.0
        } else {
            (pab / (single[a] as f64 / n * single[b] as f64 / n)).ln() / -pab.ln()
        };
        if npmi > 0.0 {
            ii.push(Edge {
                src: a,
                dst: b,
                weight: npmi,
            });
        }
    }

    let users = (spec.user_dim > 0).then(|| {
        let data = (0..spec.users * spec.user_dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Tensor::matrix(spec.users, spec.user_dim, data).expect("shape matches data")
    });
    let recipes = clustered_features(&mut rng, spec, spec.recipes, spec.recipe_dim);
    let ingredients = clustered_features(&mut rng, spec, spec.ingredients, spec.ingredient_dim);

    HeteroGraph::new(
        [spec.users, spec.recipes, spec.ingredients],
        [ur, rr, ri, ii],
        [users, Some(recipes), Some(ingredients)],
    )
}

/// Generates and writes the dataset files into `dir`.
pub fn write(spec: &SyntheticSpec, dir: &Path) -> Result<HeteroGraph> {
    let g = generate(spec)?;
    save_dir(&g, dir)?;
    Ok(g)
}
