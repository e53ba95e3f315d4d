//! Built-in checks on toy fixtures: per-op and end-to-end gradients,
//! attention normalisation, set permutation invariance and metric oracles.

use std::fmt;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::error::Result;
use crate::eval::{metrics_at_k, rank_candidates, RankedList, MAX_K};
use crate::gradcheck::{check, worst, GradReport, DEFAULT_EPS};
use crate::graph::augment::augment;
use crate::graph::{Edge, HeteroGraph, NodeType, RelationType, Slot};
use crate::model::RecipeRec;
use crate::params::{xavier_uniform, ParamStore, ParamVars};
use crate::settf::{SetSpec, SetTransformer};
use crate::tensor::{Activation, OpKind, Tape, Tensor, Var};
use crate::train::joint_objective;

pub const GRAD_TOL: f64 = 1e-4;
pub const SUM_TOL: f64 = 1e-9;
pub const PERM_TOL: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug)]
pub struct SelfCheckReport {
    pub checks: Vec<Check>,
    pub seconds: f64,
}

impl SelfCheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

impl fmt::Display for SelfCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(
                f,
                "{} {:<32} {}",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.detail
            )?;
        }
        let failed = self.failures().count();
        writeln!(
            f,
            "{} of {} checks passed in {:.1}s",
            self.checks.len() - failed,
            self.checks.len(),
            self.seconds
        )
    }
}

fn outcome(name: impl Into<String>, result: Result<(bool, String)>) -> Check {
    let (passed, detail) = result.unwrap_or_else(|e| (false, format!("error: {e}")));
    Check {
        name: name.into(),
        passed,
        detail,
    }
}

fn describe(r: &GradReport) -> String {
    format!(
        "max rel err {:.2e} [{} entry {}: analytic {:.6e}, numeric {:.6e}]",
        r.max_rel_err, r.name, r.worst_entry, r.analytic, r.numeric
    )
}

fn grad_outcome(reports: Result<Vec<GradReport>>) -> Result<(bool, String)> {
    let reports = reports?;
    let w = worst(&reports).expect("at least one input");
    Ok((w.passes(GRAD_TOL), describe(w)))
}

fn rand_tensor<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::matrix(rows, cols, data).expect("shape matches data")
}

/// `sum(y * r)` with a fixed pseudo-random `r`.
fn probe(tape: &mut Tape, y: Var) -> Result<Var> {
    let s = tape.shape(y).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e37);
    let r = rand_tensor(&mut rng, s[0], s[1]);
    let p = tape.mul_const(y, r)?;
    Ok(tape.sum(p))
}

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// One finite-difference case per differentiable op kind.
fn op_cases(rng: &mut ChaCha8Rng) -> Vec<(OpKind, Vec<Tensor>, Build)> {
    let m = |rng: &mut ChaCha8Rng, r, c| rand_tensor(rng, r, c);
    let seg: Vec<usize> = vec![0, 2, 0, 1, 2];
    let src: Vec<usize> = vec![0, 1, 2, 1, 0];
    vec![
        (
            OpKind::MatMul,
            vec![m(rng, 3, 4), m(rng, 4, 2)],
            Box::new(|t, v| {
                let y = t.matmul(v[0], v[1])?;
                probe(t, y)
            }),
        ),
        (
            OpKind::Transpose,
            vec![m(rng, 3, 4)],
            Box::new(|t, v| {
                let y = t.transpose(v[0])?;
                probe(t, y)
            }),
        ),
        (
            OpKind::Add,
            vec![m(rng, 3, 4), m(rng, 3, 4)],
            Box::new(|t, v| {
                let y = t.add(v[0], v[1])?;
                probe(t, y)
            }),
        ),
        (
            OpKind::Sub,
            vec![m(rng, 3, 4), m(rng, 3, 4)],
            Box::new(|t, v| {
                let y = t.sub(v[0], v[1])?;
                probe(t, y)
            }),
        ),
        (
            OpKind::Mul,
            vec![m(rng, 3, 4), m(rng, 3, 4)],
            Box::new(|t, v| {
                let y = t.mul(v[0], v[1])?;
                probe(t, y)
            }),
        ),
        (
            OpKind::AddRow,
            vec![m(rng, 3, 4), m(rng, 1, 4)],
            Box::new(|t, v| {
                let y = t.add_row(v[0], v[1])?;
                probe(t, y)
            }),
        ),
        (
            OpKind::MulCol,
            vec![m(rng, 3, 4), m(rng, 3, 1)],
            Box::new(|t, v| {
                let y = t.mul_col(v[0], v[1])?;
                probe(t, y)
            }),
        ),
        (
            OpKind::MulConst,
            vec![m(rng, 3, 4)],
            Box::new(|t, v| {
                let c = Tensor::matrix(3, 4, (0..12).map(|i| i as f64 * 0.25 - 1.0).collect())?;
                let y = t.mul_const(v[0], c)?;
                Ok(t.sum(y))
            }),
        ),
        (
            OpKind::Scale,
            vec![m(rng, 3, 4)],
            Box::new(|t, v| {
                let y = t.scale(v[0], -1.7);
                probe(t, y)
            }),
        ),
        (
            OpKind::AddScalar,
            vec![m(rng, 3, 4)],
            Box::new(|t, v| {
                let y = t.add_scalar(v[0], 0.3);
                let y = t.mul(y, y)?;
                probe(t, y)
            }),
        ),
        (
            OpKind::Activation,
            vec![m(rng, 3, 4)],
            Box::new(|t, v| {
                let a = t.activation(v[0], Activation::LeakyRelu { slope: 0.2 });
                let b = t.activation(v[0], Activation::Tanh);
                let c = t.activation(v[0], Activation::Relu);
                let y = t.concat_cols(&[a, b, c])?;
                probe(t, y)
            }),
        ),
        (
            OpKind::SoftmaxScaled,
            vec![m(rng, 3, 4)],
            Box::new(|t, v| {
                let y = t.softmax_scaled(v[0], 0.7)?;
                probe(t, y)
            }),
        ),
        (
            OpKind::MaskedSoftmax,
            vec![m(rng, 3, 4)],
            Box::new(|t, v| {
                let mask: Vec<bool> = (0..12).map(|i| i % 3 != 1 && i < 8).collect();
                let y = t.masked_softmax(v[0], &mask)?;
                probe(t, y)
            }),
        ),
        (
            OpKind::LogSoftmax,
            vec![m(rng, 3, 4)],
            Box::new(|t, v| {
                let y = t.log_softmax(v[0])?;
                probe(t, y)
            }),
        ),
        (
            OpKind::RowNormalize,
            vec![m(rng, 3, 4)],
            Box::new(|t, v| {
                let y = t.row_normalize(v[0])?;
                probe(t, y)
            }),
        ),
        (
            OpKind::ConcatCols,
            vec![m(rng, 3, 2), m(rng, 3, 3)],
            Box::new(|t, v| {
                let y = t.concat_cols(&[v[0], v[1]])?;
                probe(t, y)
            }),
        ),
        (
            OpKind::ConcatRows,
            vec![m(rng, 2, 3), m(rng, 1, 3)],
            Box::new(|t, v| {
                let y = t.concat_rows(&[v[0], v[1]])?;
                probe(t, y)
            }),
        ),
        (
            OpKind::SliceCols,
            vec![m(rng, 3, 5)],
            Box::new(|t, v| {
                let y = t.slice_cols(v[0], 1, 3)?;
                probe(t, y)
            }),
        ),
        (
            OpKind::GatherRows,
            vec![m(rng, 3, 4)],
            Box::new(|t, v| {
                let y = t.gather_rows(v[0], vec![2, 0, 2, 1])?;
                probe(t, y)
            }),
        ),
        (OpKind::SegmentSum, vec![m(rng, 5, 3)], {
            let seg = seg.clone();
            Box::new(move |t, v| {
                let y = t.segment_sum(v[0], seg.clone(), 4)?;
                probe(t, y)
            })
        }),
        (OpKind::SegmentSoftmax, vec![m(rng, 5, 2)], {
            let seg = seg.clone();
            Box::new(move |t, v| {
                let y = t.segment_softmax(v[0], seg.clone(), 3)?;
                probe(t, y)
            })
        }),
        (OpKind::SegmentMax, vec![m(rng, 5, 3)], {
            let seg = seg.clone();
            Box::new(move |t, v| {
                let y = t.segment_max(v[0], &seg, 4)?;
                probe(t, y)
            })
        }),
        (
            OpKind::EdgeWeightedSum,
            vec![m(rng, 3, 4), m(rng, 5, 1)],
            Box::new(move |t, v| {
                let y = t.edge_weighted_sum(v[0], v[1], src.clone(), seg.clone(), 3)?;
                probe(t, y)
            }),
        ),
        (
            OpKind::SumAll,
            vec![m(rng, 3, 4)],
            Box::new(|t, v| {
                let y = t.mul(v[0], v[0])?;
                Ok(t.sum(y))
            }),
        ),
        (
            OpKind::MeanRows,
            vec![m(rng, 3, 4)],
            Box::new(|t, v| {
                let y = t.mean_rows(v[0])?;
                probe(t, y)
            }),
        ),
        (
            OpKind::RowDot,
            vec![m(rng, 3, 4), m(rng, 3, 4)],
            Box::new(|t, v| {
                let y = t.row_dot(v[0], v[1])?;
                probe(t, y)
            }),
        ),
        (
            OpKind::PickPerRow,
            vec![m(rng, 3, 4)],
            Box::new(|t, v| {
                let y = t.pick_per_row(v[0], &[3, 0, 1])?;
                probe(t, y)
            }),
        ),
    ]
}

/// Finite-difference check of every differentiable op, named `grad/<op>`.
pub fn op_gradient_checks(seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    op_cases(&mut rng)
        .into_iter()
        .map(|(kind, tensors, build)| {
            let named: Vec<(String, Tensor)> = tensors
                .into_iter()
                .enumerate()
                .map(|(i, t)| (format!("x{i}"), t))
                .collect();
            outcome(
                format!("grad/{}", kind.name()),
                grad_outcome(check(&named, DEFAULT_EPS, build)),
            )
        })
        .collect()
}

/// Ten-node graph with every relation, isolated-free, used by the checks.
pub fn toy_graph() -> HeteroGraph {
    let e = |src, dst, weight| Edge { src, dst, weight };
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    HeteroGraph::new(
        [3, 4, 3],
        [
            vec![
                e(0, 0, 1.0),
                e(0, 1, 1.0),
                e(1, 1, 1.0),
                e(1, 2, 1.0),
                e(2, 3, 1.0),
                e(2, 0, 1.0),
            ],
            vec![e(0, 1, 0.8), e(2, 3, 0.6)],
            vec![
                e(0, 0, 1.0),
                e(0, 1, 1.0),
                e(1, 1, 1.0),
                e(2, 0, 1.0),
                e(2, 2, 1.0),
                e(3, 2, 1.0),
                e(3, 1, 1.0),
            ],
            vec![e(0, 1, 0.4), e(1, 2, 0.2)],
        ],
        [
            None,
            Some(rand_tensor(&mut rng, 4, 3)),
            Some(rand_tensor(&mut rng, 3, 2)),
        ],
    )
    .expect("toy graph is valid")
}

/// Small dimensions so the end-to-end check runs in seconds.
pub fn toy_config() -> TrainConfig {
    TrainConfig {
        hidden: 4,
        heads: 2,
        settf_heads: 2,
        layers: 2,
        user_dim: 3,
        mlp_hidden: 3,
        node_drop: 0.2,
        edge_drop: 0.2,
        seed: 3,
        ..TrainConfig::default()
    }
}

/// Gradient of the full training objective (ranking + contrastive) with
/// respect to every model parameter on the toy graph.
pub fn joint_loss_gradients(config: &TrainConfig) -> Result<Vec<GradReport>> {
    let g = toy_graph();
    let model = RecipeRec::new(&g, config)?;
    let views = (
        augment(&g, config.node_drop, config.edge_drop, 11)?,
        augment(&g, config.node_drop, config.edge_drop, 12)?,
    );
    let clean = g.full_view();
    let batch = [(0, 1, 2), (1, 2, 3), (2, 3, 1), (0, 0, 3)];
    let named = model.store().to_named();
    check(&named, DEFAULT_EPS, |tape, vars| {
        let pv = ParamVars::from_vars(vars.to_vec());
        Ok(joint_objective(&model, tape, &pv, &batch, &clean, Some(&views))?.total)
    })
}

fn random_graph<R: Rng>(rng: &mut R) -> HeteroGraph {
    let counts = [
        rng.random_range(1..=5),
        rng.random_range(1..=6),
        rng.random_range(1..=5),
    ];
    let mut edges: [Vec<Edge>; 4] = Default::default();
    for (r, (a, b)) in [(0, (0, 1)), (1, (1, 1)), (2, (1, 2)), (3, (2, 2))] {
        for s in 0..counts[a] {
            for d in 0..counts[b] {
                if (a != b || s < d) && rng.random::<f64>() < 0.4 {
                    edges[r].push(Edge {
                        src: s,
                        dst: d,
                        weight: rng.random_range(0.1..1.0),
                    });
                }
            }
        }
    }
    let feats = [
        None,
        Some(rand_tensor(rng, counts[1], 3)),
        Some(rand_tensor(rng, counts[2], 2)),
    ];
    HeteroGraph::new(counts, edges, feats).expect("random graph is valid")
}

/// Largest deviation from 1 of any attention row sum over `trials` random graphs.
pub fn attention_row_deviation(trials: usize, seed: u64) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut alpha_dev, mut beta_dev) = (0.0f64, 0.0f64);
    for trial in 0..trials {
        let g = random_graph(&mut rng);
        let cfg = TrainConfig {
            seed: trial as u64,
            ..toy_config()
        };
        let model = RecipeRec::new(&g, &cfg)?;
        let mut tape = Tape::new();
        let pv = model.store().bind(&mut tape);
        let view = g.full_view();
        let out = model.encoder().encode(&mut tape, &pv, &view)?;
        for layer in &out.trace {
            for (slot, heads) in &layer.alpha {
                let csr = view.adjacency().slot(*slot);
                for &a in heads {
                    let mut sums = vec![0.0; csr.nodes()];
                    for (e, &d) in csr.dst.iter().enumerate() {
                        sums[d] += tape.value(a).data()[e];
                    }
                    for (i, s) in sums.iter().enumerate() {
                        if csr.degree(i) > 0 {
                            alpha_dev = alpha_dev.max((s - 1.0).abs());
                        }
                    }
                }
            }
            for (t, slots, beta) in &layer.beta {
                let b = tape.value(*beta);
                for i in 0..g.count(*t) {
                    let any = slots.iter().any(|s| view.adjacency().slot(*s).degree(i) > 0);
                    if any {
                        let s: f64 = b.row(i).iter().sum();
                        beta_dev = beta_dev.max((s - 1.0).abs());
                    }
                }
            }
        }
    }
    Ok((alpha_dev, beta_dev))
}

/// Largest output difference of the set encoder under random row
/// permutations, over `trials` random sets of 1 to 6 rows.
pub fn set_permutation_deviation(trials: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = 8;
    let mut store = ParamStore::new();
    let spec = SetSpec {
        dim: d,
        heads: 2,
        pooling: crate::config::Pooling::Mean,
        pool_first: true,
    };
    let st = SetTransformer::init(&mut store, &spec, &mut rng)?;
    let mut dev = 0.0f64;
    for _ in 0..trials {
        let n = rng.random_range(1..=6);
        let x = xavier_uniform(&mut rng, n, d);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let mut tape = Tape::new();
        let pv = store.bind(&mut tape);
        let a = tape.constant(x.clone());
        let b = tape.constant(x.select_rows(&perm));
        let ya = st.encode_set(&mut tape, &pv, a)?;
        let yb = st.encode_set(&mut tape, &pv, b)?;
        dev = dev.max(tape.value(ya).max_abs_diff(tape.value(yb)));
    }
    Ok(dev)
}

/// Ranks and metrics recomputed from raw scores by definition.
pub fn metric_oracle(scores: &[f64], ids: &[usize], positive: usize, k: usize) -> (usize, [f64; 4]) {
    let p = ids.iter().position(|&c| c == positive).expect("positive present");
    let sp = scores[p];
    let better = (0..ids.len())
        .filter(|&j| scores[j] > sp || (scores[j] == sp && ids[j] < positive))
        .count();
    let rank = better + 1;
    if rank > k {
        return (rank, [0.0; 4]);
    }
    let r = rank as f64;
    (rank, [1.0 / k as f64, 1.0, 1.0 / (r + 1.0).log2(), 1.0 / r])
}

/// Number of (list set, K) combinations where the library disagrees with the oracle.
pub fn metric_oracle_mismatches(lists: usize, seed: u64) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ranked: Vec<RankedList> = Vec::with_capacity(lists);
    let mut raw = Vec::with_capacity(lists);
    for u in 0..lists {
        let mut ids: Vec<usize> = (0..200).collect();
        ids.shuffle(&mut rng);
        ids.truncate(101);
        // Coarse scores so ties occur.
        let scores: Vec<f64> = (0..101).map(|_| rng.random_range(0..40) as f64 / 8.0).collect();
        let positive = ids[rng.random_range(0..101)];
        ranked.push(rank_candidates(u, positive, &ids, &scores)?);
        raw.push((scores, ids, positive));
    }
    let mut bad = 0;
    for k in 1..=MAX_K {
        let m = metrics_at_k(&ranked, k)?;
        let mut sums = [0.0f64; 4];
        for (l, (scores, ids, positive)) in ranked.iter().zip(&raw) {
            let (rank, vals) = metric_oracle(scores, ids, *positive, k);
            if rank != l.rank {
                bad += 1;
            }
            for (s, v) in sums.iter_mut().zip(vals) {
                *s += v;
            }
        }
        let n = lists as f64;
        let oracle = [sums[0] / n, sums[1] / n, sums[2] / n, sums[3] / n];
        if oracle != [m.precision, m.hr, m.ndcg, m.map] {
            bad += 1;
        }
    }
    Ok(bad)
}

/// Dense per-recipe and batched set encoders agree on the toy graph.
fn batched_set_deviation() -> Result<f64> {
    let g = toy_graph();
    let model = RecipeRec::new(&g, &toy_config())?;
    let st = model.set_transformer().expect("toy config uses the set branch");
    let mut tape = Tape::new();
    let pv = model.store().bind(&mut tape);
    let h0 = model.encoder().project_inputs(&mut tape, &pv, &g)?;
    let ing = h0[NodeType::Ingredient.index()];
    let sets = g
        .adjacency()
        .slot(Slot::new(NodeType::Recipe, RelationType::RecipeIngredient));
    let batched = st.encode_recipes(&mut tape, &pv, ing, sets)?;
    let batched = tape.value(batched).clone();
    let mut dev = 0.0f64;
    for r in 0..sets.nodes() {
        let members: Vec<usize> = sets.neighbors(r).into_iter().map(|p| p.0).collect();
        if members.is_empty() {
            continue;
        }
        let x = tape.gather_rows(ing, members)?;
        let y = st.encode_set(&mut tape, &pv, x)?;
        for (a, b) in tape.value(y).data().iter().zip(batched.row(r)) {
            dev = dev.max((a - b).abs());
        }
    }
    Ok(dev)
}

/// Runs every check.
pub fn run() -> SelfCheckReport {
    let start = Instant::now();
    let mut checks = op_gradient_checks(17);
    checks.push(outcome(
        "grad/joint_loss",
        grad_outcome(joint_loss_gradients(&toy_config())),
    ));
    checks.push(outcome(
        "attention/row_sums",
        attention_row_deviation(20, 5).map(|(a, b)| {
            (
                a <= SUM_TOL && b <= SUM_TOL,
                format!("alpha dev {a:.2e}, beta dev {b:.2e} (tol {SUM_TOL:.0e})"),
            )
        }),
    ));
    checks.push(outcome(
        "settf/permutation_invariance",
        set_permutation_deviation(50, 9).map(|d| (d <= PERM_TOL, format!("max diff {d:.2e} (tol {PERM_TOL:.0e})"))),
    ));
    checks.push(outcome(
        "settf/batched_matches_dense",
        batched_set_deviation().map(|d| (d <= 1e-12, format!("max diff {d:.2e}"))),
    ));
    checks.push(outcome(
        "metrics/oracle",
        metric_oracle_mismatches(200, 13).map(|b| (b == 0, format!("{b} mismatches over K=1..10"))),
    ));
    SelfCheckReport {
        checks,
        seconds: start.elapsed().as_secs_f64(),
    }
}
