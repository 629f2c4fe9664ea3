//! Independent oracles shared by the integration tests and the acceptance
//! binary. Nothing here calls the metric or propagation code it checks.

#![allow(dead_code)]
// the oracles index on purpose
#![allow(clippy::needless_range_loop)]

use std::cell::RefCell;
use std::io::{self, Read, Seek, SeekFrom};
use std::rc::Rc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use srcr_core::dataset::{label_section_range, ocmf_bytes, read_ocmf_from, FeatureSet, ModalFeatures};
use srcr_core::eval::{self, MetricReport};
use srcr_core::hsl::{self, Activation, HslConfig, HslModel, Structure};
use srcr_core::hypergraph::{knn, EdgeFamilies, EdgeTag, GraphPropagator, Hyperedge, Hypergraph};
use srcr_core::pipeline::train_from_ocmf;
use srcr_core::rce::{RceConfig, RceModel};
use srcr_core::{Graph, PipelineConfig, RowOperator, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
    Tensor::uniform(rows, cols, 1.0, &mut rng(seed))
}

// ---------------------------------------------------------------- gradients

pub const GRAD_TOL: f64 = 1e-4;
const STEP: f64 = 1e-6;

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den = a.iter().map(|x| x * x).sum::<f64>().sqrt() + b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Worst relative error between backprop and central differences over all
/// inputs of `f`.
pub fn op_gradient_error(inputs: &[Tensor], f: &dyn Fn(&Graph, &[Var]) -> Var) -> f64 {
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t)).collect();
    let out = f(&g, &vars);
    let grads = g.backward(out).expect("scalar loss");
    let eval = |ins: &[Tensor]| {
        let g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&g, &vars);
        g.scalar(out)
    };
    let mut worst: f64 = 0.0;
    for (k, t) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[k])
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; t.len()]);
        let mut numeric = vec![0.0; t.len()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= STEP;
            *slot = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
        }
        assert!(
            numeric.iter().any(|x| x.abs() > 1e-8),
            "input {k} has no gradient to check"
        );
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

/// Same check for a model loss: `absorb` collects the analytic gradient into
/// each parameter, `loss` re-evaluates the loss after a perturbation.
pub fn model_gradient_error<M: Clone>(
    model: &M,
    params: fn(&M) -> Vec<&Tensor>,
    params_mut: fn(&mut M) -> Vec<&mut Tensor>,
    analytic: &dyn Fn(&mut M),
    loss: &dyn Fn(&M) -> f64,
) -> f64 {
    let mut with_grads = model.clone();
    analytic(&mut with_grads);
    let grads: Vec<Vec<f64>> = params(&with_grads)
        .into_iter()
        .map(|t| t.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();
    let mut worst: f64 = 0.0;
    let count = params(model).len();
    for (p, analytic) in grads.iter().enumerate().take(count) {
        let len = params(model)[p].len();
        let mut numeric = vec![0.0; len];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let mut plus = model.clone();
            params_mut(&mut plus)[p].data_mut()[i] += STEP;
            let mut minus = model.clone();
            params_mut(&mut minus)[p].data_mut()[i] -= STEP;
            *slot = (loss(&plus) - loss(&minus)) / (2.0 * STEP);
        }
        worst = worst.max(rel_err(analytic, &numeric));
    }
    worst
}

pub fn tiny_rce(alpha: f64, seed: u64) -> (RceModel, ModalFeatures) {
    let cfg = RceConfig {
        unified_dim: 3,
        hidden: 5,
        alpha,
        ..RceConfig::new(4)
    };
    let mut model = RceModel::new(cfg, 2, seed).unwrap();
    // Break the shared initial draw so the two branches differ.
    let mut r = rng(seed + 100);
    for t in model.params_mut() {
        for x in t.data_mut() {
            *x += r.random_range(-0.2..0.2);
        }
    }
    let blocks = vec![random(2, 4, seed + 1), random(2, 4, seed + 2)];
    let features = ModalFeatures::from_tensors(&blocks, vec!["a".into(), "b".into()]).unwrap();
    (model, features)
}

/// Gradient error of the residual-center objective at trade-off `alpha`
/// (`1` isolates the center term, `0` the cross term).
pub fn rce_gradient_error(alpha: f64, seed: u64) -> f64 {
    let (model, features) = tiny_rce(alpha, seed);
    let f2 = features.clone();
    model_gradient_error(
        &model,
        |m| m.params().collect(),
        |m| m.params_mut().collect(),
        &move |m: &mut RceModel| {
            let g = Graph::new();
            let vars = m.bind(&g, true);
            let fwd = m.forward(&g, &vars, &f2).unwrap();
            let loss = m.objective(&g, &vars, &fwd).unwrap();
            let grads = g.backward(loss).unwrap();
            m.absorb(&grads, &vars).unwrap();
        },
        &|m: &RceModel| m.evaluate_loss(&features).unwrap().total,
    )
}

pub fn tiny_hsl(layers: usize, structure: hsl::StructureKind, seed: u64) -> (HslModel, Structure) {
    let cfg = HslConfig {
        knn_k: 1,
        tau: 0.75,
        n_anchors: 3,
        anchor_dim: 3,
        conv_layers: layers,
        families: EdgeFamilies::ALL,
        structure,
    };
    let structure = Structure::build(random(4, 4, seed), 2, 2, &cfg).unwrap();
    let model = HslModel::initialize(cfg, 4, seed + 1).unwrap();
    (model, structure)
}

pub fn hsl_gradient_error(layers: usize, kind: hsl::StructureKind, seed: u64) -> f64 {
    let (model, structure) = tiny_hsl(layers, kind, seed);
    let s2 = structure.clone();
    model_gradient_error(
        &model,
        |m| m.params().collect(),
        |m| m.params_mut().collect(),
        &move |m: &mut HslModel| {
            let g = Graph::new();
            let vars = m.bind(&g, true);
            let fwd = m.forward(&g, &vars, &s2).unwrap();
            let loss = hsl::loss_mr(&g, fwd.smoothed, fwd.aligned).unwrap();
            let grads = g.backward(loss).unwrap();
            m.absorb(&grads, &vars).unwrap();
        },
        &|m: &HslModel| m.loss(&structure).unwrap(),
    )
}

fn small_hypergraph_operator(seed: u64) -> Rc<dyn RowOperator> {
    let h = Hypergraph::build(random(6, 3, seed), 2, 3, 2, EdgeFamilies::ALL).unwrap();
    Rc::new(h.propagator().unwrap())
}

/// `(name, worst relative error)` for every differentiable op and loss.
pub fn gradient_suite() -> Vec<(String, f64)> {
    let mut out: Vec<(String, f64)> = Vec::new();
    let mut push = |name: &str, e: f64| out.push((name.to_string(), e));
    let a = random(3, 4, 1);
    let b = random(4, 2, 2);
    let row = random(1, 4, 3);
    let same = random(3, 4, 4);
    let positive = random(3, 4, 5).map(|x| x.abs() + 0.5);
    let w = random(3, 4, 6);
    let weigh = |g: &Graph, x: Var| {
        let wv = g.constant(w.clone());
        g.sum(g.mul(x, wv).unwrap())
    };
    let w2 = random(3, 2, 7);
    push(
        "matmul",
        op_gradient_error(&[a.clone(), b.clone()], &|g, v| {
            let c = g.constant(w2.clone());
            g.sum(g.mul(g.matmul(v[0], v[1]).unwrap(), c).unwrap())
        }),
    );
    push(
        "add (row broadcast)",
        op_gradient_error(&[a.clone(), row.clone()], &|g, v| weigh(g, g.add(v[0], v[1]).unwrap())),
    );
    push(
        "sub",
        op_gradient_error(&[a.clone(), same.clone()], &|g, v| weigh(g, g.sub(v[0], v[1]).unwrap())),
    );
    push(
        "mul",
        op_gradient_error(&[a.clone(), same.clone()], &|g, v| weigh(g, g.mul(v[0], v[1]).unwrap())),
    );
    push(
        "scale",
        op_gradient_error(std::slice::from_ref(&a), &|g, v| weigh(g, g.scale(v[0], -2.5))),
    );
    push(
        "relu",
        op_gradient_error(std::slice::from_ref(&a), &|g, v| weigh(g, g.relu(v[0]))),
    );
    push(
        "exp",
        op_gradient_error(std::slice::from_ref(&a), &|g, v| weigh(g, g.exp(v[0]))),
    );
    push(
        "log",
        op_gradient_error(&[positive], &|g, v| weigh(g, g.log(v[0]).unwrap())),
    );
    push(
        "softmax_rows",
        op_gradient_error(std::slice::from_ref(&a), &|g, v| weigh(g, g.softmax_rows(v[0]))),
    );
    let wn = random(3, 1, 8);
    push(
        "l2norm_rows",
        op_gradient_error(std::slice::from_ref(&a), &|g, v| {
            let c = g.constant(wn.clone());
            g.sum(g.mul(g.l2norm_rows(v[0]), c).unwrap())
        }),
    );
    push(
        "mean",
        op_gradient_error(std::slice::from_ref(&a), &|g, v| g.mean(g.mul(v[0], v[0]).unwrap())),
    );
    let wd = random(3, 5, 9);
    push(
        "sq_dist",
        op_gradient_error(&[a.clone(), random(5, 4, 10)], &|g, v| {
            let c = g.constant(wd.clone());
            g.sum(g.mul(g.sq_dist(v[0], v[1]).unwrap(), c).unwrap())
        }),
    );
    let x6 = random(6, 3, 11);
    let w6 = random(6, 3, 12);
    let op = small_hypergraph_operator(13);
    push(
        "hypergraph propagation",
        op_gradient_error(std::slice::from_ref(&x6), &|g, v| {
            let c = g.constant(w6.clone());
            g.sum(g.mul(g.apply_operator(v[0], Rc::clone(&op)).unwrap(), c).unwrap())
        }),
    );
    let gcn: Rc<dyn RowOperator> = Rc::new(GraphPropagator::knn_graph(&random(6, 3, 14), 2).unwrap());
    push(
        "graph propagation",
        op_gradient_error(std::slice::from_ref(&x6), &|g, v| {
            let c = g.constant(w6.clone());
            g.sum(g.mul(g.apply_operator(v[0], Rc::clone(&gcn)).unwrap(), c).unwrap())
        }),
    );
    let op2 = small_hypergraph_operator(15);
    let w64 = random(6, 2, 16);
    // mixed-sign columns so the relu passes some entries and blocks others
    let theta = Tensor::from_rows(&[[1.0, -1.0], [0.5, 0.5], [-0.3, 1.0]]);
    for (name, act) in [
        ("hypergraph conv (relu)", Activation::Relu),
        ("hypergraph conv (identity)", Activation::Identity),
    ] {
        push(
            name,
            op_gradient_error(&[x6.clone(), theta.clone()], &|g, v| {
                let c = g.constant(w64.clone());
                let y = hsl::hypergraph_conv(g, Some(&op2), v[1], act, v[0]).unwrap();
                g.sum(g.mul(y, c).unwrap())
            }),
        );
    }
    let ws = random(4, 3, 18);
    push(
        "memory scores",
        op_gradient_error(&[random(3, 2, 19), random(4, 2, 20)], &|g, v| {
            let c = g.constant(ws.clone());
            g.sum(g.mul(hsl::memory_scores(g, v[0], v[1]).unwrap(), c).unwrap())
        }),
    );
    let wr = random(4, 2, 21);
    push(
        "memory rebuild",
        op_gradient_error(&[random(4, 3, 22), random(3, 2, 23)], &|g, v| {
            let c = g.constant(wr.clone());
            g.sum(g.mul(hsl::memory_rebuild(g, v[0], v[1]).unwrap(), c).unwrap())
        }),
    );
    push(
        "L_mr (inputs)",
        op_gradient_error(&[random(4, 3, 24), random(4, 3, 25)], &|g, v| {
            hsl::loss_mr(g, v[0], v[1]).unwrap()
        }),
    );
    push(
        "L_mr (anchors through rebuild)",
        op_gradient_error(&[random(3, 2, 26), random(4, 2, 27)], &|g, v| {
            let s = hsl::memory_scores(g, v[0], v[1]).unwrap();
            let z = hsl::memory_rebuild(g, s, v[0]).unwrap();
            hsl::loss_mr(g, v[1], z).unwrap()
        }),
    );
    push("L_rc", rce_gradient_error(1.0, 30));
    push("L_cr", rce_gradient_error(0.0, 31));
    push("L_RCE", rce_gradient_error(0.5, 32));
    push(
        "L_mr (model, hypergraph)",
        hsl_gradient_error(1, hsl::StructureKind::Hypergraph, 33),
    );
    push(
        "L_mr (model, two layers)",
        hsl_gradient_error(2, hsl::StructureKind::Hypergraph, 34),
    );
    push(
        "L_mr (model, graph)",
        hsl_gradient_error(1, hsl::StructureKind::Gcn, 35),
    );
    push(
        "L_mr (model, no structure)",
        hsl_gradient_error(1, hsl::StructureKind::Mlp, 36),
    );
    out
}

// ------------------------------------------------------------------ metrics

pub fn oracle_cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for i in 0..a.len() {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if na == 0.0 || nb == 0.0 {
        f64::NEG_INFINITY
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

/// Selection-sort ranking: repeatedly take the best remaining target.
pub fn oracle_rank(q: &[f64], targets: &Tensor) -> Vec<usize> {
    let sims: Vec<f64> = (0..targets.rows()).map(|j| oracle_cosine(q, targets.row(j))).collect();
    let mut left: Vec<usize> = (0..targets.rows()).collect();
    let mut order = Vec::new();
    while !left.is_empty() {
        let mut best = 0;
        for p in 1..left.len() {
            let (cand, cur) = (left[p], left[best]);
            if sims[cand] > sims[cur] || (sims[cand] == sims[cur] && cand < cur) {
                best = p;
            }
        }
        order.push(left.remove(best));
    }
    order
}

pub fn oracle_ap(rel: &[bool]) -> f64 {
    let total = rel.iter().filter(|&&r| r).count() as f64;
    let mut sum = 0.0;
    for k in 1..=rel.len() {
        if rel[k - 1] {
            let precision_at_k = rel[..k].iter().filter(|&&r| r).count() as f64 / k as f64;
            sum += precision_at_k;
        }
    }
    sum / total
}

pub fn oracle_ndcg(rel: &[bool]) -> f64 {
    let gain = |r: &[bool]| -> f64 {
        r.iter()
            .enumerate()
            .map(|(i, &x)| if x { 1.0 / ((i + 2) as f64).log2() } else { 0.0 })
            .sum()
    };
    let mut ideal = rel.to_vec();
    ideal.sort_by(|a, b| b.cmp(a));
    gain(rel) / gain(&ideal)
}

pub fn oracle_anmrr(rels: &[Vec<bool>]) -> f64 {
    let ng: Vec<f64> = rels.iter().map(|r| r.iter().filter(|&&x| x).count() as f64).collect();
    let gtm = ng.iter().cloned().fold(0.0, f64::max);
    let mut total = 0.0;
    for (r, &n) in rels.iter().zip(&ng) {
        let k = (4.0 * n).min(2.0 * gtm);
        let mut avr = 0.0;
        for (i, &x) in r.iter().enumerate() {
            if x {
                let rank = (i + 1) as f64;
                avr += if rank > k { 1.25 * k } else { rank };
            }
        }
        avr /= n;
        let mrr = avr - 0.5 * (1.0 + n);
        total += mrr / (1.25 * k - 0.5 * (1.0 + n));
    }
    total / rels.len() as f64
}

/// Precision at recall level `level`: best precision over all cutoffs whose
/// recall reaches it.
pub fn oracle_pr(rels: &[Vec<bool>], n_points: usize) -> Vec<(f64, f64)> {
    (0..n_points)
        .map(|j| {
            let level = j as f64 / (n_points - 1) as f64;
            let mean = rels
                .iter()
                .map(|r| {
                    let total = r.iter().filter(|&&x| x).count() as f64;
                    let mut best: f64 = 0.0;
                    for k in 1..=r.len() {
                        let hits = r[..k].iter().filter(|&&x| x).count() as f64;
                        if hits / total >= level - 1e-12 {
                            best = best.max(hits / k as f64);
                        }
                    }
                    best
                })
                .sum::<f64>()
                / rels.len() as f64;
            (level, mean)
        })
        .collect()
}

pub fn oracle_risk(q: &Tensor, ql: &[u32], t: &Tensor, tl: &[u32]) -> f64 {
    let unit = |r: &[f64]| -> Vec<f64> {
        let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n == 0.0 {
            vec![0.0; r.len()]
        } else {
            r.iter().map(|x| x / n).collect()
        }
    };
    let mut total = 0.0;
    for i in 0..q.rows() {
        for j in 0..t.rows() {
            let (a, b) = (unit(q.row(i)), unit(t.row(j)));
            let d: f64 = (0..a.len()).map(|c| (a[c] - b[c]).powi(2)).sum();
            total += if ql[i] != tl[j] { (-d).exp() } else { 1.0 - (-d).exp() };
        }
    }
    total / (q.rows() * t.rows()) as f64
}

pub struct Instance {
    pub queries: Tensor,
    pub query_labels: Vec<u32>,
    pub targets: Tensor,
    pub target_labels: Vec<u32>,
}

/// Up to 10 queries and 20 targets; coarse integer coordinates make exact
/// similarity ties and an occasional zero vector likely.
pub fn random_instance(seed: u64) -> Instance {
    let mut r = rng(seed);
    let nq = r.random_range(1..=10);
    let nt = r.random_range(2..=20);
    let d = r.random_range(1..=4);
    let y = r.random_range(1..=4u32);
    let mut draw = |n: usize| Tensor::new(n, d, (0..n * d).map(|_| r.random_range(-2..=2) as f64).collect()).unwrap();
    let queries = draw(nq);
    let targets = draw(nt);
    let mut r = rng(seed ^ 0xabc);
    let mut target_labels: Vec<u32> = (0..nt).map(|_| r.random_range(0..y)).collect();
    let query_labels: Vec<u32> = (0..nq).map(|_| r.random_range(0..y)).collect();
    // at least one query must have a relevant target
    target_labels[0] = query_labels[0];
    Instance {
        queries,
        query_labels,
        targets,
        target_labels,
    }
}

fn close(name: &str, seed: u64, a: f64, b: f64) -> Result<(), String> {
    if (a - b).abs() <= 1e-12 {
        Ok(())
    } else {
        Err(format!("instance {seed}: {name} {a} vs oracle {b}"))
    }
}

/// Compares every metric against the oracles on `count` random instances.
pub fn metric_suite(count: u64) -> Result<(), String> {
    for seed in 0..count {
        let inst = random_instance(seed);
        let rr = eval::rank(&inst.queries, &inst.query_labels, &inst.targets, &inst.target_labels)
            .map_err(|e| e.to_string())?;
        let mut rels = Vec::new();
        for (qi, order) in rr.order.iter().enumerate() {
            let expected = oracle_rank(inst.queries.row(qi), &inst.targets);
            if *order != expected {
                return Err(format!("instance {seed}: ranking of query {qi} differs"));
            }
            let rel: Vec<bool> = expected
                .iter()
                .map(|&j| inst.target_labels[j] == inst.query_labels[qi])
                .collect();
            if rel.iter().any(|&x| x) {
                rels.push(rel);
            }
        }
        let report = MetricReport::from_ranking(&rr, 11).map_err(|e| e.to_string())?;
        let map = rels.iter().map(|r| oracle_ap(r)).sum::<f64>() / rels.len() as f64;
        let ndcg = rels.iter().map(|r| oracle_ndcg(r)).sum::<f64>() / rels.len() as f64;
        close("mAP", seed, report.map, map)?;
        close("NDCG", seed, report.ndcg, ndcg)?;
        close("ANMRR", seed, report.anmrr, oracle_anmrr(&rels))?;
        for ((r1, p1), (r2, p2)) in report.pr_curve.iter().zip(oracle_pr(&rels, 11)) {
            close("PR recall", seed, *r1, r2)?;
            close("PR precision", seed, *p1, p2)?;
        }
        let risk = eval::empirical_risk(&inst.queries, &inst.query_labels, &inst.targets, &inst.target_labels)
            .map_err(|e| e.to_string())?;
        close(
            "risk",
            seed,
            risk,
            oracle_risk(&inst.queries, &inst.query_labels, &inst.targets, &inst.target_labels),
        )?;
    }
    Ok(())
}

// --------------------------------------------------------------- hypergraph

pub fn oracle_knn(v: &Tensor, k: usize) -> Vec<Vec<usize>> {
    let n = v.rows();
    let dist = |i: usize, j: usize| -> f64 { (0..v.cols()).map(|c| (v.get(i, c) - v.get(j, c)).powi(2)).sum() };
    (0..n)
        .map(|i| {
            let mut all: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            // stable sort on distance keeps the lower index first among ties
            all.sort_by(|&a, &b| dist(i, a).partial_cmp(&dist(i, b)).unwrap());
            all.truncate(k);
            all
        })
        .collect()
}

/// `D_v^{-1/2} H W D_e^{-1} H^T D_v^{-1/2}` as an explicit dense chain.
pub fn dense_propagation(n_vertices: usize, edges: &[Vec<usize>]) -> DMatrix<f64> {
    let e = edges.len();
    let mut h = DMatrix::<f64>::zeros(n_vertices, e);
    for (j, members) in edges.iter().enumerate() {
        for &v in members {
            h[(v, j)] = 1.0;
        }
    }
    let w = DMatrix::<f64>::identity(e, e);
    let dv = &h * &w * DMatrix::<f64>::from_element(e, 1, 1.0);
    let de = h.transpose() * DMatrix::<f64>::from_element(n_vertices, 1, 1.0);
    let dv_inv_sqrt = DMatrix::from_diagonal(&dv.column(0).map(|d| 1.0 / d.sqrt()));
    let de_inv = DMatrix::from_diagonal(&de.column(0).map(|d| 1.0 / d));
    &dv_inv_sqrt * &h * &w * &de_inv * h.transpose() * &dv_inv_sqrt
}

pub fn to_dmatrix(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

pub fn conv_through_api(h: &Hypergraph, x: &Tensor, theta: &Tensor, act: Activation) -> Tensor {
    let op: Rc<dyn RowOperator> = Rc::new(h.propagator().unwrap());
    let g = Graph::new();
    let (xv, tv) = (g.constant(x.clone()), g.constant(theta.clone()));
    g.value(hsl::hypergraph_conv(&g, Some(&op), tv, act, xv).unwrap())
}

pub fn random_edges(n: usize, count: usize, seed: u64) -> Vec<Hyperedge> {
    let mut r = rng(seed);
    let mut edges: Vec<Hyperedge> = (0..count)
        .map(|_| {
            let size = r.random_range(1..=n);
            let mut members: Vec<usize> = (0..n).collect();
            for i in 0..n {
                let j = r.random_range(i..n);
                members.swap(i, j);
            }
            members.truncate(size);
            Hyperedge {
                tag: EdgeTag::Knn,
                members,
            }
        })
        .collect();
    // every vertex in at least one edge
    for v in 0..n {
        edges.push(Hyperedge {
            tag: EdgeTag::Knn,
            members: vec![v],
        });
    }
    edges
}

/// Returns one line of detail per check, or the first failure.
pub fn hypergraph_suite() -> Result<Vec<String>, String> {
    let mut notes = Vec::new();
    // edge-count formula
    for (m, n, k) in [(2, 3, 1), (3, 7, 4), (3, 20, 10), (1, 5, 2)] {
        let h = Hypergraph::build(random(m * n, 4, (m * n) as u64), m, n, k, EdgeFamilies::ALL)
            .map_err(|e| e.to_string())?;
        if h.edges().len() != m + n + m * n {
            return Err(format!("M={m} N={n}: {} edges", h.edges().len()));
        }
        for e in h.edges() {
            let expected = match e.tag {
                EdgeTag::Modality => n,
                EdgeTag::Object => m,
                EdgeTag::Knn => k + 1,
            };
            if e.members.len() != expected {
                return Err(format!("{:?} edge with {} members", e.tag, e.members.len()));
            }
        }
    }
    notes.push("edge count M + N + M*N and column sums hold".to_string());

    // dense chain oracle on a 6-vertex random hypergraph
    let edges = random_edges(6, 4, 40);
    let x = random(6, 3, 41);
    let theta = random(3, 2, 42);
    let h = Hypergraph::from_edges(x.clone(), 1, 6, edges.clone());
    let members: Vec<Vec<usize>> = edges.iter().map(|e| e.members.clone()).collect();
    let p = dense_propagation(6, &members);
    let expected = (&p * to_dmatrix(&x) * to_dmatrix(&theta)).map(|v| v.max(0.0));
    let got = to_dmatrix(&conv_through_api(&h, &x, &theta, Activation::Relu));
    let err = (&got - &expected).abs().max();
    if err > 1e-12 {
        return Err(format!("dense chain mismatch {err:e}"));
    }
    notes.push(format!("dense chain oracle max error {err:.1e}"));

    // permutation equivariance
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let n = 9;
        let x = random(n, 4, 100 + seed);
        let theta = random(4, 3, 200 + seed);
        let edges = random_edges(n, 6, 300 + seed);
        let mut perm: Vec<usize> = (0..n).collect();
        let mut r = rng(400 + seed);
        for i in 0..n {
            let j = r.random_range(i..n);
            perm.swap(i, j);
        }
        // new row a holds old row perm[a]
        let mut inverse = vec![0; n];
        for (a, &b) in perm.iter().enumerate() {
            inverse[b] = a;
        }
        let permuted_edges: Vec<Hyperedge> = edges
            .iter()
            .map(|e| Hyperedge {
                tag: e.tag,
                members: e.members.iter().map(|&v| inverse[v]).collect(),
            })
            .collect();
        let base = conv_through_api(
            &Hypergraph::from_edges(x.clone(), 1, n, edges),
            &x,
            &theta,
            Activation::Relu,
        );
        let px = x.select_rows(&perm);
        let moved = conv_through_api(
            &Hypergraph::from_edges(px.clone(), 1, n, permuted_edges),
            &px,
            &theta,
            Activation::Relu,
        );
        worst = worst.max(moved.max_abs_diff(&base.select_rows(&perm)));
    }
    if worst > 1e-10 {
        return Err(format!("permutation equivariance error {worst:e}"));
    }
    notes.push(format!("permutation equivariance max error {worst:.1e}"));

    // size-1 self-edges reduce to sigma(X Theta)
    let x = random(5, 3, 50);
    let theta = random(3, 4, 51);
    let selfs: Vec<Hyperedge> = (0..5)
        .map(|v| Hyperedge {
            tag: EdgeTag::Knn,
            members: vec![v],
        })
        .collect();
    let got = conv_through_api(
        &Hypergraph::from_edges(x.clone(), 1, 5, selfs),
        &x,
        &theta,
        Activation::Relu,
    );
    let expected = (to_dmatrix(&x) * to_dmatrix(&theta)).map(|v| v.max(0.0));
    let err = (to_dmatrix(&got) - expected).abs().max();
    if err > 1e-15 {
        return Err(format!("self-edge case error {err:e}"));
    }
    notes.push("self-edge hypergraph equals sigma(X Theta)".to_string());

    // KNN against all pairs, including a duplicated row
    for seed in 0..20u64 {
        let mut v = random(8, 3, 60 + seed);
        if seed % 2 == 0 {
            let dup = v.row(1).to_vec();
            for (c, x) in dup.into_iter().enumerate() {
                v.set(5, c, x);
            }
        }
        for k in [1, 3, 7] {
            let got = knn(&v, k).map_err(|e| e.to_string())?;
            if got != oracle_knn(&v, k) {
                return Err(format!("knn mismatch seed {seed} k {k}"));
            }
        }
    }
    notes.push("KNN matches all-pairs oracle".to_string());
    Ok(notes)
}

// ---------------------------------------------------------- self-supervision

/// Records the byte range of every successful read.
pub struct RecordingReader<R> {
    inner: R,
    pos: u64,
    pub reads: Rc<RefCell<Vec<(u64, u64)>>>,
}

impl<R> RecordingReader<R> {
    pub fn new(inner: R) -> Self {
        Self {
            inner,
            pos: 0,
            reads: Rc::default(),
        }
    }
}

impl<R: Read> Read for RecordingReader<R> {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        let k = self.inner.read(buf)?;
        if k > 0 {
            self.reads.borrow_mut().push((self.pos, self.pos + k as u64));
        }
        self.pos += k as u64;
        Ok(k)
    }
}

impl<R: Seek> Seek for RecordingReader<R> {
    fn seek(&mut self, to: SeekFrom) -> io::Result<u64> {
        self.pos = self.inner.seek(to)?;
        Ok(self.pos)
    }
}

pub fn overlapping_bytes(reads: &[(u64, u64)], range: (u64, u64)) -> u64 {
    reads
        .iter()
        .map(|&(a, b)| b.min(range.1).saturating_sub(a.max(range.0)))
        .sum()
}

/// Trains from an instrumented OCMF stream. Returns the number of label
/// bytes the trainer read and, as a control, the number a full parse of the
/// same stream reads.
pub fn label_bytes_read_by_train(cfg: &PipelineConfig, fs: &FeatureSet, indices: Option<&[usize]>) -> (u64, u64) {
    let bytes = ocmf_bytes(fs);
    let range = label_section_range(fs.n_objects(), fs.n_modalities(), fs.feature_dim(), fs.labels.is_some())
        .expect("labelled set");
    let reader = RecordingReader::new(io::Cursor::new(bytes.clone()));
    let reads = Rc::clone(&reader.reads);
    train_from_ocmf(cfg, reader, indices).expect("training");
    let during_train = overlapping_bytes(&reads.borrow(), range);

    let control = RecordingReader::new(io::Cursor::new(bytes));
    let control_reads = Rc::clone(&control.reads);
    read_ocmf_from(control).expect("full parse");
    let during_parse = overlapping_bytes(&control_reads.borrow(), range);
    (during_train, during_parse)
}
