//! Differentiation correctness on randomly composed graphs: every analytic
//! gradient is checked against central finite differences.

use eaglepc_core::graph::{Graph, NodeId, ParamMap};
use eaglepc_core::rng::SeededRng;
use eaglepc_core::tensor::Tensor;

struct RandomGraph {
    graph: Graph,
    params: ParamMap,
}

/// Compose a random differentiable graph over a handful of small parameters.
fn random_graph(seed: u64) -> RandomGraph {
    let mut rng = SeededRng::new(seed).derive("random-graph");
    let mut g = Graph::new();
    let mut params = ParamMap::new();

    // A few parameter leaves with assorted small shapes.
    let shapes: &[&[usize]] = &[&[2, 3], &[3, 2], &[3], &[2, 2]];
    let mut nodes: Vec<NodeId> = Vec::new();
    for (i, dims) in shapes.iter().enumerate() {
        let name = format!("p{i}");
        params.insert(name.clone(), Tensor::randn(dims, 0.8, &mut rng));
        nodes.push(g.param(&name, dims).unwrap());
    }
    nodes.push(g.constant(Tensor::randn(&[2, 3], 0.8, &mut rng)));

    let dims_of = |g: &Graph, id: NodeId| g.dims_of(id).to_vec();
    let n_ops = 6 + rng.index(8);
    for _ in 0..n_ops {
        let pick = nodes[rng.index(nodes.len())];
        let d = dims_of(&g, pick);
        let choice = rng.index(10);
        let new = match choice {
            0 => {
                // Same-shape binary op with a random partner, if any.
                let partners: Vec<NodeId> = nodes
                    .iter()
                    .copied()
                    .filter(|&n| dims_of(&g, n) == d)
                    .collect();
                let other = partners[rng.index(partners.len())];
                match rng.index(3) {
                    0 => g.add(pick, other).unwrap(),
                    1 => g.sub(pick, other).unwrap(),
                    _ => g.mul(pick, other).unwrap(),
                }
            }
            1 => {
                // Matmul with any compatible right factor.
                if d.len() == 2 {
                    let partners: Vec<NodeId> = nodes
                        .iter()
                        .copied()
                        .filter(|&n| {
                            let nd = dims_of(&g, n);
                            nd.len() == 2 && nd[0] == d[1]
                        })
                        .collect();
                    if partners.is_empty() {
                        continue;
                    }
                    g.matmul(pick, partners[rng.index(partners.len())]).unwrap()
                } else {
                    continue;
                }
            }
            2 => g.gelu(pick),
            3 => g.tanh(pick),
            4 => g.sigmoid(pick),
            5 => {
                let s = g.scale(pick, 0.5 + rng.uniform());
                g.log_sigmoid(s)
            }
            6 => {
                if d.len() == 2 {
                    g.softmax_rows(pick).unwrap()
                } else {
                    continue;
                }
            }
            7 => {
                if d.len() == 2 {
                    g.log_softmax_rows(pick).unwrap()
                } else {
                    continue;
                }
            }
            8 => {
                if d.len() == 2 {
                    g.mean_rows(pick).unwrap()
                } else {
                    g.neg(pick)
                }
            }
            _ => {
                if d.len() == 2 && d[0] == d[1] {
                    g.causal_softmax_rows(pick).unwrap()
                } else {
                    g.scale(pick, -0.7)
                }
            }
        };
        nodes.push(new);
    }
    // Reduce whatever came last to a scalar root.
    let last = *nodes.last().unwrap();
    g.mean(last);
    RandomGraph { graph: g, params }
}

fn assert_close(analytic: f64, fd: f64, context: &str) {
    let tol = 1e-7f64.max(1e-4 * analytic.abs().max(fd.abs()));
    assert!(
        (analytic - fd).abs() <= tol,
        "{context}: analytic {analytic} vs finite-diff {fd}"
    );
}

#[test]
fn analytic_gradient_matches_finite_differences_on_100_random_graphs() {
    for seed in 0..100u64 {
        let RandomGraph { graph, params } = random_graph(seed);
        let grads = graph.gradient(&params).unwrap();
        let fd = graph.finite_diff_gradient(&params, 1e-5).unwrap();
        for (name, g) in &grads {
            for (i, (a, b)) in g.data().iter().zip(fd[name].data()).enumerate() {
                assert_close(*a, *b, &format!("seed {seed}, {name}[{i}]"));
            }
        }
    }
}

#[test]
fn softmax_rows_are_positive_and_sum_to_one() {
    let mut rng = SeededRng::new(5).derive("softmax");
    for _ in 0..200 {
        let t = Tensor::randn(&[4, 7], 3.0, &mut rng);
        let mut g = Graph::new();
        let c = g.constant(t);
        g.softmax_rows(c).unwrap();
        let p = g.evaluate(&ParamMap::new()).unwrap();
        for r in 0..4 {
            let row = p.row(r);
            assert!(row.iter().all(|&x| x > 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn gradient_is_bitwise_repeatable() {
    let RandomGraph { graph, params } = random_graph(1234);
    let a = graph.gradient(&params).unwrap();
    let b = graph.gradient(&params).unwrap();
    for (name, ga) in &a {
        for (x, y) in ga.data().iter().zip(b[name].data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}
