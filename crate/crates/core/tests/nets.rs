use grouptron::nets::{graph_tensors, group_pool, scene_select, GruCell, Linear, LstmCell, StgcnBlock};
use grouptron::stgraph::{complete_adjacency, normalize_adjacency, Level, STGraph};
use grouptron::tensor::{grad_check_params, ParameterStore, Tape, Tensor, Var};
use grouptron::{Error, Result};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn zeroed(store: &ParameterStore) -> ParameterStore {
    let mut z = store.clone();
    for (_, p) in z.iter_mut() {
        p.value = Tensor::zeros(p.value.shape().to_vec());
    }
    z
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
    }
}

fn all_pass(store: &ParameterStore, f: impl for<'t> Fn(&grouptron::tensor::Bound<'t>) -> Result<Var<'t>>) {
    let reports = grad_check_params(store, f, 1e-5, 1e-6, |_, _| true).unwrap();
    assert_eq!(reports.len(), store.len());
    for (path, r) in reports {
        assert!(r.passed, "{path}: {r:?}");
    }
}

#[test]
fn lstm_zero_weights_zero_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cell = LstmCell::new("node_lstm", 4, 32);
    let mut store = ParameterStore::new();
    cell.init(&mut store, &mut rng);
    let store = zeroed(&store);
    let tape = Tape::new();
    let p = store.bind(&tape);
    let h = cell.encode(&p, tape.constant(Tensor::zeros(vec![8, 1, 4]))).unwrap();
    assert_eq!(h.shape(), vec![1, 32]);
    assert!(h.value().data().iter().all(|v| *v == 0.0));
}

#[test]
fn lstm_single_step_matches_gate_equations() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cell = LstmCell::new("c", 2, 2);
    let mut store = ParameterStore::new();
    cell.init(&mut store, &mut rng);
    let x = [0.3, -0.7];
    let tape = Tape::new();
    let p = store.bind(&tape);
    let h = cell.encode(&p, tape.constant(t(&[1, 1, 2], &x))).unwrap().value();

    let w = store.get("c.w_ih").unwrap().value.clone();
    let b = store.get("c.b").unwrap().value.clone();
    // Zero initial state: the recurrent term vanishes and c = i * g.
    let pre = |k: usize| b.data()[k] + x[0] * w.at(&[0, k]) + x[1] * w.at(&[1, k]);
    let expected: Vec<f64> = (0..2)
        .map(|j| {
            let i = sigmoid(pre(j));
            let g = pre(4 + j).tanh();
            let o = sigmoid(pre(6 + j));
            o * (i * g).tanh()
        })
        .collect();
    assert_close(h.data(), &expected, 1e-14);
}

#[test]
fn lstm_rejects_wrong_input_dim() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cell = LstmCell::new("c", 2, 2);
    let mut store = ParameterStore::new();
    cell.init(&mut store, &mut rng);
    let tape = Tape::new();
    let p = store.bind(&tape);
    let r = cell.encode(&p, tape.constant(Tensor::zeros(vec![3, 1, 5])));
    assert!(matches!(r, Err(Error::Argument(_))));
}

#[test]
fn lstm_parameter_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cell = LstmCell::new("c", 3, 4);
    let mut store = ParameterStore::new();
    cell.init(&mut store, &mut rng);
    let seq = random(&[5, 2, 3], &mut rng);
    all_pass(&store, |p| cell.encode(p, p.get("c.b")?.tape().constant(seq.clone()))?.sum());
}

#[test]
fn edge_encode_conventions() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cell = LstmCell::new("edge_lstm", 4, 8);
    let mut store = ParameterStore::new();
    cell.init(&mut store, &mut rng);
    let tape = Tape::new();
    let p = store.bind(&tape);

    let empty = cell.edge_encode(&p, &[], [8, 1, 4]).unwrap().value();
    let zero = cell.encode(&p, tape.constant(Tensor::zeros(vec![8, 1, 4]))).unwrap().value();
    assert_eq!(empty, zero);

    let seqs: Vec<Tensor> = (0..3).map(|_| random(&[8, 1, 4], &mut rng)).collect();
    let vars: Vec<Var> = seqs.iter().map(|s| tape.constant(s.clone())).collect();
    let one = cell.edge_encode(&p, &vars[..1], [8, 1, 4]).unwrap().value();
    assert_eq!(one, cell.encode(&p, vars[0]).unwrap().value());

    let abc = cell.edge_encode(&p, &vars, [8, 1, 4]).unwrap().value();
    let cab = cell.edge_encode(&p, &[vars[2], vars[0], vars[1]], [8, 1, 4]).unwrap().value();
    let sum = |v: &[Var]| v.iter().map(|x| x.value().into_data()).reduce(|a, b| a.iter().zip(&b).map(|(x, y)| x + y).collect());
    // Addition is commutative but not associative in floating point; compare
    // against encodings of the two summation orders.
    let direct = cell.encode(&p, tape.constant(t(&[8, 1, 4], &sum(&vars).unwrap()))).unwrap().value();
    assert_eq!(abc, direct);
    assert_close(abc.data(), cab.data(), 1e-12);
}

#[test]
fn edge_encode_two_neighbors_swap_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cell = LstmCell::new("edge_lstm", 4, 8);
    let mut store = ParameterStore::new();
    cell.init(&mut store, &mut rng);
    let tape = Tape::new();
    let p = store.bind(&tape);
    let a = tape.constant(random(&[8, 1, 4], &mut rng));
    let b = tape.constant(random(&[8, 1, 4], &mut rng));
    let ab = cell.edge_encode(&p, &[a, b], [8, 1, 4]).unwrap().value();
    let ba = cell.edge_encode(&p, &[b, a], [8, 1, 4]).unwrap().value();
    assert_eq!(ab, ba);
}

#[test]
fn gru_zero_weights_halves_state() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cell = GruCell::new("decoder_gru", 5, 128);
    let mut store = ParameterStore::new();
    cell.init(&mut store, &mut rng);
    let store = zeroed(&store);
    let tape = Tape::new();
    let p = store.bind(&tape);
    let h = random(&[2, 128], &mut rng);
    let x = tape.constant(random(&[2, 5], &mut rng));
    let out = cell.step(&p, tape.constant(h.clone()), x).unwrap().value();
    let half: Vec<f64> = h.data().iter().map(|v| (1.0 - sigmoid(0.0)) * v).collect();
    assert_close(out.data(), &half, 1e-15);

    let zero = cell.step(&p, tape.constant(Tensor::zeros(vec![2, 128])), x).unwrap().value();
    assert!(zero.data().iter().all(|v| *v == 0.0));

    let bad = cell.step(&p, tape.constant(Tensor::zeros(vec![2, 64])), x);
    assert!(matches!(bad, Err(Error::Argument(_))));
}

#[test]
fn gru_parameter_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cell = GruCell::new("g", 3, 4);
    let mut store = ParameterStore::new();
    cell.init(&mut store, &mut rng);
    let h = random(&[2, 4], &mut rng);
    let x = random(&[2, 3], &mut rng);
    all_pass(&store, |p| {
        let tape = p.get("g.b_ih")?.tape();
        let h1 = cell.step(p, tape.constant(h.clone()), tape.constant(x.clone()))?;
        cell.step(p, h1, tape.constant(x.clone()))?.sum()
    });
}

#[test]
fn linear_parameter_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let lin = Linear::new("head", 3, 2);
    let mut store = ParameterStore::new();
    lin.init(&mut store, &mut rng);
    let x = random(&[4, 3], &mut rng);
    all_pass(&store, |p| lin.forward(p, p.get("head.w")?.tape().constant(x.clone()))?.tanh()?.sum());
}

fn graph(features: Vec<Vec<Vec<f64>>>, adjacency: Vec<Vec<Vec<f64>>>) -> STGraph {
    let n = features.len();
    STGraph {
        level: Level::Group,
        node_ids: (0..n as i64).collect(),
        features,
        adjacency,
    }
}

fn random_graph(n: usize, steps: usize, dim: usize, rng: &mut ChaCha8Rng) -> STGraph {
    let features = (0..n)
        .map(|_| (0..steps).map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect())
        .collect();
    let adjacency = (0..steps)
        .map(|_| {
            let mut a = vec![vec![0.0; n]; n];
            for i in 0..n {
                for j in (i + 1)..n {
                    if rng.gen_bool(0.6) {
                        a[i][j] = 1.0;
                        a[j][i] = 1.0;
                    }
                }
            }
            a
        })
        .collect();
    graph(features, adjacency)
}

/// Straight-line evaluation of the graph convolution followed by the
/// width-3 temporal convolution.
fn stgcn_oracle(store: &ParameterStore, prefix: &str, g: &STGraph) -> Vec<Vec<Vec<f64>>> {
    let w = &store.get(&format!("{prefix}.w")).unwrap().value;
    let k = &store.get(&format!("{prefix}.kernel")).unwrap().value;
    let bias = &store.get(&format!("{prefix}.bias")).unwrap().value;
    let (cin, cout) = (w.shape()[0], w.shape()[1]);
    let (n, steps) = (g.num_nodes(), g.num_ticks());
    let mut spatial = vec![vec![vec![0.0; cout]; steps]; n];
    for tk in 0..steps {
        let a = normalize_adjacency(&g.adjacency[tk]);
        for i in 0..n {
            for o in 0..cout {
                let mut acc = 0.0;
                for j in 0..n {
                    for c in 0..cin {
                        acc += a[i][j] * g.features[j][tk][c] * w.at(&[c, o]);
                    }
                }
                spatial[i][tk][o] = acc.max(0.0);
            }
        }
    }
    let mut out = vec![vec![vec![0.0; cout]; steps]; n];
    for i in 0..n {
        for tk in 0..steps {
            for o in 0..cout {
                let mut acc = bias.data()[o];
                for j in 0..3 {
                    let s = tk as isize + j as isize - 1;
                    if s < 0 || s >= steps as isize {
                        continue;
                    }
                    for c in 0..cout {
                        acc += spatial[i][s as usize][c] * k.at(&[j, c, o]);
                    }
                }
                out[i][tk][o] = acc;
            }
        }
    }
    out
}

#[test]
fn stgcn_single_node_impulse_is_relu_projection() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let block = StgcnBlock::new("group_stgcn", 3, 3);
    let mut store = ParameterStore::new();
    block.init(&mut store, &mut rng);
    let mut kernel = Tensor::zeros(vec![3, 3, 3]);
    for c in 0..3 {
        kernel.data_mut()[9 + c * 3 + c] = 1.0;
    }
    store.get_mut("group_stgcn.kernel").unwrap().value = kernel;
    store.get_mut("group_stgcn.bias").unwrap().value = Tensor::zeros(vec![3]);
    let w = store.get("group_stgcn.w").unwrap().value.clone();

    let g = random_graph(1, 8, 3, &mut rng);
    let tape = Tape::new();
    let out = block.forward_graph(&store.bind(&tape), &g).unwrap().value();
    assert_eq!(out.shape(), &[8, 1, 3]);
    for tk in 0..8 {
        for o in 0..3 {
            let v: f64 = (0..3).map(|c| g.features[0][tk][c] * w.at(&[c, o])).sum();
            assert!((out.at(&[tk, 0, o]) - v.max(0.0)).abs() < 1e-14);
        }
    }
}

#[test]
fn stgcn_symmetric_nodes_get_equal_outputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let block = StgcnBlock::new("s", 4, 16);
    let mut store = ParameterStore::new();
    block.init(&mut store, &mut rng);
    let seq: Vec<Vec<f64>> = (0..8).map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let g = graph(vec![seq.clone(), seq], vec![complete_adjacency(2); 8]);
    let tape = Tape::new();
    let out = block.forward_graph(&store.bind(&tape), &g).unwrap();
    assert_eq!(out.slice(1, 0, 1).unwrap().value(), out.slice(1, 1, 2).unwrap().value());
}

#[test]
fn stgcn_matches_dense_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let block = StgcnBlock::new("s", 4, 5);
    let mut store = ParameterStore::new();
    block.init(&mut store, &mut rng);
    for _ in 0..5 {
        let g = random_graph(3, 8, 4, &mut rng);
        let tape = Tape::new();
        let out = block.forward_graph(&store.bind(&tape), &g).unwrap().value();
        let oracle = stgcn_oracle(&store, "s", &g);
        for i in 0..3 {
            for tk in 0..8 {
                for o in 0..5 {
                    assert!((out.at(&[tk, i, o]) - oracle[i][tk][o]).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn stgcn_rejects_dim_mismatch() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let block = StgcnBlock::new("s", 4, 5);
    let mut store = ParameterStore::new();
    block.init(&mut store, &mut rng);
    let g = random_graph(2, 8, 3, &mut rng);
    let tape = Tape::new();
    assert!(matches!(block.forward_graph(&store.bind(&tape), &g), Err(Error::Argument(_))));
}

#[test]
fn stgcn_parameter_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let block = StgcnBlock::new("s", 3, 4);
    let mut store = ParameterStore::new();
    block.init(&mut store, &mut rng);
    let g = random_graph(3, 6, 3, &mut rng);
    let (x, a) = graph_tensors(&g).unwrap();
    let weights = random(&[6, 3, 4], &mut rng);
    let r = grad_check_params(
        &store,
        |p| {
            let tape = p.get("s.w")?.tape();
            let y = block.forward(p, tape.constant(x.clone()), tape.constant(a.clone()))?;
            y.mul(tape.constant(weights.clone()))?.sum()
        },
        1e-5,
        1e-6,
        |_, _| true,
    )
    .unwrap();
    for (path, rep) in r {
        assert!(rep.passed, "{path}: {rep:?}");
    }
}

#[test]
fn group_pool_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let tape = Tape::new();
    let v = random(&[8, 1, 16], &mut rng);
    let single = group_pool(tape.constant(v.clone())).unwrap().value();
    assert_eq!(single.data(), v.data());

    let neg: Vec<f64> = v.data().iter().map(|x| -x).collect();
    let both = Var::concat(&[tape.constant(v.clone()), tape.constant(t(&[8, 1, 16], &neg))], 1).unwrap();
    assert!(group_pool(both).unwrap().value().data().iter().all(|x| *x == 0.0));

    let three = random(&[8, 3, 16], &mut rng);
    let mean = group_pool(tape.constant(three.clone())).unwrap().value();
    for tk in 0..8 {
        for c in 0..16 {
            let direct = (three.at(&[tk, 0, c]) + three.at(&[tk, 1, c]) + three.at(&[tk, 2, c])) / 3.0;
            assert!((mean.at(&[tk, c]) - direct).abs() < 1e-15);
        }
    }

    let empty = tape.constant(Tensor::zeros(vec![8, 0, 16]));
    assert!(matches!(group_pool(empty), Err(Error::Argument(_))));
}

#[test]
fn scene_select_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let tape = Tape::new();
    let sole = random(&[1, 1, 16], &mut rng);
    assert_eq!(scene_select(tape.constant(sole.clone()), 0).unwrap().value().data(), sole.data());

    let row = random(&[1, 2, 4], &mut rng);
    let constant = Var::concat(&vec![tape.constant(row.clone()); 8], 0).unwrap();
    let picked = scene_select(constant, 1).unwrap().value();
    assert_eq!(picked.data(), &row.data()[4..8]);

    let x = random(&[8, 3, 5], &mut rng);
    for g in 0..3 {
        let got = scene_select(tape.constant(x.clone()), g).unwrap().value();
        let want: Vec<f64> = (0..5).map(|c| x.at(&[7, g, c])).collect();
        assert_eq!(got.data(), &want[..]);
    }
    assert!(matches!(scene_select(tape.constant(x), 3), Err(Error::Argument(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn stgcn_is_permutation_equivariant(seed in any::<u64>(), n in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let block = StgcnBlock::new("s", 4, 6);
        let mut store = ParameterStore::new();
        block.init(&mut store, &mut rng);
        let g = random_graph(n, 8, 4, &mut rng);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let permuted = graph(
            perm.iter().map(|&i| g.features[i].clone()).collect(),
            g.adjacency
                .iter()
                .map(|a| perm.iter().map(|&i| perm.iter().map(|&j| a[i][j]).collect()).collect())
                .collect(),
        );
        let tape = Tape::new();
        let p = store.bind(&tape);
        let out = block.forward_graph(&p, &g).unwrap().value();
        let out_p = block.forward_graph(&p, &permuted).unwrap().value();
        for (new, &old) in perm.iter().enumerate() {
            for tk in 0..8 {
                for o in 0..6 {
                    prop_assert!((out_p.at(&[tk, new, o]) - out.at(&[tk, old, o])).abs() < 1e-12);
                }
            }
        }
    }
}
