use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Central differences of `f` at `x` with step 1e-5.
fn numeric_grad(x: &Tensor, f: &dyn Fn(&mut Graph, Var) -> Var) -> Vec<f64> {
    let h = 1e-5;
    (0..x.numel())
        .map(|i| {
            let eval = |delta: f64| {
                let mut t = x.clone();
                t.data_mut()[i] += delta;
                let mut g = Graph::new();
                let v = g.input(t);
                let out = f(&mut g, v);
                g.value(out).item()
            };
            (eval(h) - eval(-h)) / (2.0 * h)
        })
        .collect()
}

fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

fn check_input_grad(x: Tensor, f: &dyn Fn(&mut Graph, Var) -> Var) {
    let mut g = Graph::new();
    let v = g.input(x.clone());
    let out = f(&mut g, v);
    let grads = g.backward(out).unwrap();
    let analytic = grads.wrt(v).map(<[f64]>::to_vec).unwrap_or(vec![0.0; x.numel()]);
    let numeric = numeric_grad(&x, f);
    let err = relative_error(&analytic, &numeric);
    assert!(err < 1e-4, "relative gradient error {err}");
}

/// Weighted sum with fixed pseudo-random weights, so every output element
/// gets a distinct upstream gradient.
fn probe(g: &mut Graph, x: Var) -> Var {
    let shape = g.shape(x).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let w = g.constant(random_tensor(&mut rng, &shape));
    let m = g.mul(x, w).unwrap();
    g.sum(m)
}

#[test]
fn sum_gradient_is_all_ones() {
    let mut g = Graph::new();
    let w = g.input(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
    let s = g.sum(w);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.wrt(w).unwrap(), &[1.0, 1.0, 1.0]);
}

#[test]
fn square_gradient_is_twice_the_input() {
    let mut g = Graph::new();
    let w = g.input(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
    let sq = g.mul(w, w).unwrap();
    let s = g.sum(sq);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.wrt(w).unwrap(), &[2.0, -4.0, 1.0]);
}

#[test]
fn non_scalar_loss_is_a_shape_error() {
    let mut g = Graph::new();
    let w = g.input(Tensor::zeros(&[2, 2]));
    assert!(matches!(g.backward(w), Err(Error::Shape(_))));
}

#[test]
fn repeated_backward_accumulates_into_the_store() {
    let mut store = ParamStore::new(0);
    store.insert("w", Tensor::new(vec![2], vec![3.0, -1.0]).unwrap()).unwrap();
    let mut g = Graph::new();
    let w = g.param(&store, "w").unwrap();
    let sq = g.mul(w, w).unwrap();
    let s = g.sum(sq);
    for _ in 0..2 {
        g.backward(s).unwrap().accumulate_into(&mut store).unwrap();
    }
    assert_eq!(store.grad("w").unwrap(), &[12.0, -4.0]);
    store.zero_grads();
    assert_eq!(store.grad("w").unwrap(), &[0.0, 0.0]);
}

#[test]
fn matmul_and_bias_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let b = random_tensor(&mut rng, &[4, 3]);
    let bias = random_tensor(&mut rng, &[3]);
    check_input_grad(random_tensor(&mut rng, &[5, 4]), &|g, x| {
        let bv = g.constant(b.clone());
        let y = g.matmul(x, bv).unwrap();
        let bb = g.constant(bias.clone());
        let y = g.add_bias(y, bb).unwrap();
        probe(g, y)
    });
    let a = random_tensor(&mut rng, &[5, 4]);
    check_input_grad(random_tensor(&mut rng, &[4, 3]), &|g, w| {
        let av = g.constant(a.clone());
        let y = g.matmul(av, w).unwrap();
        probe(g, y)
    });
    check_input_grad(random_tensor(&mut rng, &[4]), &|g, bias| {
        let x = g.constant(a.clone());
        let y = g.add_bias(x, bias).unwrap();
        probe(g, y)
    });
}

#[test]
fn relu_scale_and_concat_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let other = random_tensor(&mut rng, &[3, 2]);
    check_input_grad(random_tensor(&mut rng, &[3, 4]), &|g, x| {
        let r = g.relu(x);
        let s = g.scale(r, 1.7);
        let o = g.constant(other.clone());
        let c = g.concat_cols(s, o).unwrap();
        let c2 = g.concat_cols(o, x).unwrap();
        let c = g.concat_rows(c, c2).unwrap();
        probe(g, c)
    });
}

#[test]
fn gather_rows_scatters_repeated_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    check_input_grad(random_tensor(&mut rng, &[4, 3]), &|g, x| {
        let y = g.gather_rows(x, &[2, 0, 2, 3]).unwrap();
        probe(g, y)
    });
}

#[test]
fn layer_norm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let gain = random_tensor(&mut rng, &[6]);
    let bias = random_tensor(&mut rng, &[6]);
    let x = random_tensor(&mut rng, &[3, 6]);
    check_input_grad(x.clone(), &|g, x| {
        let gv = g.constant(gain.clone());
        let bv = g.constant(bias.clone());
        let y = g.layer_norm(x, gv, bv, LAYER_NORM_EPS).unwrap();
        probe(g, y)
    });
    check_input_grad(gain.clone(), &|g, gv| {
        let xv = g.constant(x.clone());
        let bv = g.constant(bias.clone());
        let y = g.layer_norm(xv, gv, bv, LAYER_NORM_EPS).unwrap();
        probe(g, y)
    });
}

#[test]
fn layer_norm_output_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_tensor(&mut rng, &[8, 16]);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let gain = g.constant(Tensor::filled(&[16], 1.0));
    let bias = g.constant(Tensor::zeros(&[16]));
    let y = g.layer_norm(xv, gain, bias, LAYER_NORM_EPS).unwrap();
    for i in 0..8 {
        let row = g.value(y).row(i);
        let mean = row.iter().sum::<f64>() / 16.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        let xr = x.row(i);
        let xm = xr.iter().sum::<f64>() / 16.0;
        let xv = xr.iter().map(|v| (v - xm).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-10);
        // eps folds into the variance: var(y) = var(x) / (var(x) + eps).
        assert!((var - xv / (xv + LAYER_NORM_EPS)).abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-3);
    }
}

#[test]
fn softmax_rows_sum_to_one_and_gradients_match() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random_tensor(&mut rng, &[4, 7]);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let ls = g.log_softmax_rows(xv).unwrap();
    for i in 0..4 {
        let s: f64 = g.value(ls).row(i).iter().map(|v| v.exp()).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
    check_input_grad(x, &|g, x| {
        let ls = g.log_softmax_rows(x).unwrap();
        g.nll(ls, &[1, 0, 6, 3]).unwrap()
    });
}

#[test]
fn normalize_rows_gradient_and_zero_row_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    check_input_grad(random_tensor(&mut rng, &[3, 5]), &|g, x| {
        let y = g.normalize_rows(x).unwrap();
        probe(g, y)
    });
    let mut g = Graph::new();
    let z = g.input(Tensor::zeros(&[1, 3]));
    assert!(matches!(g.normalize_rows(z), Err(Error::Numerical(_))));
}

#[test]
fn nll_rejects_bad_targets() {
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(&[2, 3]));
    assert!(matches!(g.nll(x, &[0, 3]), Err(Error::Label(_))));
    assert!(matches!(g.nll(x, &[0]), Err(Error::Label(_))));
}

/// Independent per-head attention: explicit loops, no shared helpers.
fn naive_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> (Vec<f64>, Vec<Vec<Vec<f64>>>) {
    let (t, c) = (q.rows(), q.cols());
    let d = c / heads;
    let mut out = vec![0.0; t * c];
    let mut all = Vec::new();
    for h in 0..heads {
        let mut weights = vec![vec![0.0; t]; t];
        for i in 0..t {
            let logits: Vec<f64> = (0..t)
                .map(|j| {
                    (0..d).map(|x| q.row(i)[h * d + x] * k.row(j)[h * d + x]).sum::<f64>()
                        / (d as f64).sqrt()
                })
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for j in 0..t {
                weights[i][j] = logits[j].exp() / z;
            }
            for x in 0..d {
                out[i * c + h * d + x] = (0..t).map(|j| weights[i][j] * v.row(j)[h * d + x]).sum();
            }
        }
        all.push(weights);
    }
    (out, all)
}

#[test]
fn attention_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (q, k, v) = (
        random_tensor(&mut rng, &[4, 8]),
        random_tensor(&mut rng, &[4, 8]),
        random_tensor(&mut rng, &[4, 8]),
    );
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let a = g.attention(qv, kv, vv, &[(0, 4)], 2).unwrap();
    let (expected, weights) = naive_attention(&q, &k, &v, 2);
    for (x, y) in g.value(a).data().iter().zip(&expected) {
        assert!((x - y).abs() < 1e-12);
    }
    let probs = g.attention_probs(a).unwrap();
    for (h, block) in probs.chunks(16).enumerate() {
        for i in 0..4 {
            let row = &block[i * 4..(i + 1) * 4];
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for j in 0..4 {
                assert!((row[j] - weights[h][i][j]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn attention_with_identical_keys_is_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let q = random_tensor(&mut rng, &[5, 4]);
    let key_row = random_tensor(&mut rng, &[1, 4]);
    let k = Tensor::from_rows(&vec![key_row.row(0).to_vec(); 5]).unwrap();
    let v = random_tensor(&mut rng, &[5, 4]);
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.constant(q), g.constant(k), g.constant(v));
    let a = g.attention(qv, kv, vv, &[(0, 5)], 2).unwrap();
    for p in g.attention_probs(a).unwrap() {
        assert!((p - 0.2).abs() < 1e-15);
    }
}

#[test]
fn single_token_attention_returns_the_value_projection() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mha = MultiHeadAttention::new("mha", 8, 4).unwrap();
    let mut store = ParamStore::new(10);
    mha.init(&mut store, &mut Initializer::new(10)).unwrap();
    let x = random_tensor(&mut rng, &[1, 8]);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let out = mha.forward(&mut g, &store, xv).unwrap();
    // With one token the attention weight is 1, so out = (x Wv + bv) Wo + bo.
    let mut g2 = Graph::new();
    let xv2 = g2.constant(x);
    let val = mha.value.forward(&mut g2, &store, xv2).unwrap();
    let expected = mha.output.forward(&mut g2, &store, val).unwrap();
    assert_eq!(g.value(out), g2.value(expected));
}

#[test]
fn attention_rejects_indivisible_heads() {
    assert!(matches!(MultiHeadAttention::new("m", 6, 4), Err(Error::Config(_))));
}

#[test]
fn attention_gradients_across_spans() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let k = random_tensor(&mut rng, &[6, 4]);
    let v = random_tensor(&mut rng, &[6, 4]);
    let q = random_tensor(&mut rng, &[6, 4]);
    let spans = [(0, 2), (2, 3), (3, 6)];
    check_input_grad(q.clone(), &|g, q| {
        let (kv, vv) = (g.constant(k.clone()), g.constant(v.clone()));
        let a = g.attention(q, kv, vv, &spans, 2).unwrap();
        probe(g, a)
    });
    check_input_grad(k.clone(), &|g, k| {
        let (qv, vv) = (g.constant(q.clone()), g.constant(v.clone()));
        let a = g.attention(qv, k, vv, &spans, 2).unwrap();
        probe(g, a)
    });
    check_input_grad(v.clone(), &|g, v| {
        let (qv, kv) = (g.constant(q.clone()), g.constant(k.clone()));
        let a = g.attention(qv, kv, v, &spans, 2).unwrap();
        probe(g, a)
    });
}

#[test]
fn transformer_block_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let block = TransformerBlock::new("blk", 8, 2, 16).unwrap();
    let mut store = ParamStore::new(0);
    block.init(&mut store, &mut Initializer::new(12)).unwrap();
    check_input_grad(random_tensor(&mut rng, &[5, 8]), &|g, x| {
        let y = block.forward_spans(g, &store, x, &[(0, 3), (3, 5)]).unwrap();
        probe(g, y)
    });
}

#[test]
fn gcn_single_node_identity() {
    let mut g = Graph::new();
    let e = g.constant(Tensor::new(vec![1, 3], vec![0.5, 2.0, 0.0]).unwrap());
    let a = g.constant(Tensor::new(vec![1, 1], vec![1.0]).unwrap());
    let w = g.constant(Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap());
    let out = gcn_layer(&mut g, e, a, w).unwrap();
    assert_eq!(g.value(out).data(), &[0.5, 2.0, 0.0]);
}

#[test]
fn gcn_two_connected_nodes_average() {
    let a_hat = propagation_matrix(2, &[(0, 1)], false);
    assert_eq!(a_hat.data(), &[0.5, 0.5, 0.5, 0.5]);
    let mut g = Graph::new();
    let e = g.constant(Tensor::new(vec![2, 2], vec![2.0, 0.0, 0.0, 2.0]).unwrap());
    let a = g.constant(a_hat);
    let w = g.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let out = gcn_layer(&mut g, e, a, w).unwrap();
    assert_eq!(g.value(out).data(), &[1.0, 1.0, 1.0, 1.0]);
}

#[test]
fn gcn_clamps_negative_preactivations() {
    let mut g = Graph::new();
    let e = g.constant(Tensor::new(vec![1, 2], vec![1.0, -1.0]).unwrap());
    let a = g.constant(Tensor::new(vec![1, 1], vec![1.0]).unwrap());
    let w = g.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let out = gcn_layer(&mut g, e, a, w).unwrap();
    assert_eq!(g.value(out).data(), &[1.0, 0.0]);
    let bad = g.constant(Tensor::zeros(&[2, 2]));
    assert!(gcn_layer(&mut g, e, bad, w).is_err());
}

#[test]
fn gcn_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let a = propagation_matrix(4, &[(0, 1), (1, 2), (1, 3)], false);
    let w = random_tensor(&mut rng, &[3, 3]);
    check_input_grad(random_tensor(&mut rng, &[4, 3]), &|g, e| {
        let (av, wv) = (g.constant(a.clone()), g.constant(w.clone()));
        let y = gcn_layer(g, e, av, wv).unwrap();
        probe(g, y)
    });
}

#[test]
fn raw_propagation_matrix_is_the_adjacency() {
    let a = propagation_matrix(3, &[(0, 1), (1, 2)], true);
    assert_eq!(a.data(), &[0., 1., 0., 1., 0., 1., 0., 1., 0.]);
}

/// Direct eight-corner weighted sum for one point.
fn trilinear_oracle(f: &Tensor, p: [f64; 3]) -> Vec<f64> {
    let s = f.shape();
    let c = s[3];
    let mut out = vec![0.0; c];
    let base = p.map(|x| x.floor());
    for dx in 0..2 {
        for dy in 0..2 {
            for dz in 0..2 {
                let idx = [base[0] as usize + dx, base[1] as usize + dy, base[2] as usize + dz];
                if idx[0] >= s[0] || idx[1] >= s[1] || idx[2] >= s[2] {
                    continue;
                }
                let w = (1.0 - (p[0] - idx[0] as f64).abs())
                    * (1.0 - (p[1] - idx[1] as f64).abs())
                    * (1.0 - (p[2] - idx[2] as f64).abs());
                let off = ((idx[0] * s[1] + idx[1]) * s[2] + idx[2]) * c;
                for ch in 0..c {
                    out[ch] += w * f.data()[off + ch];
                }
            }
        }
    }
    out
}

#[test]
fn trilinear_on_grid_nodes_and_midpoints() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let f = random_tensor(&mut rng, &[3, 4, 5, 2]);
    let mut g = Graph::new();
    let fv = g.constant(f.clone());
    let (s, clamped) = g.trilinear(fv, &[[1.0, 2.0, 3.0], [1.5, 2.0, 3.0]]).unwrap();
    assert_eq!(clamped, 0);
    let node = |x: usize, y: usize, z: usize| {
        let off = ((x * 4 + y) * 5 + z) * 2;
        f.data()[off..off + 2].to_vec()
    };
    assert_eq!(g.value(s).row(0), node(1, 2, 3).as_slice());
    let (a, b) = (node(1, 2, 3), node(2, 2, 3));
    for ch in 0..2 {
        assert!((g.value(s).row(1)[ch] - 0.5 * (a[ch] + b[ch])).abs() < 1e-15);
    }
}

#[test]
fn trilinear_matches_corner_oracle_and_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let f = random_tensor(&mut rng, &[4, 3, 5, 3]);
    let points: Vec<[f64; 3]> = (0..20)
        .map(|_| [rng.random_range(0.0..3.0), rng.random_range(0.0..2.0), rng.random_range(0.0..4.0)])
        .collect();
    let mut g = Graph::new();
    let fv = g.constant(f.clone());
    let (s, _) = g.trilinear(fv, &points).unwrap();
    for (i, p) in points.iter().enumerate() {
        let expected = trilinear_oracle(&f, *p);
        for ch in 0..3 {
            assert!((g.value(s).row(i)[ch] - expected[ch]).abs() < 1e-12);
        }
    }
    check_input_grad(f, &|g, fv| {
        let (s, _) = g.trilinear(fv, &points).unwrap();
        probe(g, s)
    });
}

#[test]
fn trilinear_clamps_out_of_range_positions() {
    let f = Tensor::new(vec![2, 2, 2, 1], (0..8).map(f64::from).collect()).unwrap();
    let mut g = Graph::new();
    let fv = g.constant(f);
    let (s, clamped) = g.trilinear(fv, &[[-3.0, 0.0, 0.0], [5.0, 5.0, 5.0]]).unwrap();
    assert_eq!(clamped, 2);
    assert_eq!(g.value(s).data(), &[0.0, 7.0]);
}

#[test]
fn conv_encoder_shapes_and_zero_input() {
    let enc = ConvEncoder::new("enc", 8);
    let mut store = ParamStore::new(0);
    enc.init(&mut store, &mut Initializer::new(0)).unwrap();
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[8, 12, 16, 1]));
    let y = enc.forward(&mut g, &store, x).unwrap();
    assert_eq!(g.shape(y), &[2, 3, 4, 8]);
    // Biases start at zero, so a zero volume encodes to zero features.
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    let bad = g.constant(Tensor::zeros(&[6, 8, 8, 1]));
    assert!(enc.forward(&mut g, &store, bad).is_err());
}

#[test]
fn conv_encoder_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let enc = ConvEncoder::new("enc", 4);
    let mut store = ParamStore::new(0);
    enc.init(&mut store, &mut Initializer::new(16)).unwrap();
    check_input_grad(random_tensor(&mut rng, &[4, 4, 8, 1]), &|g, x| {
        let y = enc.forward(g, &store, x).unwrap();
        probe(g, y)
    });
    // Gradient with respect to the second-stage weights.
    let w = store.get("enc.conv2.weight").unwrap().clone();
    let x = random_tensor(&mut rng, &[4, 8, 4, 1]);
    check_input_grad(w, &|g, wv| {
        let xv = g.constant(x.clone());
        let (p1, geo) = g.patches(xv).unwrap();
        let h = enc.stage1.forward(g, &store, p1).unwrap();
        let h = g.relu(h);
        let o = geo.output();
        let h = g.reshape(h, &[o[0], o[1], o[2], 2]).unwrap();
        let (p2, _) = g.patches(h).unwrap();
        let y = g.matmul(p2, wv).unwrap();
        probe(g, y)
    });
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let block = TransformerBlock::new("b", 8, 4, 32).unwrap();
        let mut store = ParamStore::new(5);
        block.init(&mut store, &mut Initializer::new(5)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::new();
        let x = g.constant(random_tensor(&mut rng, &[7, 8]));
        let y = block.forward_spans(&mut g, &store, x, &[(0, 7)]).unwrap();
        g.value(y).clone()
    };
    assert_eq!(run(), run());
}

#[test]
fn non_finite_values_are_flagged() {
    let mut g = Graph::new();
    g.set_check_finite(true);
    let x = g.input(Tensor::new(vec![2], vec![f64::MAX, f64::MAX]).unwrap());
    let y = g.scale(x, 10.0);
    let s = g.sum(y);
    assert!(g.fault().is_some());
    assert!(matches!(g.backward(s), Err(Error::Numerical(_))));
}
