mod common;

use common::{conv2d, rand_tensor};
use proptest::prelude::*;
use scaseg_core::tensor::{gradient_check, ConvGeometry};
use scaseg_core::{Graph, Result, Tensor, Var};

/// Reduces `y` to a scalar through fixed random weights so every output element matters.
fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let w = rand_tensor(g.shape(y), seed, "readout");
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn check(seed: u64, x: &Tensor, op: impl Fn(&mut Graph, Var) -> Result<Var>) -> f64 {
    gradient_check(|g, v| {
        let y = op(g, v)?;
        weighted_sum(g, y, seed)
    }, x, 1e-6)
    .unwrap()
}

/// Random values with magnitude in `[0.1, 1]`, so ReLU never sits near its kink.
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor {
    rand_tensor(shape, seed, "x").map(|v| if v >= 0.0 { 0.1 + 0.9 * v } else { -0.1 + 0.9 * v })
}

const SEEDS: u64 = 20;
const TOL: f64 = 1e-6;

#[test]
fn elementwise_gradients() {
    for seed in 0..SEEDS {
        let x = away_from_zero(&[2, 3, 4], seed);
        let other = rand_tensor(&[2, 3, 4], seed, "other");
        let positive = x.map(|v| v.abs() + 0.5);
        let cases: Vec<(&str, f64)> = vec![
            ("relu", check(seed, &x, |g, v| Ok(g.relu(v)))),
            ("gelu", check(seed, &x, |g, v| Ok(g.gelu(v)))),
            ("sigmoid", check(seed, &x, |g, v| Ok(g.sigmoid(v)))),
            ("exp", check(seed, &x, |g, v| Ok(g.exp(v)))),
            ("ln", check(seed, &positive, |g, v| Ok(g.ln(v)))),
            ("powf", check(seed, &positive, |g, v| Ok(g.powf(v, -0.5)))),
            ("scale", check(seed, &x, |g, v| Ok(g.scale(v, -2.5)))),
            ("add_scalar", check(seed, &x, |g, v| Ok(g.add_scalar(v, 3.0)))),
            ("mul", check(seed, &x, |g, v| {
                let o = g.constant(other.clone());
                g.mul(v, o)
            })),
            ("div", check(seed, &positive, |g, v| {
                let o = g.constant(other.clone());
                g.div(o, v)
            })),
            ("sub broadcast", check(seed, &x, |g, v| {
                let row = g.constant(rand_tensor(&[1, 3, 1], seed, "row"));
                g.sub(row, v)
            })),
        ];
        for (name, err) in cases {
            assert!(err < TOL, "{name} seed {seed}: {err:e}");
        }
    }
}

#[test]
fn structural_gradients() {
    for seed in 0..SEEDS {
        let x = rand_tensor(&[2, 3, 4], seed, "x");
        let cases: Vec<(&str, f64)> = vec![
            ("matmul", check(seed, &x, |g, v| {
                let w = g.constant(rand_tensor(&[4, 5], seed, "w"));
                g.matmul(v, w)
            })),
            ("matmul rhs", check(seed, &rand_tensor(&[4, 5], seed, "w"), |g, v| {
                let a = g.constant(x.clone());
                g.matmul(a, v)
            })),
            ("reshape", check(seed, &x, |g, v| g.reshape(v, &[6, 4]))),
            ("permute", check(seed, &x, |g, v| g.permute(v, &[2, 0, 1]))),
            ("transpose", check(seed, &x, |g, v| g.transpose(v))),
            ("concat", check(seed, &x, |g, v| {
                let s = g.scale(v, 2.0);
                g.concat(&[v, s], 1)
            })),
            ("slice", check(seed, &x, |g, v| g.slice(v, 2, 1, 2))),
            ("mean", check(seed, &x, |g, v| g.mean(v, &[0, 2]))),
            ("variance", check(seed, &x, |g, v| g.variance(v, &[2]))),
            ("softmax", check(seed, &x, |g, v| g.softmax(v, 2))),
            ("mean_all", check(seed, &x, |g, v| Ok(g.mean_all(v)))),
        ];
        for (name, err) in cases {
            assert!(err < TOL, "{name} seed {seed}: {err:e}");
        }
    }
}

#[test]
fn spatial_gradients() {
    let geoms = [
        (3, ConvGeometry { stride: 1, padding: 1, groups: 1 }),
        (3, ConvGeometry { stride: 2, padding: 1, groups: 1 }),
        (4, ConvGeometry { stride: 4, padding: 0, groups: 1 }),
        (3, ConvGeometry { stride: 1, padding: 1, groups: 4 }),
    ];
    for seed in 0..SEEDS {
        let x = rand_tensor(&[2, 4, 8, 8], seed, "x");
        for &(k, geom) in &geoms {
            let wshape = [4, 4 / geom.groups, k, k];
            let w = rand_tensor(&wshape, seed, "w");
            let b = rand_tensor(&[4], seed, "b");
            let err = check(seed, &x, |g, v| {
                let (w, b) = (g.constant(w.clone()), g.constant(b.clone()));
                g.conv2d(v, w, Some(b), geom)
            });
            assert!(err < TOL, "conv input {geom:?} seed {seed}: {err:e}");
            let err = check(seed, &w, |g, wv| {
                let xc = g.constant(x.clone());
                g.conv2d(xc, wv, None, geom)
            });
            assert!(err < TOL, "conv weight {geom:?} seed {seed}: {err:e}");
        }
        let err = check(seed, &x, |g, v| g.resize_bilinear(v, 3, 5));
        assert!(err < TOL, "resize down seed {seed}: {err:e}");
        let err = check(seed, &x, |g, v| g.resize_bilinear(v, 16, 12));
        assert!(err < TOL, "resize up seed {seed}: {err:e}");
        let err = check(seed, &x, |g, v| g.avg_pool(v, 4));
        assert!(err < TOL, "avg_pool seed {seed}: {err:e}");
    }
}

#[test]
fn cross_entropy_gradient() {
    for seed in 0..SEEDS {
        let x = rand_tensor(&[2, 3, 2, 2], seed, "logits").map(|v| 3.0 * v);
        let labels: Vec<usize> = (0..8).map(|i| (i * 7 + seed as usize) % 3).collect();
        let err = gradient_check(|g, v| g.cross_entropy(v, &labels), &x, 1e-6).unwrap();
        assert!(err < TOL, "seed {seed}: {err:e}");
    }
}

#[test]
fn conv_matches_direct_loops() {
    for (k, geom) in [
        (3, ConvGeometry { stride: 1, padding: 1, groups: 1 }),
        (3, ConvGeometry { stride: 2, padding: 1, groups: 2 }),
        (1, ConvGeometry { stride: 1, padding: 0, groups: 1 }),
    ] {
        let x = rand_tensor(&[2, 4, 6, 6], 3, "x");
        let w = rand_tensor(&[6, 4 / geom.groups, k, k], 3, "w");
        let b = rand_tensor(&[6], 3, "b");
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
        let y = g.conv2d(xv, wv, Some(bv), geom).unwrap();
        let oracle = conv2d(&x, &w, Some(&b), geom).out;
        assert!(g.value(y).max_abs_diff(&oracle).unwrap() < 1e-12, "{geom:?}");
    }
}

#[test]
fn reused_variable_accumulates_gradient() {
    let mut g = Graph::new();
    let x = g.variable(Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap());
    let a = g.sum(x);
    let b = g.sum(x);
    let y = g.add(a, b).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[2.0, 2.0, 2.0]);

    let mut g = Graph::new();
    let x = g.variable(Tensor::new(&[2], vec![3.0, -1.5]).unwrap());
    let sq = g.mul(x, x).unwrap();
    let y = g.sum(sq);
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[6.0, -3.0]);
}

#[test]
fn mismatched_shapes_are_rejected() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[4, 2]));
    assert!(g.matmul(a, b).is_err());
    assert!(g.add(a, b).is_err());
    assert!(g.reshape(a, &[5]).is_err());
}

fn shape_strategy() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..5, 1..5)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn reshape_round_trip(shape in shape_strategy(), seed in 0u64..1000) {
        let t = rand_tensor(&shape, seed, "t");
        let flat = t.reshape(&[t.numel()]).unwrap();
        let back = flat.reshape(&shape).unwrap();
        prop_assert_eq!(back, t);
    }

    #[test]
    fn matmul_is_associative(m in 1usize..6, k in 1usize..6, n in 1usize..6, p in 1usize..6, seed in 0u64..1000) {
        let a = rand_tensor(&[m, k], seed, "a");
        let b = rand_tensor(&[k, n], seed, "b");
        let c = rand_tensor(&[n, p], seed, "c");
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        prop_assert!(left.max_abs_diff(&right).unwrap() < 1e-10);
    }

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..6, cols in 1usize..9, shift in -50.0f64..50.0, seed in 0u64..1000) {
        let x = rand_tensor(&[rows, cols], seed, "x").map(|v| 10.0 * v);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let s = g.softmax(xv, 1).unwrap();
        let shifted = g.constant(x.map(|v| v + shift));
        let s2 = g.softmax(shifted, 1).unwrap();
        let (s, s2) = (g.value(s), g.value(s2));
        for r in 0..rows {
            let total: f64 = (0..cols).map(|c| s.at(&[r, c])).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
        prop_assert!(s.max_abs_diff(s2).unwrap() < 1e-12);
    }
}
