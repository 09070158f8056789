use proptest::prelude::*;
use stcr::autodiff::{Conv3dSpec, Graph, NodeId, ReduceOp};
use stcr::gradcheck::check_graph;
use stcr::tensor::Tensor;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-1.0f64..1.0, n).prop_map(move |v| Tensor::new(shape.clone(), v).unwrap())
}

/// Entries bounded away from zero, for the relu kink.
fn off_zero(shape: Vec<usize>) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec((0.01f64..1.0, any::<bool>()), n).prop_map(move |v| {
        let data = v.into_iter().map(|(m, neg)| if neg { -m } else { m }).collect();
        Tensor::new(shape.clone(), data).unwrap()
    })
}

/// Sums the node against fixed uneven weights so every output entry matters.
fn weighted_sum(g: &mut Graph, x: NodeId) -> stcr::Result<NodeId> {
    let w = Tensor::from_fn(g.shape(x), |i| 0.5 + (1.7 * i as f64).sin());
    let w = g.constant(w);
    let p = g.mul(x, w)?;
    g.sum_all(p)
}

/// Direct seven-deep loop cross-correlation with zero padding.
fn conv_reference(x: &Tensor, k: &Tensor, b: &Tensor, stride: [usize; 3], pad: [usize; 3]) -> Tensor {
    let [ci, t, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [co, _, kt, kh, kw] = [k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3], k.shape()[4]];
    let out_len = |n: usize, k: usize, s: usize, p: usize| (n + 2 * p - k) / s + 1;
    let (ot, oh, ow) = (
        out_len(t, kt, stride[0], pad[0]),
        out_len(h, kh, stride[1], pad[1]),
        out_len(w, kw, stride[2], pad[2]),
    );
    let mut out = Tensor::zeros(&[co, ot, oh, ow]);
    for o in 0..co {
        for a in 0..ot {
            for bb in 0..oh {
                for c in 0..ow {
                    let mut acc = b.data()[o];
                    for i in 0..ci {
                        for dt in 0..kt {
                            for dh in 0..kh {
                                for dw in 0..kw {
                                    let ti = (a * stride[0] + dt) as isize - pad[0] as isize;
                                    let hi = (bb * stride[1] + dh) as isize - pad[1] as isize;
                                    let wi = (c * stride[2] + dw) as isize - pad[2] as isize;
                                    if ti < 0 || hi < 0 || wi < 0 || ti >= t as isize || hi >= h as isize || wi >= w as isize {
                                        continue;
                                    }
                                    acc += x.at(&[i, ti as usize, hi as usize, wi as usize]) * k.at(&[o, i, dt, dh, dw]);
                                }
                            }
                        }
                    }
                    out.data_mut()[((o * ot + a) * oh + bb) * ow + c] = acc;
                }
            }
        }
    }
    out
}

#[derive(Clone, Debug)]
struct ConvCase {
    x: Tensor,
    k: Tensor,
    b: Tensor,
    spec: Conv3dSpec,
}

fn conv_case(max_dim: usize) -> impl Strategy<Value = ConvCase> {
    (
        1usize..=3,
        1usize..=3,
        prop::array::uniform3(1usize..=max_dim),
        prop::array::uniform3(1usize..=3),
        prop::array::uniform3(1usize..=2),
        prop::array::uniform3(0usize..=1),
    )
        .prop_filter("kernel fits padded input", |(_, _, dims, k, _, p)| {
            (0..3).all(|a| k[a] <= dims[a] + 2 * p[a])
        })
        .prop_flat_map(|(ci, co, dims, k, s, p)| {
            (
                tensor(vec![ci, dims[0], dims[1], dims[2]]),
                tensor(vec![co, ci, k[0], k[1], k[2]]),
                tensor(vec![co]),
                Just(Conv3dSpec { stride: s, padding: p }),
            )
        })
        .prop_map(|(x, k, b, spec)| ConvCase { x, k, b, spec })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv3d_matches_nested_loops(case in conv_case(6)) {
        let mut g = Graph::new();
        let x = g.constant(case.x.clone());
        let k = g.constant(case.k.clone());
        let b = g.constant(case.b.clone());
        let y = g.conv3d(x, k, b, case.spec).unwrap();
        let expected = conv_reference(&case.x, &case.k, &case.b, case.spec.stride, case.spec.padding);
        prop_assert_eq!(g.value(y).shape(), expected.shape());
        for (a, e) in g.value(y).data().iter().zip(expected.data()) {
            prop_assert!((a - e).abs() <= 1e-12, "{} vs {}", a, e);
        }
    }

    #[test]
    fn conv3d_gradients(case in conv_case(4)) {
        let err = check_graph(
            |g, ids| {
                let y = g.conv3d(ids[0], ids[1], ids[2], case.spec)?;
                weighted_sum(g, y)
            },
            &[case.x.clone(), case.k.clone(), case.b.clone()],
            EPS,
        ).unwrap();
        prop_assert!(err < TOL, "{}", err);
    }

    #[test]
    fn linear_matches_triple_loop(
        (x, w, b) in (1usize..5, 1usize..6, 1usize..5)
            .prop_flat_map(|(r, i, o)| (tensor(vec![r, i]), tensor(vec![o, i]), tensor(vec![o])))
    ) {
        let mut g = Graph::new();
        let (xn, wn, bn) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
        let y = g.linear(xn, wn, bn).unwrap();
        let (rows, d_in, d_out) = (x.shape()[0], x.shape()[1], w.shape()[0]);
        for r in 0..rows {
            for o in 0..d_out {
                let mut acc = b.data()[o];
                for i in 0..d_in {
                    acc += x.at(&[r, i]) * w.at(&[o, i]);
                }
                prop_assert!((g.value(y).at(&[r, o]) - acc).abs() <= 1e-12);
            }
        }
        let err = check_graph(
            |g, ids| {
                let y = g.linear(ids[0], ids[1], ids[2])?;
                weighted_sum(g, y)
            },
            &[x, w, b],
            EPS,
        ).unwrap();
        prop_assert!(err < TOL, "{}", err);
    }

    #[test]
    fn elementwise_gradients(a in off_zero(vec![3, 4]), b in tensor(vec![3, 4]), s in -3.0f64..3.0) {
        let err = check_graph(
            |g, ids| {
                let r = g.relu(ids[0]);
                let m = g.mul(r, ids[1])?;
                let d = g.sub(m, ids[0])?;
                let e = g.add(d, ids[1])?;
                let f = g.scale(e, s);
                weighted_sum(g, f)
            },
            &[a, b],
            EPS,
        ).unwrap();
        prop_assert!(err < TOL, "{}", err);
    }

    #[test]
    fn reduce_gradients(x in tensor(vec![2, 3, 4]), axes in prop::sample::subsequence(vec![0usize, 1, 2], 1..=3)) {
        let mut sorted = x.data().to_vec();
        sorted.sort_by(f64::total_cmp);
        prop_assume!(sorted.windows(2).all(|p| p[1] - p[0] > 1e-3));
        for kind in [ReduceOp::Max, ReduceOp::Mean, ReduceOp::Sum] {
            let err = check_graph(
                |g, ids| {
                    let r = g.reduce(kind, ids[0], &axes)?;
                    weighted_sum(g, r)
                },
                std::slice::from_ref(&x),
                EPS,
            ).unwrap();
            prop_assert!(err < TOL, "{:?}: {}", kind, err);
        }
    }

    #[test]
    fn gather_and_reshape_gradients(x in tensor(vec![2, 5]), map in prop::collection::vec(0usize..10, 12)) {
        let err = check_graph(
            |g, ids| {
                let y = g.gather(ids[0], map.clone(), &[3, 4])?;
                let z = g.reshape(y, &[4, 3])?;
                weighted_sum(g, z)
            },
            std::slice::from_ref(&x),
            EPS,
        ).unwrap();
        prop_assert!(err < TOL, "{}", err);
    }

    #[test]
    fn softmax_kl_gradients(p in tensor(vec![6]), q in tensor(vec![6])) {
        let scaled = |t: Tensor| t.map(|v| 3.0 * v);
        let err = check_graph(|g, ids| g.softmax_kl(ids[0], ids[1]), &[scaled(p), scaled(q)], EPS).unwrap();
        prop_assert!(err < TOL, "{}", err);
    }

    #[test]
    fn softmax_kl_is_nonnegative(p in prop::collection::vec(-30.0f64..30.0, 1..12), q_seed in any::<u64>()) {
        let n = p.len();
        let q: Vec<f64> = (0..n).map(|i| ((q_seed >> (i % 60)) & 0xff) as f64 / 8.0 - 16.0).collect();
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(vec![n], p).unwrap());
        let b = g.constant(Tensor::new(vec![n], q).unwrap());
        let kl = g.softmax_kl(a, b).unwrap();
        prop_assert!(g.value(kl).data()[0] >= 0.0);
    }

    #[test]
    fn softmax_kl_vanishes_under_exact_shift(
        p in prop::collection::vec(-64i32..64, 1..12),
        shift in -40i32..40,
    ) {
        // eighths and quarters are exact in binary, so q - p is one constant
        let n = p.len();
        let pv: Vec<f64> = p.iter().map(|&v| v as f64 / 8.0).collect();
        let qv: Vec<f64> = pv.iter().map(|&v| v + shift as f64 / 4.0).collect();
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(vec![n], pv).unwrap());
        let b = g.constant(Tensor::new(vec![n], qv).unwrap());
        let kl = g.softmax_kl(a, b).unwrap();
        prop_assert_eq!(g.value(kl).data()[0], 0.0);
    }

    #[test]
    fn backward_is_repeatable(case in conv_case(4)) {
        let mut g = Graph::new();
        let x = g.param(case.x.clone());
        let k = g.param(case.k.clone());
        let b = g.param(case.b.clone());
        let y = g.conv3d(x, k, b, case.spec).unwrap();
        let r = g.relu(y);
        let m = g.reduce(ReduceOp::Max, r, &[2, 3]).unwrap();
        let loss = weighted_sum(&mut g, m).unwrap();
        let first = g.backward(loss).unwrap();
        let second = g.backward(loss).unwrap();
        for id in [x, k, b] {
            let (u, v) = (first.get(id).unwrap(), second.get(id).unwrap());
            prop_assert!(u.data().iter().zip(v.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }
}
