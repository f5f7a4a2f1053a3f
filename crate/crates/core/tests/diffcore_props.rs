use eqcausal::deq::relative_deviation;
use eqcausal::diffcore::{finite_difference_jacobian, ExprGraph, GraphBuilder, GraphError, NodeId};
use proptest::prelude::*;

const DIM: usize = 3;

/// Appends a smooth random expression of `h` (and `x`) to `b`.
fn grow(b: &mut GraphBuilder, x: NodeId, mut h: NodeId, ops: &[u8], weights: &[f64]) -> NodeId {
    for (n, op) in ops.iter().enumerate() {
        h = match op % 7 {
            0 => b.mul(h, x),
            1 => {
                let s = b.scalar(0.5);
                let hs = b.scale(h, s);
                b.exp(hs)
            }
            2 => {
                let sq = b.mul(h, h);
                let one = b.constant(vec![1.0; DIM]);
                let p = b.add(sq, one);
                b.log(p)
            }
            3 => {
                let w: Vec<f64> = (0..DIM * DIM).map(|i| weights[(n * DIM * DIM + i) % weights.len()]).collect();
                let m = b.constant(w);
                let mv = b.matvec(m, DIM, DIM, h);
                b.add(mv, x)
            }
            4 => {
                let sq = b.mul(h, h);
                let two = b.constant(vec![2.0; DIM]);
                let p = b.add(sq, two);
                b.recip(p)
            }
            5 => {
                let sq = b.mul(h, h);
                let one = b.constant(vec![1.0; DIM]);
                let p = b.add(sq, one);
                b.pow(p, -1.5)
            }
            _ => {
                let s = b.sum(h);
                let bs = b.broadcast(s, DIM);
                b.add(h, bs)
            }
        };
    }
    h
}

fn random_graph(ops: &[u8], weights: &[f64]) -> ExprGraph {
    let mut b = GraphBuilder::new();
    let x = b.input("x", DIM);
    let out = grow(&mut b, x, x, ops, weights);
    b.finish(out).expect("well-formed")
}

fn vjp(g: &ExprGraph, x: &[f64], cot: &[f64]) -> Vec<f64> {
    g.value_and_vjp(&[x], cot).expect("evaluates").1.slot(0).to_vec()
}

fn ops() -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(any::<u8>(), 1..6)
}

fn vec3() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0..1.0f64, DIM)
}

fn weights() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-0.5..0.5f64, DIM * DIM)
}

proptest! {
    #[test]
    fn vjp_matches_finite_differences(ops in ops(), w in weights(), x in vec3(), cot in vec3()) {
        let g = random_graph(&ops, &w);
        let fd = finite_difference_jacobian(|p: &[f64]| -> Result<Vec<f64>, GraphError> { g.forward_eval(&[p]) }, &x, 1e-6).unwrap();
        let want: Vec<f64> = (0..DIM).map(|c| (0..DIM).map(|r| fd[(r, c)] * cot[r]).sum()).collect();
        let got = vjp(&g, &x, &cot);
        prop_assume!(want.iter().any(|v| v.abs() > 1e-6));
        prop_assert!(relative_deviation(&got, &want) < 1e-4, "{got:?} vs {want:?}");
    }

    #[test]
    fn jacobian_rows_are_vjps(ops in ops(), w in weights(), x in vec3()) {
        let g = random_graph(&ops, &w);
        let jac = g.jacobian(&[&x], 0).unwrap();
        for r in 0..DIM {
            let mut e = vec![0.0; DIM];
            e[r] = 1.0;
            let row = vjp(&g, &x, &e);
            for c in 0..DIM {
                prop_assert!((jac[(r, c)] - row[c]).abs() <= 1e-12 * (1.0 + row[c].abs()));
            }
        }
    }

    #[test]
    fn vjp_is_linear_in_the_cotangent(
        ops in ops(), w in weights(), x in vec3(), c1 in vec3(), c2 in vec3(), a in -2.0..2.0f64, b in -2.0..2.0f64
    ) {
        let g = random_graph(&ops, &w);
        let mixed: Vec<f64> = c1.iter().zip(&c2).map(|(p, q)| a * p + b * q).collect();
        let lhs = vjp(&g, &x, &mixed);
        let (v1, v2) = (vjp(&g, &x, &c1), vjp(&g, &x, &c2));
        for i in 0..DIM {
            let rhs = a * v1[i] + b * v2[i];
            prop_assert!((lhs[i] - rhs).abs() <= 1e-10 * (1.0 + rhs.abs()));
        }
    }

    #[test]
    fn spliced_composition_obeys_the_chain_rule(
        inner in ops(), outer in ops(), w in weights(), x in vec3(), cot in vec3()
    ) {
        let f = random_graph(&inner, &w);
        let g = random_graph(&outer, &w);
        let mut b = GraphBuilder::new();
        let xi = b.input("x", DIM);
        let fx = b.splice(&f, &[xi]);
        let gfx = b.splice(&g, &[fx]);
        let composite = b.finish(gfx).unwrap();

        let y = f.forward_eval(&[&x]).unwrap();
        let direct = composite.forward_eval(&[&x]).unwrap();
        let staged = g.forward_eval(&[&y]).unwrap();
        prop_assert_eq!(&direct, &staged);

        let chained = vjp(&f, &x, &vjp(&g, &y, &cot));
        let joint = vjp(&composite, &x, &cot);
        for i in 0..DIM {
            prop_assert!((joint[i] - chained[i]).abs() <= 1e-10 * (1.0 + chained[i].abs()));
        }
    }

    #[test]
    fn evaluation_is_deterministic(ops in ops(), w in weights(), x in vec3(), cot in vec3()) {
        let g = random_graph(&ops, &w);
        let a = g.value_and_vjp(&[&x], &cot).unwrap();
        let b = g.value_and_vjp(&[&x], &cot).unwrap();
        prop_assert_eq!(a.0, b.0);
        prop_assert_eq!(a.1.slot(0), b.1.slot(0));
    }
}
