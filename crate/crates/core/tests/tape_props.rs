use hyperalign_core::rng::Rng;
use hyperalign_core::gradsuite::check_resolvable;
use hyperalign_core::tensor::grad_check;
use hyperalign_core::{Graph, Result, Tensor, Var};
use proptest::prelude::*;

/// A composite of most tape ops: matmul, layer norm, softmax, logsumexp,
/// smooth nonlinearities and reductions.
fn composite(g: &mut Graph, x: Var, w: &Tensor, gain: &Tensor) -> Result<Var> {
    let w = g.constant(w.clone())?;
    let h = g.matmul(x, w)?;
    let h = g.tanh(h)?;
    let gain_len = gain.len();
    let gain = g.constant(gain.clone())?;
    let zero = g.constant(Tensor::zeros(&[gain_len]))?;
    let h = g.layer_norm(h, gain, zero, 1e-5)?;
    let s = g.softmax_rows(h)?;
    let l = g.logsumexp(h, 1)?;
    let sig = g.sigmoid(x)?;
    let sq = g.square(sig)?;
    let r = g.constant(readout(g.shape(s)))?;
    let a = g.mul(s, r)?;
    let a = g.sum(a)?;
    let b = g.mean(l)?;
    let c = g.mean(sq)?;
    let e = g.exp(c)?;
    let ab = g.add(a, b)?;
    g.add(ab, e)
}

fn readout(shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|i| 1.0 + (i % 3) as f64).collect()).unwrap()
}

/// Uses `x` exactly once, through a matmul.
fn single_use(g: &mut Graph, x: Var, w: &Tensor) -> Result<Var> {
    let w = g.constant(w.clone())?;
    let h = g.matmul(x, w)?;
    let h = g.tanh(h)?;
    let s = g.softmax_rows(h)?;
    let l = g.logsumexp(s, 1)?;
    g.sum(l)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn composed_graph_matches_finite_differences(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let x = rng.normal_tensor(&[3, 4], 1.0);
        let w = rng.normal_tensor(&[4, 5], 0.5);
        let gain = rng.uniform_tensor(&[5], 0.5, 1.5);
        let r = check_resolvable(|g, p| composite(g, p, &w, &gain), &x).unwrap();
        prop_assume!(r.is_some());
        let r = r.unwrap();
        prop_assert!(r.max_rel_err < 1e-5, "{r:?}");
    }

    #[test]
    fn quadratic_gradient_is_exact_to_rounding(
        mags in prop::collection::vec(0.5f64..2.0, 1..5),
        signs in prop::collection::vec(any::<bool>(), 5),
    ) {
        // Central differences are exact for a quadratic; what remains is the
        // rounding of f, negligible here because every |x_i| >= 0.5.
        let data = mags.iter().zip(&signs).map(|(m, s)| if *s { *m } else { -m }).collect();
        let x = Tensor::vector(data);
        let r = grad_check(|g, p| { let s = g.square(p)?; g.sum(s) }, &x, 1e-6).unwrap();
        prop_assert!(r.max_rel_err < 1e-8, "{r:?}");
    }

    #[test]
    fn reused_subgraph_doubles_the_gradient(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let x0 = rng.normal_tensor(&[2, 3], 1.0);
        let w = rng.normal_tensor(&[3, 3], 0.5);
        let mut g = Graph::new();
        let x = g.param(x0.clone()).unwrap();
        let once = single_use(&mut g, x, &w).unwrap();
        let single = g.backward(once).unwrap().wrt(x);

        let mut g = Graph::new();
        let x = g.param(x0).unwrap();
        let a = single_use(&mut g, x, &w).unwrap();
        let b = single_use(&mut g, x, &w).unwrap();
        let twice = g.add(a, b).unwrap();
        let double = g.backward(twice).unwrap().wrt(x);
        for (s, d) in single.data().iter().zip(double.data()) {
            prop_assert_eq!((2.0 * s).to_bits(), d.to_bits());
        }
    }
}

#[test]
fn non_finite_values_are_numeric_errors() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![0.0, 1.0])).unwrap();
    let err = g.log(x).unwrap_err();
    assert!(err.is_numeric(), "{err}");
}
