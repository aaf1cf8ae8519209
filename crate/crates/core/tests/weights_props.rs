use confbal::kernel::{GramMatrix, KernelSource};
use confbal::weights::{kkt_solve_equality, mmd_squared, objective, solve_weights, BalancingProblem, SolverOptions};
use ndarray::Array2;
use proptest::prelude::*;

fn gram(n: usize, r: usize, b: &[f64]) -> GramMatrix<f64> {
    let bm = Array2::from_shape_fn((n, r), |(i, k)| b[(i * r + k) % b.len()]);
    let k = bm.dot(&bm.t()) / r as f64;
    let sym = (&k + &k.t()) / 2.0;
    GramMatrix::new(sym, KernelSource::Custom).unwrap()
}

fn labels(n: usize, bits: &[bool]) -> Vec<bool> {
    let mut a: Vec<bool> = (0..n).map(|i| bits[i % bits.len()]).collect();
    a[0] = true;
    a[1] = false;
    a
}

proptest! {
    #[test]
    fn mmd_matches_quadratic_form(
        n in 2usize..20,
        b in prop::collection::vec(-1.0f64..1.0, 1..80),
        w in prop::collection::vec(0.0f64..3.0, 20),
        bits in prop::collection::vec(any::<bool>(), 1..8),
    ) {
        let g = gram(n, 4, &b);
        let a = labels(n, &bits);
        let w = &w[..n];
        for group in [true, false] {
            let na = a.iter().filter(|&&v| v == group).count() as f64;
            let u: Vec<f64> = (0..n)
                .map(|i| if a[i] == group { w[i] / na } else { 0.0 } - 1.0 / n as f64)
                .collect();
            let mut quad = 0.0;
            for i in 0..n {
                for j in 0..n {
                    quad += u[i] * g.get(i, j) * u[j];
                }
            }
            prop_assert!((mmd_squared(&g, w, group, &a) - quad).abs() < 1e-12);
        }
    }

    #[test]
    fn solutions_are_feasible(
        n in 3usize..25,
        b in prop::collection::vec(-1.0f64..1.0, 10..100),
        bits in prop::collection::vec(any::<bool>(), 1..8),
        lambda in prop::sample::select(vec![0.0, 1e-4, 1e-2, 1.0]),
        nonneg in any::<bool>(),
    ) {
        let a = labels(n, &bits);
        let problem = BalancingProblem::new(gram(n, 3, &b), a.clone(), lambda, nonneg).unwrap();
        let s = solve_weights(&problem, &SolverOptions::default());
        for g in [true, false] {
            let na = a.iter().filter(|&&v| v == g).count() as f64;
            let sum: f64 = (0..n).filter(|&i| a[i] == g).map(|i| s.w[i]).sum();
            prop_assert!((sum - na).abs() < 1e-6);
        }
        if nonneg {
            prop_assert!(s.w.iter().all(|&v| v >= -1e-10));
        }
        let ones = vec![1.0; n];
        prop_assert!(s.objective <= objective(&problem, &ones) + 1e-12);
    }

    #[test]
    fn equality_solver_matches_kkt(
        n in 3usize..30,
        b in prop::collection::vec(-1.0f64..1.0, 10..120),
        bits in prop::collection::vec(any::<bool>(), 1..8),
        lambda in prop::sample::select(vec![1e-3, 1.0, 10.0]),
    ) {
        let a = labels(n, &bits);
        let problem = BalancingProblem::new(gram(n, 5, &b), a, lambda, false).unwrap();
        let s = solve_weights(&problem, &SolverOptions::default());
        let oracle = kkt_solve_equality(&problem).unwrap();
        let gap = s.w.iter().zip(&oracle).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        prop_assert!(gap < 1e-6, "max gap {}", gap);
    }
}
