//! Property-based invariants: expression algebra, bracket antisymmetry,
//! norm inequalities, exact control energies.

use proptest::prelude::*;

use hypotube::exprdsl::{parse_expr, Expr, Var};
use hypotube::fields::FieldSet;
use hypotube::geometry::{column_kind, ColumnKind, DirectionalFrame};
use hypotube::linalg::Mat;
use hypotube::skeleton::Control;

/// Expressions over (t, x1, x2) built from numerically tame operations.
fn expr_strategy() -> impl Strategy<Value = Expr> {
    let leaf = prop_oneof![
        (-3.0..3.0f64).prop_map(Expr::Num),
        Just(Expr::Time),
        Just(Expr::Var(0)),
        Just(Expr::Var(1)),
    ];
    leaf.prop_recursive(4, 64, 8, |inner| {
        prop_oneof![
            (inner.clone(), inner.clone())
                .prop_map(|(a, b)| Expr::Add(Box::new(a), Box::new(b))),
            (inner.clone(), inner.clone())
                .prop_map(|(a, b)| Expr::Sub(Box::new(a), Box::new(b))),
            (inner.clone(), inner.clone())
                .prop_map(|(a, b)| Expr::Mul(Box::new(a), Box::new(b))),
            inner.clone().prop_map(|a| Expr::Neg(Box::new(a))),
            inner
                .clone()
                .prop_map(|a| Expr::Call(hypotube::exprdsl::Func::Sin, Box::new(a))),
            inner
                .clone()
                .prop_map(|a| Expr::Call(hypotube::exprdsl::Func::Cos, Box::new(a))),
            inner.prop_map(|a| Expr::Call(hypotube::exprdsl::Func::Tanh, Box::new(a))),
        ]
    })
}

fn eval_points() -> Vec<(f64, [f64; 2])> {
    (0..12)
        .map(|k| {
            let t = -1.0 + 0.31 * k as f64;
            (t, [0.4 * k as f64 - 2.0, 1.3 - 0.27 * k as f64])
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn print_parse_round_trip(e in expr_strategy()) {
        let printed = e.to_string();
        let back = parse_expr(&printed, 2).expect("printed expression must re-parse");
        for (t, x) in eval_points() {
            let a = e.eval(t, &x).unwrap();
            let b = back.eval(t, &x).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()), "{printed}: {a} vs {b}");
        }
    }

    #[test]
    fn symbolic_derivative_matches_central_differences(e in expr_strategy()) {
        for var in [Var::State(0), Var::State(1), Var::Time] {
            let de = e.differentiate(var);
            for (t, x) in eval_points().into_iter().take(5) {
                let h = 1e-5;
                let (fp, fm) = match var {
                    Var::Time => (e.eval(t + h, &x).unwrap(), e.eval(t - h, &x).unwrap()),
                    Var::State(i) => {
                        let mut xp = x;
                        let mut xm = x;
                        xp[i] += h;
                        xm[i] -= h;
                        (e.eval(t, &xp).unwrap(), e.eval(t, &xm).unwrap())
                    }
                };
                let fd = (fp - fm) / (2.0 * h);
                let sym = de.eval(t, &x).unwrap();
                prop_assert!(
                    (sym - fd).abs() <= 1e-5 * (1.0 + sym.abs().max(fd.abs())),
                    "d{e} -> {de}: {sym} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn differentiation_is_linear(a in expr_strategy(), b in expr_strategy()) {
        let sum = Expr::Add(Box::new(a.clone()), Box::new(b.clone()));
        let d_sum = sum.differentiate(Var::State(0));
        let da = a.differentiate(Var::State(0));
        let db = b.differentiate(Var::State(0));
        for (t, x) in eval_points().into_iter().take(6) {
            let lhs = d_sum.eval(t, &x).unwrap();
            let rhs = da.eval(t, &x).unwrap() + db.eval(t, &x).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()));
        }
    }

    #[test]
    fn bracket_antisymmetry_on_random_polynomial_fields(
        coeffs in proptest::collection::vec(-1.5..1.5f64, 12),
        x in proptest::collection::vec(-1.0..1.0f64, 2),
        t in 0.0..1.0f64,
    ) {
        // sigma_j components: c0 + c1 x1 + c2 x2 (affine in space)
        let comp = |c: &[f64]| format!("{} + {}*x1 + {}*x2", c[0], c[1], c[2]);
        let s11 = comp(&coeffs[0..3]);
        let s12 = comp(&coeffs[3..6]);
        let s21 = comp(&coeffs[6..9]);
        let s22 = comp(&coeffs[9..12]);
        let fs = FieldSet::from_dsl_strs(
            2,
            2,
            &[vec![&s11, &s12], vec![&s21, &s22]],
            &["0", "0"],
        )
        .unwrap();
        let b12 = fs.lie_bracket(1, 2, t, &x).unwrap();
        let b21 = fs.lie_bracket(2, 1, t, &x).unwrap();
        for k in 0..2 {
            prop_assert_eq!(b12[k], -b21[k]);
        }
        let b11 = fs.lie_bracket(1, 1, t, &x).unwrap();
        prop_assert!(b11.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn norm4_and_monotonicity_on_random_frames(
        entries in proptest::collection::vec(-2.0..2.0f64, 8),
        z in proptest::collection::vec(-2.0..2.0f64, 4),
        r in 0.01..1.0f64,
        rp_frac in 0.0..1.0f64,
    ) {
        // n = 2, d = 2 frame from raw entries
        let mut a = Mat::zeros(2, 4);
        a.data.copy_from_slice(&entries);
        let kinds: Vec<ColumnKind> = (1..=4).map(|l| column_kind(l, 2)).collect();
        let frame = DirectionalFrame::from_parts(0.0, vec![0.0; 2], a, kinds, None);
        prop_assume!(frame.sv_min > 1e-4 * frame.sv_max);
        let fa = frame.scaled(r).unwrap();
        // frame contraction: |A_R z|_{A_R} <= |z|
        let az = fa.a.mul_vec(&z);
        let zn = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!(fa.norm(&az).unwrap() <= zn * (1.0 + 1e-9));
        // monotonicity in R (from the scaling sandwich)
        let rp = r + (1.0 - r) * rp_frac;
        let fb = frame.scaled(rp).unwrap();
        let y = [z[0], z[1]];
        prop_assert!(fb.norm(&y).unwrap() <= fa.norm(&y).unwrap() * (1.0 + 1e-9));
    }

    #[test]
    fn control_energy_matches_riemann_oracle(
        rows in proptest::collection::vec(proptest::collection::vec(-2.0..2.0f64, 2), 1..6),
        t0_frac in 0.0..1.0f64,
        len_frac in 0.0..1.0f64,
    ) {
        let ctrl = Control::piecewise(2, 1.0, &rows).unwrap();
        let t0 = 0.95 * t0_frac;
        let delta = (1.0 - t0) * len_frac;
        let exact = ctrl.sq_integral(t0, delta).unwrap();
        // brute-force Riemann oracle
        let steps = 20_000;
        let mut acc = 0.0;
        for k in 0..steps {
            let s = t0 + delta * (k as f64 + 0.5) / steps as f64;
            acc += ctrl.sq_norm_at(s) * delta / steps as f64;
        }
        prop_assert!((exact - acc).abs() <= 1e-3 * (1.0 + exact), "{exact} vs {acc}");
    }
}
