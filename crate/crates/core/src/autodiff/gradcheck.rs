//! Central finite-difference gradient checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::tape::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Denominator floor for the relative error, so that gradients at the
/// finite-difference noise level (~1e-10 for O(1) losses at h = 1e-5) are not
/// reported as large relative errors.
pub const REL_ERROR_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `(input, element)` of the worst relative error.
    pub worst: (usize, usize),
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares tape gradients of `f` against central differences with step `h`.
///
/// `f` receives the tape and one leaf per input and must return a scalar.
pub fn check<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>], grad: bool| -> Result<(Tape<f64>, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars = values
            .iter()
            .map(|t| tape.leaf(t.clone(), grad))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &vars)?;
        Ok((tape, vars, out))
    };

    let (tape, vars, out) = eval(inputs, true)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.wrt(&tape, v)).collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for e in 0..input.numel() {
            let orig = input.data()[e];
            probe[i].data_mut()[e] = orig + h;
            let (t, _, o) = eval(&probe, false)?;
            let plus = t.value(o).item();
            probe[i].data_mut()[e] = orig - h;
            let (t, _, o) = eval(&probe, false)?;
            let minus = t.value(o).item();
            probe[i].data_mut()[e] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[i].data()[e];
            let rel = relative_error(a, numeric);
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (i, e);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

/// One named case of [`op_suite`].
#[derive(Debug, Clone, PartialEq)]
pub struct CaseReport {
    pub name: &'static str,
    pub report: GradCheckReport,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// `Σ out ⊙ w` for a fixed random `w`, so every output element matters.
fn weighted_sum(tape: &mut Tape<f64>, out: Var, w: &Tensor<f64>) -> Result<Var> {
    let w = tape.constant(w.clone())?;
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

type Case = (&'static str, Vec<Tensor<f64>>, Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>);

/// Finite-difference check of every tape operation on random inputs.
pub fn op_suite(seed: u64, h: f64) -> Result<Vec<CaseReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let w = |shape: &[usize], rng: &mut ChaCha8Rng| uniform(rng, shape, -1.0, 1.0);
    let w34 = w(&[3, 4], r);
    let w32 = w(&[3, 2], r);
    let w35 = w(&[3, 5], r);
    let w36 = w(&[3, 6], r);
    let w44 = w(&[4, 4], r);
    let w43 = w(&[4, 3], r);
    let w33 = w(&[3, 3], r);
    let w14 = w(&[1, 4], r);
    let wa = w(&[4, 3], r);

    let cases: Vec<Case> = vec![
        ("matmul", vec![w(&[3, 4], r), w(&[4, 2], r)], {
            let w = w32.clone();
            Box::new(move |t, v| {
                let o = t.matmul(v[0], v[1])?;
                weighted_sum(t, o, &w)
            })
        }),
        ("matmul_bt", vec![w(&[3, 4], r), w(&[2, 4], r)], {
            let w = w32.clone();
            Box::new(move |t, v| {
                let o = t.matmul_bt(v[0], v[1])?;
                weighted_sum(t, o, &w)
            })
        }),
        ("add", vec![w(&[3, 4], r), w(&[3, 4], r)], {
            let w = w34.clone();
            Box::new(move |t, v| {
                let o = t.add(v[0], v[1])?;
                weighted_sum(t, o, &w)
            })
        }),
        ("add_row", vec![w(&[3, 4], r), w(&[1, 4], r)], {
            let w = w34.clone();
            Box::new(move |t, v| {
                let o = t.add_row(v[0], v[1])?;
                weighted_sum(t, o, &w)
            })
        }),
        ("mul", vec![w(&[3, 4], r), w(&[3, 4], r)], {
            let w = w34.clone();
            Box::new(move |t, v| {
                let o = t.mul(v[0], v[1])?;
                weighted_sum(t, o, &w)
            })
        }),
        ("scale", vec![w(&[3, 4], r)], {
            let w = w34.clone();
            Box::new(move |t, v| {
                let o = t.scale(v[0], -1.7)?;
                weighted_sum(t, o, &w)
            })
        }),
        ("scale_by", vec![w(&[3, 4], r), w(&[1, 1], r)], {
            let w = w34.clone();
            Box::new(move |t, v| {
                let o = t.scale_by(v[0], v[1])?;
                weighted_sum(t, o, &w)
            })
        }),
        ("recip", vec![uniform(r, &[3, 4], 0.5, 2.0)], {
            let w = w34.clone();
            Box::new(move |t, v| {
                let o = t.recip(v[0])?;
                weighted_sum(t, o, &w)
            })
        }),
        ("gelu", vec![uniform(r, &[3, 5], -3.0, 3.0)], {
            let w = w35.clone();
            Box::new(move |t, v| {
                let o = t.gelu(v[0])?;
                weighted_sum(t, o, &w)
            })
        }),
        ("layer_norm", vec![w(&[3, 6], r), uniform(r, &[1, 6], 0.5, 1.5), w(&[1, 6], r)], {
            let w = w36.clone();
            Box::new(move |t, v| {
                let o = t.layer_norm(v[0], v[1], v[2])?;
                weighted_sum(t, o, &w)
            })
        }),
        ("softmax_rows", vec![uniform(r, &[3, 5], -2.0, 2.0)], {
            let w = w35.clone();
            Box::new(move |t, v| {
                let o = t.softmax_rows(v[0])?;
                weighted_sum(t, o, &w)
            })
        }),
        ("causal_softmax", vec![uniform(r, &[4, 4], -2.0, 2.0)], {
            let w = w44.clone();
            Box::new(move |t, v| {
                let o = t.causal_softmax(v[0])?;
                weighted_sum(t, o, &w)
            })
        }),
        ("embedding", vec![w(&[6, 3], r)], {
            let w = w43.clone();
            Box::new(move |t, v| {
                let o = t.embedding(v[0], &[0, 2, 2, 5])?;
                weighted_sum(t, o, &w)
            })
        }),
        ("rows", vec![w(&[5, 3], r)], {
            let w = w33.clone();
            Box::new(move |t, v| {
                let o = t.rows(v[0], 1, 3)?;
                weighted_sum(t, o, &w)
            })
        }),
        ("cols", vec![w(&[3, 5], r)], {
            let w = w33.clone();
            Box::new(move |t, v| {
                let o = t.cols(v[0], 1, 3)?;
                weighted_sum(t, o, &w)
            })
        }),
        ("concat_cols", vec![w(&[3, 2], r), w(&[3, 3], r)], {
            let w = w35.clone();
            Box::new(move |t, v| {
                let o = t.concat_cols(&[v[0], v[1]])?;
                weighted_sum(t, o, &w)
            })
        }),
        ("log", vec![uniform(r, &[3, 4], 0.5, 2.0)], {
            let w = w34.clone();
            Box::new(move |t, v| {
                let o = t.log(v[0])?;
                weighted_sum(t, o, &w)
            })
        }),
        ("log_clamped", vec![uniform(r, &[3, 4], 0.5, 2.0)], {
            let w = w34.clone();
            Box::new(move |t, v| {
                let o = t.log_clamped(v[0], 0.1)?;
                weighted_sum(t, o, &w)
            })
        }),
        ("sum", vec![w(&[3, 4], r)], Box::new(|t, v| t.sum(v[0]))),
        ("pick", vec![w(&[3, 4], r)], {
            let w = w14.clone();
            Box::new(move |t, v| {
                let o = t.pick(v[0], &[0, 5, 5, 11])?;
                weighted_sum(t, o, &w)
            })
        }),
        ("cross_entropy", vec![uniform(r, &[3, 6], -2.0, 2.0)], Box::new(|t, v| {
            t.cross_entropy(v[0], &[1, 4, 0], &[true, false, true])
        })),
        ("cross_entropy_masked", vec![uniform(r, &[4, 5], -2.0, 2.0)], Box::new(|t, v| {
            t.cross_entropy_masked(v[0], &[Some(3), None, Some(0), Some(3)])
        })),
        // Single-head causal attention: every op above composed.
        ("attention", vec![w(&[4, 3], r), w(&[3, 3], r), w(&[3, 3], r), w(&[3, 3], r)], {
            let w = wa.clone();
            Box::new(move |t, v| {
                let q = t.matmul(v[0], v[1])?;
                let k = t.matmul(v[0], v[2])?;
                let val = t.matmul(v[0], v[3])?;
                let s = t.matmul_bt(q, k)?;
                let s = t.scale(s, 1.0 / 3f64.sqrt())?;
                let p = t.causal_softmax(s)?;
                let o = t.matmul(p, val)?;
                let o = t.gelu(o)?;
                weighted_sum(t, o, &w)
            })
        }),
    ];
    cases
        .into_iter()
        .map(|(name, inputs, f)| Ok(CaseReport { name, report: check(&inputs, h, f)? }))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_matches_central_differences() {
        for case in op_suite(7, 1e-5).unwrap() {
            assert!(case.report.max_rel_error < 1e-4, "{}: {:?}", case.name, case.report);
            assert!(case.report.checked > 0);
        }
    }

    #[test]
    fn relative_error_is_floored() {
        assert_eq!(relative_error(1e-9, 0.0), 1e-9 / REL_ERROR_FLOOR);
        assert_eq!(relative_error(2.0, 1.0), 0.5);
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        // Detaching one factor of x·x halves the analytic gradient.
        let x = Tensor::from_f64(&[1, 3], &[0.3, -0.7, 1.1]).unwrap();
        let r = check(&[x], 1e-5, |t, v| {
            let c = t.constant(t.value(v[0]).clone())?;
            let sq = t.mul(v[0], c)?;
            t.sum(sq)
        })
        .unwrap();
        assert!(r.max_rel_error > 0.4);
    }
}
