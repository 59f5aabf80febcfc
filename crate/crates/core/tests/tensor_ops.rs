use localness::tensor::{grad_check, TensorError};
use localness::{Tape, Tensor, Var};
use proptest::prelude::*;

const OP_TOLERANCE: f64 = 1e-6;
const H: f64 = 1e-5;

fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0..2.0f64, n)
}

fn mat(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
    Tensor::new(vec![rows, cols], data).unwrap()
}

/// `sum(w ⊙ out)` with fixed non-uniform weights so every output entry matters differently.
fn weighted_sum(tape: &mut Tape, out: Var) -> Result<Var, TensorError> {
    let shape = tape.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|k| 0.5 + ((k * 7) % 11) as f64 / 10.0).collect();
    let w = tape.constant(Tensor::new(shape, w)?);
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

fn check<F>(params: Vec<(&str, Tensor)>, f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let params: Vec<(String, Tensor)> = params.into_iter().map(|(n, t)| (n.to_string(), t)).collect();
    let report = grad_check(&params, H, OP_TOLERANCE, |tape: &mut Tape, v: &[Var]| {
        let out = f(tape, v)?;
        weighted_sum(tape, out)
    })
    .unwrap();
    report.max_rel_error()
}

macro_rules! assert_grad {
    ($err:expr) => {{
        let e = $err;
        prop_assert!(e < OP_TOLERANCE, "max relative error {e:e}");
    }};
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_rows_are_stochastic(rows in 1usize..6, cols in 1usize..9, seed in values(48), scale in 0.1..30.0f64) {
        let data: Vec<f64> = seed.iter().cycle().take(rows * cols).map(|x| x * scale).collect();
        let mut tape = Tape::new();
        let x = tape.constant(mat(rows, cols, data));
        let s = tape.rowwise_softmax(x, None).unwrap();
        let t = tape.value(s);
        for i in 0..rows {
            let total: f64 = t.row(i).iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-10, "row {i} sums to {total}");
            prop_assert!(t.row(i).iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn masked_softmax_rows_are_stochastic(cols in 2usize..9, data in values(8), mask_bits in prop::collection::vec(any::<bool>(), 8)) {
        let mut mask: Vec<bool> = mask_bits[..cols].to_vec();
        mask[0] = true;
        let mut tape = Tape::new();
        let x = tape.constant(mat(1, cols, data[..cols].to_vec()));
        let s = tape.rowwise_softmax(x, Some(&mask)).unwrap();
        let row = tape.data(s);
        let total: f64 = row.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-10);
        for (j, &keep) in mask.iter().enumerate() {
            if !keep {
                prop_assert_eq!(row[j], 0.0);
            }
        }
    }

    #[test]
    fn softmax_is_shift_invariant(cols in 1usize..9, data in values(8), c in -50.0..50.0f64) {
        let row = data[..cols].to_vec();
        let shifted: Vec<f64> = row.iter().map(|x| x + c).collect();
        let mut tape = Tape::new();
        let a = tape.constant(mat(1, cols, row));
        let b = tape.constant(mat(1, cols, shifted));
        let sa = tape.rowwise_softmax(a, None).unwrap();
        let sb = tape.rowwise_softmax(b, None).unwrap();
        for (x, y) in tape.data(sa).iter().zip(tape.data(sb)) {
            prop_assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }

    #[test]
    fn grad_matmul_family(a in values(12), b in values(12), v in values(4)) {
        assert_grad!(check(vec![("a", mat(3, 4, a.clone())), ("b", mat(4, 3, b.clone()))], |t, p| t.matmul(p[0], p[1])));
        assert_grad!(check(vec![("a", mat(3, 4, a.clone())), ("b", mat(3, 4, b.clone()))], |t, p| t.matmul_nt(p[0], p[1])));
        assert_grad!(check(vec![("a", mat(3, 4, a.clone()))], |t, p| t.transpose(p[0])));
        assert_grad!(check(vec![("m", mat(3, 4, a.clone())), ("v", Tensor::vector(v.clone()))], |t, p| t.matvec(p[0], p[1])));
        assert_grad!(check(vec![("a", Tensor::vector(a[..4].to_vec())), ("b", Tensor::vector(v.clone()))], |t, p| t.dot(p[0], p[1])));
    }

    #[test]
    fn grad_elementwise(a in values(6), b in values(6), row in values(3), c in -3.0..3.0f64) {
        assert_grad!(check(vec![("a", mat(2, 3, a.clone())), ("b", mat(2, 3, b.clone()))], |t, p| t.add(p[0], p[1])));
        assert_grad!(check(vec![("a", mat(2, 3, a.clone())), ("b", mat(2, 3, b.clone()))], |t, p| t.sub(p[0], p[1])));
        assert_grad!(check(vec![("a", mat(2, 3, a.clone())), ("b", mat(2, 3, b.clone()))], |t, p| t.mul(p[0], p[1])));
        assert_grad!(check(vec![("x", mat(2, 3, a.clone())), ("r", Tensor::vector(row.clone()))], |t, p| t.add_row_broadcast(p[0], p[1])));
        assert_grad!(check(vec![("a", mat(2, 3, a.clone()))], |t, p| Ok(t.scale(p[0], c))));
        assert_grad!(check(vec![("a", mat(2, 3, a.clone()))], |t, p| Ok(t.tanh(p[0]))));
        assert_grad!(check(vec![("a", mat(2, 3, a.clone()))], |t, p| Ok(t.sigmoid(p[0]))));
    }

    #[test]
    fn grad_relu_away_from_kink(a in prop::collection::vec(prop_oneof![-2.0..-1e-3f64, 1e-3..2.0f64], 6)) {
        assert_grad!(check(vec![("a", mat(2, 3, a))], |t, p| Ok(t.relu(p[0]))));
    }

    #[test]
    fn grad_reductions(a in values(12), s in -2.0..2.0f64) {
        assert_grad!(check(vec![("a", mat(3, 4, a.clone()))], |t, p| Ok(t.sum(p[0]))));
        assert_grad!(check(vec![("a", mat(3, 4, a.clone()))], |t, p| t.mean_rows(p[0])));
        assert_grad!(check(vec![("s", Tensor::vector(vec![s]))], |t, p| t.broadcast(p[0], 4)));
    }

    #[test]
    fn grad_softmax(a in values(12), mask_bits in prop::collection::vec(any::<bool>(), 12)) {
        assert_grad!(check(vec![("a", mat(3, 4, a.clone()))], |t, p| t.rowwise_softmax(p[0], None)));
        let mut mask = mask_bits;
        for i in 0..3 {
            mask[i * 4 + i] = true;
        }
        assert_grad!(check(vec![("a", mat(3, 4, a))], move |t, p| t.rowwise_softmax(p[0], Some(&mask))));
    }

    #[test]
    fn grad_layer_norm(x in values(12), g in values(4), b in values(4)) {
        assert_grad!(check(
            vec![("x", mat(3, 4, x)), ("g", Tensor::vector(g)), ("b", Tensor::vector(b))],
            |t, p| t.layer_norm(p[0], p[1], p[2], 1e-6),
        ));
    }

    #[test]
    fn grad_structural(a in values(12), b in values(12)) {
        assert_grad!(check(vec![("a", mat(3, 4, a.clone()))], |t, p| t.slice_rows(p[0], 1, 2)));
        assert_grad!(check(vec![("a", mat(3, 4, a.clone()))], |t, p| t.slice_cols(p[0], 1, 2)));
        assert_grad!(check(vec![("a", mat(3, 4, a.clone())), ("b", mat(3, 4, b.clone()))], |t, p| t.concat_rows(&[p[0], p[1]])));
        assert_grad!(check(vec![("a", mat(3, 4, a.clone())), ("b", mat(3, 4, b.clone()))], |t, p| t.concat_cols(&[p[0], p[1]])));
        assert_grad!(check(vec![("e", mat(3, 4, a))], |t, p| t.gather_rows(p[0], &[2, 0, 2, 1])));
    }

    #[test]
    fn grad_gaussian_bias(p in prop::collection::vec(0.1..4.9f64, 3), d in prop::collection::vec(0.5..5.0f64, 3)) {
        assert_grad!(check(
            vec![("p", Tensor::vector(p)), ("d", Tensor::vector(d))],
            |t, v| t.gaussian_bias(v[0], v[1], 5, 1e-3, None),
        ));
    }

    #[test]
    fn grad_cross_entropy(logits in values(12), targets in prop::collection::vec(0usize..4, 3), skip in 0usize..4) {
        let targets: Vec<Option<usize>> = targets.iter().enumerate().map(|(i, &t)| (i != skip).then_some(t)).collect();
        let params = vec![("logits".to_string(), mat(3, 4, logits))];
        let report = grad_check(&params, H, OP_TOLERANCE, |t: &mut Tape, v: &[Var]| t.cross_entropy(v[0], &targets)).unwrap();
        assert_grad!(report.max_rel_error());
    }
}

#[test]
fn tape_is_deterministic() {
    let run = || {
        let mut tape = Tape::new();
        let a = tape.param(mat(2, 3, vec![0.3, -1.2, 0.7, 2.0, 0.1, -0.4]));
        let b = tape.param(mat(3, 2, vec![1.1, 0.2, -0.5, 0.9, 0.4, -1.3]));
        let c = tape.matmul(a, b).unwrap();
        let s = tape.rowwise_softmax(c, None).unwrap();
        let l = tape.sum(s);
        let l = tape.tanh(l);
        tape.backward(l).unwrap();
        (tape.data(s).to_vec(), tape.grad(a).unwrap().to_vec())
    };
    let (x, gx) = run();
    let (y, gy) = run();
    assert_eq!(x.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), y.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(gx.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), gy.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}
