use super::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn conv_identity_kernel_is_identity() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::from_fn(&[1, 1, 3, 3], |i| i as f64 - 4.0));
    let w = tape.constant(Tensor::ones(&[1, 1, 1, 1]));
    let b = tape.constant(Tensor::zeros(&[1]));
    let y = tape.conv2d(x, w, b, 1, 0).unwrap();
    assert_eq!(*tape.value(y), *tape.value(x));
}

#[test]
fn conv_sums_channels() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::ones(&[1, 2, 2, 2]));
    let w = tape.constant(Tensor::ones(&[1, 2, 1, 1]));
    let b = tape.constant(Tensor::zeros(&[1]));
    let y = tape.conv2d(x, w, b, 1, 0).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 2.0));
}

#[test]
fn conv_rejects_bad_shapes() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::ones(&[1, 2, 4, 4]));
    let b = tape.constant(Tensor::zeros(&[1]));
    let even = tape.constant(Tensor::ones(&[1, 2, 2, 2]));
    assert!(tape.conv2d(x, even, b, 1, 0).is_err());
    let wrong_c = tape.constant(Tensor::ones(&[1, 3, 3, 3]));
    let err = tape.conv2d(x, wrong_c, b, 1, 1).unwrap_err().to_string();
    assert!(err.contains("channels"), "{err}");
    let w = tape.constant(Tensor::ones(&[1, 2, 3, 3]));
    assert!(tape.conv2d(x, w, b, 3, 1).is_err());
}

#[test]
fn conv_transpose_identity_and_size() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::from_fn(&[1, 1, 4, 4], |i| (i as f64).sin()));
    let mut k = Tensor::zeros(&[1, 1, 3, 3]);
    k.data_mut()[4] = 1.0;
    let w = tape.constant(k);
    let b = tape.constant(Tensor::zeros(&[1]));
    let y = tape.conv2d_transpose(x, w, b, 1, 1).unwrap();
    assert_eq!(*tape.value(y), *tape.value(x));

    let w4 = tape.constant(Tensor::ones(&[1, 2, 4, 4]));
    let b2 = tape.constant(Tensor::zeros(&[2]));
    let up = tape.conv2d_transpose(x, w4, b2, 2, 1).unwrap();
    assert_eq!(tape.shape(up), vec![1, 2, 8, 8]);
}

#[test]
fn activations_match_definitions() {
    let tape = Tape::new();
    let x = tape.constant(t(&[3], &[-1.0, 2.0, 0.0]));
    assert_eq!(tape.value(tape.relu(x)).data(), &[0.0, 2.0, 0.0]);
    assert_eq!(tape.value(tape.silu(x)).data()[2], 0.0);
}

#[test]
fn group_norm_constant_input_is_zero() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::full(&[1, 4, 2, 2], 3.0));
    let s = tape.constant(Tensor::ones(&[4]));
    let b = tape.constant(Tensor::zeros(&[4]));
    let y = tape.group_norm(x, 2, s, b).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    assert!(tape.group_norm(x, 3, s, b).is_err());
}

#[test]
fn group_norm_group_mean_equals_shift() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let tape = Tape::new();
    let x = tape.constant(Tensor::randn(&[2, 4, 3, 3], &mut rng));
    let s = tape.constant(t(&[4], &[2.0, 2.0, -0.5, -0.5]));
    let b = tape.constant(t(&[4], &[0.7, 0.7, -1.3, -1.3]));
    let y = tape.group_norm(x, 2, s, b).unwrap();
    let yv = tape.value(y);
    for (i, chunk) in yv.data().chunks(18).enumerate() {
        let want = if i % 2 == 0 { 0.7 } else { -1.3 };
        let mean = chunk.iter().sum::<f64>() / 18.0;
        assert!((mean - want).abs() < 1e-9);
    }
}

#[test]
fn attention_single_position() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let c = 3;
    let xs = Tensor::randn(&[1, c, 1, 1], &mut rng);
    let ws: Vec<Tensor> = (0..4).map(|_| Tensor::randn(&[c, c], &mut rng)).collect();
    let tape = Tape::new();
    let x = tape.constant(xs.clone());
    let v: Vec<Var> = ws.iter().map(|w| tape.constant(w.clone())).collect();
    let y = tape.self_attention(x, v[0], v[1], v[2], v[3]).unwrap();
    let mv = |m: &Tensor, u: &[f64]| -> Vec<f64> {
        (0..c).map(|i| (0..c).map(|j| m.data()[i * c + j] * u[j]).sum()).collect()
    };
    let want: Vec<f64> = mv(&ws[3], &mv(&ws[2], xs.data()))
        .iter()
        .zip(xs.data())
        .map(|(a, b)| a + b)
        .collect();
    for (a, b) in tape.value(y).data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn attention_is_permutation_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let c = 2;
    let xs = Tensor::randn(&[1, c, 2, 2], &mut rng);
    let ws: Vec<Tensor> = (0..4).map(|_| Tensor::randn(&[c, c], &mut rng)).collect();
    let perm = [2usize, 0, 3, 1];
    let permute = |x: &Tensor| {
        Tensor::from_fn(x.shape(), |i| {
            let (ch, p) = (i / 4, i % 4);
            x.data()[ch * 4 + perm[p]]
        })
    };
    let run = |x: Tensor| {
        let tape = Tape::new();
        let xv = tape.constant(x);
        let v: Vec<Var> = ws.iter().map(|w| tape.constant(w.clone())).collect();
        let y = tape.self_attention(xv, v[0], v[1], v[2], v[3]).unwrap();
        let out = tape.value(y).clone();
        out
    };
    let a = permute(&run(xs.clone()));
    let b = run(permute(&xs));
    assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
}

#[test]
fn backward_simple_functions() {
    let tape = Tape::new();
    let xs = t(&[3], &[1.0, -2.0, 0.5]);
    let x = tape.input(xs.clone());
    let sq = tape.mul(x, x).unwrap();
    let g = tape.backward(tape.sum(sq)).unwrap();
    assert_eq!(*g.wrt(x).unwrap(), xs.scale(2.0));

    let tape = Tape::new();
    let x = tape.input(xs);
    let g = tape.backward(tape.sum(x)).unwrap();
    assert_eq!(*g.wrt(x).unwrap(), Tensor::ones(&[3]));
}

#[test]
fn backward_relu_of_matrix_product() {
    // A = [[1, -2], [3, 1]], x = [1, 1]: A x = [-1, 4]; only row 2 is active.
    let tape = Tape::new();
    let x = tape.input(t(&[1, 2], &[1.0, 1.0]));
    let a = tape.constant(t(&[2, 2], &[1.0, -2.0, 3.0, 1.0]));
    let b = tape.constant(Tensor::zeros(&[2]));
    let h = tape.linear(x, a, b).unwrap();
    let loss = tape.sum(tape.relu(h));
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.wrt(x).unwrap().data(), &[3.0, 1.0]);
}

#[test]
fn non_scalar_loss_rejected() {
    let tape = Tape::new();
    let x = tape.input(Tensor::ones(&[2]));
    assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
}

#[test]
fn frozen_parameters_get_no_gradient() {
    let mut store = ParamStore::new();
    let a = store.add("a", Tensor::ones(&[2]), true).unwrap();
    let f = store.add("f", Tensor::ones(&[2]), false).unwrap();
    let tape = Tape::new();
    let (va, vf) = (tape.param(&store, a), tape.param(&store, f));
    assert_eq!(tape.param(&store, a), va);
    let loss = tape.sum(tape.mul(va, vf).unwrap());
    let g = tape.backward(loss).unwrap();
    assert!(g.param(a).is_some());
    assert!(g.param(f).is_none());
    assert_eq!(g.params().count(), 1);
}

#[test]
fn inference_tape_records_no_gradients() {
    let tape = Tape::inference();
    let x = tape.input(Tensor::ones(&[2]));
    let g = tape.backward(tape.sum(x)).unwrap();
    assert!(g.wrt(x).is_none());
}
