use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::check;
use super::layers::Block;
use super::*;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// Projects any node to a scalar through fixed random weights so every
/// output element gets a distinct upstream gradient.
fn weighted_sum(g: &mut Graph, x: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(&mut rng, g.shape(x));
    let w = g.constant(w);
    let p = g.mul(x, w);
    g.sum(p)
}

fn assert_grad(inputs: &[Tensor], build: impl Fn(&mut Graph, &[Var]) -> Var) {
    let r = check(inputs, 1e-5, build);
    assert!(r.max_rel_err < 1e-4, "max rel err {}", r.max_rel_err);
}

#[test]
fn elementwise_ops_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&mut rng, &[3, 4]);
    let b = rand_tensor(&mut rng, &[3, 4]);
    let pos = a.map(|v| v.abs() + 0.5);
    assert_grad(&[a.clone(), b.clone()], |g, v| {
        let s = g.add(v[0], v[1]);
        let d = g.sub(s, v[1]);
        let m = g.mul(d, v[1]);
        weighted_sum(g, m, 7)
    });
    assert_grad(&[a.clone()], |g, v| {
        let x = g.gelu(v[0]);
        let y = g.sigmoid(x);
        let z = g.exp(y);
        let w = g.square(z);
        weighted_sum(g, w, 8)
    });
    assert_grad(&[pos], |g, v| {
        let l = g.log(v[0]);
        weighted_sum(g, l, 9)
    });
    assert_grad(&[a.clone()], |g, v| {
        let r = g.relu(v[0]);
        let q = g.abs(v[0]);
        let s = g.add(r, q);
        let s = g.scale(s, 1.7);
        let s = g.offset(s, 0.3);
        weighted_sum(g, s, 10)
    });
}

#[test]
fn broadcast_and_scalar_ops_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = rand_tensor(&mut rng, &[2, 3, 4]);
    let b = rand_tensor(&mut rng, &[4]);
    let s = rand_tensor(&mut rng, &[1]);
    assert_grad(&[a, b, s], |g, v| {
        let x = g.add_suffix(v[0], v[1]);
        let x = g.mul_suffix(x, v[1]);
        let x = g.mul_scalar(x, v[2]);
        let x = g.add_scalar(x, v[2]);
        weighted_sum(g, x, 11)
    });
}

#[test]
fn matmul_gradcheck_shared_and_batched() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = rand_tensor(&mut rng, &[2, 3, 4]);
    let w = rand_tensor(&mut rng, &[4, 5]);
    let bb = rand_tensor(&mut rng, &[2, 4, 5]);
    assert_grad(&[a.clone(), w], |g, v| {
        let y = g.matmul(v[0], v[1]);
        weighted_sum(g, y, 12)
    });
    assert_grad(&[a, bb], |g, v| {
        let y = g.matmul(v[0], v[1]);
        let y = g.transpose_last(y);
        weighted_sum(g, y, 13)
    });
}

#[test]
fn shape_ops_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = rand_tensor(&mut rng, &[2, 3, 2, 4]);
    let b = rand_tensor(&mut rng, &[5, 3]);
    let c = rand_tensor(&mut rng, &[5, 2]);
    assert_grad(&[a], |g, v| {
        let x = g.swap_axes12(v[0]);
        let x = g.reshape(x, &[4, 3, 4]);
        let x = g.narrow_last(x, 1, 2);
        weighted_sum(g, x, 14)
    });
    assert_grad(&[b.clone(), c], |g, v| {
        let x = g.concat_last(&[v[0], v[1], v[0]]);
        let y = g.select0(x, &[4, 0, 0, 2]);
        let z = g.concat0(&[y, x]);
        weighted_sum(g, z, 15)
    });
    assert_grad(&[b], |g, v| {
        let x = g.sum_last(v[0]);
        let y = g.mean(v[0]);
        let x = g.add_scalar(x, y);
        weighted_sum(g, x, 16)
    });
}

#[test]
fn softmax_family_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = rand_tensor(&mut rng, &[2, 3, 4]);
    assert_grad(&[a.clone()], |g, v| {
        let x = g.softmax(v[0]);
        weighted_sum(g, x, 17)
    });
    assert_grad(&[a.clone()], |g, v| {
        let x = g.log_softmax(v[0]);
        weighted_sum(g, x, 18)
    });
    let mask = KeyMask::new(
        vec![true, true, false, true, true, false, false, false],
        4,
    );
    assert_grad(&[a], |g, v| {
        let x = g.masked_softmax(v[0], &mask);
        weighted_sum(g, x, 19)
    });
}

#[test]
fn masked_softmax_zeroes_invalid_keys() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(&[1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let mask = KeyMask::new(vec![true, false, true], 3);
    let y = g.masked_softmax(x, &mask);
    let v = g.value(y).data();
    assert_eq!(v[1], 0.0);
    assert_eq!(v[4], 0.0);
    assert!((v[0] + v[2] - 1.0).abs() < 1e-15);
}

#[test]
fn layer_norm_and_normalize_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = rand_tensor(&mut rng, &[3, 5]);
    let gamma = rand_tensor(&mut rng, &[5]);
    let beta = rand_tensor(&mut rng, &[5]);
    assert_grad(&[a.clone(), gamma, beta], |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2]);
        weighted_sum(g, y, 20)
    });
    assert_grad(&[a], |g, v| {
        let y = g.l2_normalize(v[0]);
        weighted_sum(g, y, 21)
    });
}

#[test]
fn blend_and_total_variation_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = rand_tensor(&mut rng, &[3, 4, 2]);
    let m = rand_tensor(&mut rng, &[3, 4]);
    let p = rand_tensor(&mut rng, &[3, 4, 2]);
    assert_grad(&[x, m.clone(), p], |g, v| {
        let y = g.blend(v[0], v[1], v[2]);
        weighted_sum(g, y, 22)
    });
    assert_grad(&[m], |g, v| g.total_variation(v[0]));
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::new();
    let a = g.leaf(Tensor::new(&[2], vec![1.0, 2.0]));
    let c = g.constant(Tensor::new(&[2], vec![3.0, 4.0]));
    let d = g.detach(a);
    let y = g.mul(a, c);
    let y = g.mul(y, d);
    let s = g.sum(y);
    let grads = g.backward(s);
    assert!(grads.get(c).is_none());
    assert!(grads.get(d).is_none());
    assert_eq!(grads.get(a).unwrap().data(), &[3.0, 8.0]);
}

#[test]
fn transformer_block_gradcheck_through_ctx() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::new();
    let block = Block::new(&mut store, "b", 4, 2, 2, &mut rng);
    let x = rand_tensor(&mut rng, &[2, 3, 4]);
    let mask = KeyMask::new(vec![true, true, false, true, true, true], 3);

    let loss = |store: &ParamStore, x: &Tensor| -> f64 {
        let mut ctx = Ctx::eval(store);
        let xv = ctx.constant(x.clone());
        let y = block.forward(&mut ctx, xv, Some(&mask));
        let s = weighted_sum(&mut ctx.g, y, 30);
        ctx.g.value(s).item()
    };

    let mut drop_rng = ChaCha8Rng::seed_from_u64(0);
    let mut ctx = Ctx::train(&store, 0.0, &mut drop_rng);
    let xv = ctx.constant(x.clone());
    let y = block.forward(&mut ctx, xv, Some(&mask));
    let s = weighted_sum(&mut ctx.g, y, 30);
    let grads = ctx.param_grads(s);
    assert_eq!(grads.len(), block.params().len());

    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (id, analytic) in grads {
        for j in 0..analytic.numel() {
            let mut plus = store.clone();
            plus.get_mut(id).data_mut()[j] += h;
            let mut minus = store.clone();
            minus.get_mut(id).data_mut()[j] -= h;
            let num = (loss(&plus, &x) - loss(&minus, &x)) / (2.0 * h);
            let a = analytic.data()[j];
            worst = worst.max((a - num).abs() / a.abs().max(num.abs()).max(1e-6));
        }
    }
    assert!(worst < 1e-4, "block rel err {worst}");
}

#[test]
fn dropout_is_identity_in_eval_and_seeded_in_train() {
    let store = ParamStore::new();
    let x = Tensor::full(&[4, 8], 1.0);
    let mut ctx = Ctx::eval(&store);
    let v = ctx.constant(x.clone());
    let y = ctx.dropout(v);
    assert_eq!(ctx.g.value(y), &x);

    let run = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ctx = Ctx::train(&store, 0.5, &mut rng);
        let v = ctx.constant(x.clone());
        let y = ctx.dropout(v);
        ctx.g.value(y).clone()
    };
    assert_eq!(run(3), run(3));
    assert!(run(3).data().iter().any(|&v| v == 0.0));
}
