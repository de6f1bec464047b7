// Temporary timing probe (removed before release).
use linetween::tensor::{conv2d, conv2d_input_grad, conv2d_weight_grad, Tensor};
use std::time::Instant;

#[test]
#[ignore]
fn conv_timing() {
    let (h, w) = (128usize, 128usize);
    let x1 = Tensor::from_fn(&[1, h, w], |i| (i % 7) as f64 * 0.1);
    let w1 = Tensor::from_fn(&[16, 1, 3, 3], |i| (i % 5) as f64 * 0.1 - 0.2);
    let b1 = Tensor::zeros(&[16]);
    let x2 = Tensor::from_fn(&[16, h, w], |i| (i % 7) as f64 * 0.1);
    let w2 = Tensor::from_fn(&[32, 16, 3, 3], |i| (i % 5) as f64 * 0.1 - 0.2);
    let b2 = Tensor::zeros(&[32]);
    let x3 = Tensor::from_fn(&[32, h, w], |i| (i % 7) as f64 * 0.1);
    let w3 = Tensor::from_fn(&[64, 32, 3, 3], |i| (i % 5) as f64 * 0.1 - 0.2);
    let b3 = Tensor::zeros(&[64]);
    for (name, x, wt, b) in [("l1", &x1, &w1, &b1), ("l2", &x2, &w2, &b2), ("l3", &x3, &w3, &b3)] {
        let t = Instant::now();
        let out = conv2d(x, wt, b);
        let fwd = t.elapsed();
        let t = Instant::now();
        let _ = conv2d_input_grad(&out, wt);
        let ig = t.elapsed();
        let t = Instant::now();
        let _ = conv2d_weight_grad(&out, x, 3);
        let wg = t.elapsed();
        println!("{name}: fwd {fwd:.1?} input_grad {ig:.1?} weight_grad {wg:.1?}");
    }
}

#[test]
#[ignore]
fn sinkhorn_timing() {
    use linetween::correspond::sinkhorn_ot;
    let scores = Tensor::from_fn(&[67, 67], |i| ((i * 31) % 17) as f64 * 0.1 - 0.8);
    let t = Instant::now();
    for _ in 0..5 {
        let _ = sinkhorn_ot(&scores, 1.0, 100);
    }
    println!("plain sinkhorn 100 iters: {:.1?}", t.elapsed() / 5);
}
