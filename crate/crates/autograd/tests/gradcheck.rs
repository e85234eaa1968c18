//! Every differentiable op checked against central finite differences in f64.

use eln_autograd::{Graph, Tensor, Var};

fn pseudo_random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let data = (0..n)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Builds a scalar from the inputs; checks d(scalar)/d(input) for all inputs.
fn check<F>(inputs: Vec<Tensor<f64>>, f: F)
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Var<'g, f64>,
{
    let eval = |xs: &[Tensor<f64>]| {
        let g = Graph::new();
        let vars: Vec<_> = xs.iter().map(|x| g.constant(x.clone())).collect();
        f(&g, &vars).value().item()
    };
    let g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|x| g.param(x.clone())).collect();
    let loss = f(&g, &vars);
    let grads = g.backward(loss).unwrap();
    let h = 1e-6;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
        for j in 0..x.len() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data()[j];
            let tol = 1e-6 * (1.0 + a.abs().max(numeric.abs()));
            assert!((a - numeric).abs() < tol, "input {i} coord {j}: analytic {a} vs numeric {numeric}");
        }
    }
}

/// Random fixed projection to a scalar so every output coordinate matters.
fn project<'g>(v: Var<'g, f64>, seed: u64) -> Var<'g, f64> {
    let w = pseudo_random(&v.shape(), seed);
    v.weighted_sum(&w).unwrap()
}

#[test]
fn conv2d_strided_padded() {
    check(
        vec![pseudo_random(&[2, 3, 7, 6], 1), pseudo_random(&[4, 3, 3, 3], 2), pseudo_random(&[4], 3)],
        |_, v| project(v[0].conv2d(v[1], Some(v[2]), 2, 1).unwrap(), 9),
    );
}

#[test]
fn conv2d_pointwise_without_bias() {
    check(vec![pseudo_random(&[2, 3, 4, 5], 4), pseudo_random(&[2, 3, 1, 1], 5)], |_, v| {
        project(v[0].conv2d(v[1], None, 1, 0).unwrap(), 10)
    });
}

#[test]
fn elementwise_chain() {
    check(vec![pseudo_random(&[2, 3, 2, 2], 6), pseudo_random(&[2, 3, 2, 2], 7)], |_, v| {
        let a = v[0].mul(v[1]).unwrap().add(v[0]).unwrap().sub(v[1].scale(0.3)).unwrap();
        let b = a.exp().add_scalar(1.0).ln();
        let c = v[1].sigmoid().add(v[0].log_sigmoid()).unwrap();
        project(b.add(c).unwrap().relu(), 11)
    });
}

#[test]
fn softmax_and_log_softmax() {
    check(vec![pseudo_random(&[2, 4, 2, 3], 8)], |_, v| {
        let a = v[0].softmax().unwrap();
        let b = v[0].scale(2.0).log_softmax().unwrap();
        project(a.add(b).unwrap(), 12)
    });
}

#[test]
fn select_channel_and_reductions() {
    check(vec![pseudo_random(&[2, 3, 2, 2], 13)], |_, v| {
        let idx = [0, 2, 1, 1, 2, 0, 0, 1];
        let picked = v[0].select_channel(&idx).unwrap();
        let per_item = picked.sum_per_item();
        project(per_item, 14).add(v[0].mean()).unwrap()
    });
}

#[test]
fn concat_both_axes() {
    check(vec![pseudo_random(&[2, 2, 3, 3], 15), pseudo_random(&[2, 1, 3, 3], 16)], |g, v| {
        let ch = g.concat(&[v[0], v[1]], 1).unwrap();
        let b = g.concat(&[ch, ch.scale(0.5)], 0).unwrap();
        project(b, 17)
    });
}

#[test]
fn bilinear_upsampling() {
    check(vec![pseudo_random(&[1, 2, 3, 4], 18)], |_, v| project(v[0].upsample_bilinear(7, 9).unwrap(), 19));
    check(vec![pseudo_random(&[1, 1, 4, 4], 20)], |_, v| project(v[0].upsample_bilinear(16, 16).unwrap(), 21));
}

#[test]
fn rows_matmul_normalize_gather_take() {
    check(vec![pseudo_random(&[2, 3, 2, 2], 22), pseudo_random(&[5, 3], 23)], |_, v| {
        let rows = v[0].nchw_to_rows().unwrap().row_normalize().unwrap();
        let picked = rows.gather_rows(&[0, 3, 3, 7]).unwrap();
        let other = v[1].row_normalize().unwrap();
        let sims = picked.matmul_nt(other).unwrap().exp();
        let sums = sims.row_sum().unwrap();
        let taken = sims.take(&[0, 6, 6, 19]).unwrap();
        project(taken, 24).add(project(sums.ln(), 25)).unwrap()
    });
}

#[test]
fn detached_inputs_receive_no_gradient() {
    let g = Graph::<f64>::new();
    let x = g.param(pseudo_random(&[3, 2], 30));
    let y = x.detach().row_normalize().unwrap().sum().add(x.sum()).unwrap();
    let grads = g.backward(y).unwrap();
    assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 1.0));
}

#[test]
fn unused_param_has_no_gradient() {
    let g = Graph::<f64>::new();
    let x = g.param(pseudo_random(&[3], 31));
    let unused = g.param(pseudo_random(&[3], 32));
    let grads = g.backward(x.sum()).unwrap();
    assert!(grads.get(unused).is_none());
}
