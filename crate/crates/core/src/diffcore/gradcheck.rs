use std::sync::Arc;

use rand::Rng;

use super::graph::{FixedKernel, Graph, NodeId};
use super::ssim::SsimParams;
use super::tensor::{Shape, Tensor};
use crate::error::Result;
use crate::fft::Fft2d;
use crate::imgcore::Seed;

/// Appends `mean(out ⊙ r)` with a fixed random `r` in [0.5, 1], turning
/// any node into a scalar whose gradient exercises every output element. Positive weights
/// keep broadcast gradients (sums over channels) clear of cancellation.
pub fn project_to_scalar(graph: &mut Graph<f64>, out: NodeId, seed: Seed) -> Result<NodeId> {
    let shape = graph.shape(out);
    let mut rng = seed.rng("projection", out.index() as u64);
    let r = Tensor::from_vec(
        shape,
        (0..shape.iter().product())
            .map(|_| rng.random_range(0.5..1.0))
            .collect(),
    )?;
    let c = graph.constant(r);
    let prod = graph.mul(out, c)?;
    Ok(graph.mean(prod))
}

/// Max over every parameter coordinate of
/// `|analytic − central| / max(|analytic|, |central|, 1e-12)`.
pub fn grad_check(
    graph: &Graph<f64>,
    loss: NodeId,
    inputs: &[Tensor<f64>],
    params: &[Tensor<f64>],
    h: f64,
) -> Result<f64> {
    let eval = graph.evaluate(inputs, params)?;
    let analytic = graph.backward(&eval, loss)?;
    let mut worst = 0.0f64;
    let mut p = params.to_vec();
    for (pi, grad) in analytic.iter().enumerate() {
        for j in 0..grad.len() {
            let orig = p[pi].data[j];
            p[pi].data[j] = orig + h;
            let up = graph.evaluate(inputs, &p)?.value(loss).item();
            p[pi].data[j] = orig - h;
            let down = graph.evaluate(inputs, &p)?.value(loss).item();
            p[pi].data[j] = orig;
            let central = (up - down) / (2.0 * h);
            let a = grad.data[j];
            let rel = (a - central).abs() / a.abs().max(central.abs()).max(1e-12);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// Names accepted by [`check_primitive`], one per graph primitive.
pub const PRIMITIVES: [&str; 14] = [
    "conv2d",
    "add",
    "mul",
    "relu",
    "max_pool2",
    "upsample2",
    "concat",
    "fft_conv",
    "bin_mean",
    "mean",
    "ssim",
    "affine",
    "total_variation",
    "mse",
];

/// Values spaced well apart and away from zero, so that no finite-difference
/// step crosses a relu kink, a max-pool tie or a zero TV difference.
pub fn kink_free(shape: Shape, rng: &mut impl Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n)
        .map(|k| (k as f64 + 0.25) / n as f64 * 2.0 - 1.0 + rng.random_range(-0.25..0.25) / n as f64)
        .collect();
    for i in (1..n).rev() {
        vals.swap(i, rng.random_range(0..=i));
    }
    Tensor { shape, data: vals }
}

/// High values on one checkerboard colour, low on the other. Every pixel then
/// differs in sign from all its neighbours, so no TV derivative is exactly zero
/// (where the relative error would compare 0 against pure rounding noise).
pub fn checkerboard(shape: Shape, rng: &mut impl Rng) -> Tensor<f64> {
    let [b, c, h, w] = shape;
    let mut data = Vec::with_capacity(b * c * h * w);
    for _ in 0..b * c {
        for y in 0..h {
            for x in 0..w {
                let m: f64 = rng.random_range(0.2..1.0);
                data.push(if (x + y) % 2 == 0 { m } else { -m });
            }
        }
    }
    Tensor { shape, data }
}

fn uniform(shape: Shape, lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor<f64> {
    Tensor {
        shape,
        data: (0..shape.iter().product()).map(|_| rng.random_range(lo..hi)).collect(),
    }
}

fn random_kernel(w: usize, h: usize, rng: &mut impl Rng) -> Result<Arc<FixedKernel<f64>>> {
    let taps: Vec<f64> = (0..w * h).map(|_| rng.random_range(-1.0..1.0)).collect();
    let transfer = Fft2d::<f64>::new(w, h).forward_real(&taps);
    Ok(Arc::new(FixedKernel::new(w, h, transfer)?))
}

/// Builds the single-primitive graph `name` at a random point and returns its
/// gradient-check error with step `h`.
pub fn check_primitive(name: &str, seed: Seed, h: f64) -> Result<f64> {
    let mut rng = seed.rng("gradcheck", 0);
    let mut g = Graph::<f64>::new();
    let mut params = Vec::new();
    let mut add_param = |g: &mut Graph<f64>, t: Tensor<f64>| {
        let id = g.param(format!("p{}", params.len()), t.shape);
        params.push(t);
        id
    };
    let s5 = [1, 2, 5, 5];
    let out = match name {
        "conv2d" => {
            let x = add_param(&mut g, uniform(s5, -1.0, 1.0, &mut rng));
            let w = add_param(&mut g, uniform([3, 2, 3, 3], -1.0, 1.0, &mut rng));
            let b = add_param(&mut g, uniform([3, 1, 1, 1], -1.0, 1.0, &mut rng));
            g.conv2d(x, w, b)?
        }
        "add" | "mul" => {
            let a = add_param(&mut g, uniform(s5, -1.0, 1.0, &mut rng));
            let b = add_param(&mut g, uniform([1, 1, 5, 5], -1.0, 1.0, &mut rng));
            if name == "add" {
                g.add(a, b)?
            } else {
                g.mul(a, b)?
            }
        }
        "relu" => {
            let x = add_param(&mut g, kink_free(s5, &mut rng));
            g.relu(x)
        }
        "max_pool2" => {
            let x = add_param(&mut g, kink_free([1, 2, 6, 6], &mut rng));
            g.max_pool2(x)?
        }
        "upsample2" => {
            let x = add_param(&mut g, uniform(s5, -1.0, 1.0, &mut rng));
            g.upsample2(x)
        }
        "concat" => {
            let a = add_param(&mut g, uniform([1, 1, 5, 5], -1.0, 1.0, &mut rng));
            let b = add_param(&mut g, uniform(s5, -1.0, 1.0, &mut rng));
            g.concat(a, b)?
        }
        "fft_conv" => {
            let x = add_param(&mut g, uniform(s5, -1.0, 1.0, &mut rng));
            g.fft_conv(x, random_kernel(5, 5, &mut rng)?)?
        }
        "bin_mean" => {
            let x = add_param(&mut g, uniform([1, 2, 6, 6], -1.0, 1.0, &mut rng));
            g.bin_mean(x, 2)?
        }
        "mean" => {
            let x = add_param(&mut g, uniform(s5, -1.0, 1.0, &mut rng));
            let m = g.mean(x);
            return grad_check(&g, m, &[], &params, h);
        }
        "ssim" => {
            // a 5×5 window keeps every pixel's weight far above rounding noise
            let params_5 = SsimParams {
                window: 5,
                ..SsimParams::default()
            };
            let x = add_param(&mut g, uniform(s5, 0.0, 1.0, &mut rng));
            let y = add_param(&mut g, uniform(s5, 0.0, 1.0, &mut rng));
            let l = g.ssim(x, y, params_5)?;
            return grad_check(&g, l, &[], &params, h);
        }
        "affine" => {
            let x = add_param(&mut g, uniform(s5, -1.0, 1.0, &mut rng));
            let (a, b) = (rng.random_range(-2.0..2.0), rng.random_range(-1.0..1.0));
            g.affine(x, a, b)
        }
        "total_variation" => {
            let x = add_param(&mut g, checkerboard(s5, &mut rng));
            let l = g.total_variation(x);
            return grad_check(&g, l, &[], &params, h);
        }
        "mse" => {
            let a = add_param(&mut g, uniform(s5, -1.0, 1.0, &mut rng));
            let b = add_param(&mut g, uniform(s5, -1.0, 1.0, &mut rng));
            let l = g.mse(a, b)?;
            return grad_check(&g, l, &[], &params, h);
        }
        other => {
            return Err(crate::Error::invalid(format!(
                "unknown primitive `{other}` (expected one of {})",
                PRIMITIVES.join(", ")
            )))
        }
    };
    let loss = project_to_scalar(&mut g, out, seed)?;
    grad_check(&g, loss, &[], &params, h)
}

/// Three primitives drawn at random and chained, then checked end to end.
/// Returns the chain's op names and the error.
pub fn check_composition(seed: Seed, h: f64) -> Result<(Vec<&'static str>, f64)> {
    let mut rng = seed.rng("composition", 0);
    let mut g = Graph::<f64>::new();
    let mut params = vec![kink_free([1, 2, 8, 8], &mut rng)];
    let mut cur = g.param("x", params[0].shape);
    let mut chain = Vec::new();
    while chain.len() < 3 {
        let [_, c, hh, ww] = g.shape(cur);
        let op = ["conv2d", "relu", "upsample2", "max_pool2", "fft_conv", "affine", "bin_mean"][rng.random_range(0..7)];
        let even = hh % 2 == 0 && ww % 2 == 0 && hh >= 4;
        cur = match op {
            "conv2d" => {
                let w = uniform([2, c, 3, 3], -1.0, 1.0, &mut rng);
                let b = uniform([2, 1, 1, 1], -1.0, 1.0, &mut rng);
                let wi = g.param(format!("w{}", chain.len()), w.shape);
                let bi = g.param(format!("b{}", chain.len()), b.shape);
                params.push(w);
                params.push(b);
                g.conv2d(cur, wi, bi)?
            }
            "relu" => g.relu(cur),
            "upsample2" if hh <= 16 => g.upsample2(cur),
            "max_pool2" if even => g.max_pool2(cur)?,
            "fft_conv" => g.fft_conv(cur, random_kernel(ww, hh, &mut rng)?)?,
            "affine" => g.affine(cur, rng.random_range(0.5..2.0), rng.random_range(-0.5..0.5)),
            "bin_mean" if even => g.bin_mean(cur, 2)?,
            _ => continue,
        };
        chain.push(op);
    }
    let loss = project_to_scalar(&mut g, cur, seed)?;
    Ok((chain, grad_check(&g, loss, &[], &params, h)?))
}
