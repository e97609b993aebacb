//! Finite-difference gradient suite over every layer and the three networks
//! at toy shapes, in 64-bit arithmetic.

use glcn_tensor::gradcheck::{check_gradients, relative_error, GradCheckReport};
use glcn_tensor::{Graph, NormMode, Padding, Tensor, Var};
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::agg::{AggNet, AggNetConfig};
use crate::context::{ContextNet, ContextNetConfig};
use crate::error::Result;
use crate::local::{LocalNet, LocalNetConfig};
use crate::maps::MapSelection;
use crate::nn::{Mode, Module};
use crate::rng::stream;

pub const GRAD_STEP: f64 = 1e-5;
pub const GRAD_TOLERANCE: f64 = 1e-4;
/// Perturbed coordinates per parameter tensor in the network checks.
const NETWORK_COORDS: usize = 12;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCase {
    pub name: String,
    pub report: GradCheckReport,
}

impl GradCase {
    pub fn passes(&self) -> bool {
        self.report.passes(GRAD_TOLERANCE)
    }
}

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = stream(seed, &[]);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()).expect("shape")
}

/// Dot product with a fixed random tensor, so every output element matters.
fn project(g: &mut Graph<f64>, v: Var, seed: u64) -> Result<Var> {
    let shape = g.value(v).shape().to_vec();
    let w = g.input(random(&shape, seed));
    let p = g.mul(v, w)?;
    Ok(g.sum(p))
}

fn case<F>(name: &str, inputs: &[Tensor<f64>], f: F) -> Result<GradCase>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, glcn_tensor::TensorError>,
{
    Ok(GradCase {
        name: name.into(),
        report: check_gradients(inputs, GRAD_STEP, None, f)?,
    })
}

/// Every differentiable operation, checked with respect to all its inputs.
pub fn layer_cases() -> Result<Vec<GradCase>> {
    let tp = |e: crate::error::Error| glcn_tensor::TensorError::InvalidArgument {
        op: "suite",
        reason: e.to_string(),
    };
    let proj = move |g: &mut Graph<f64>, v: Var, s: u64| project(g, v, s).map_err(tp);
    let mut out = Vec::new();
    for (name, padding) in [("conv2d same", Padding::Same), ("conv2d valid", Padding::Valid)] {
        out.push(case(
            name,
            &[random(&[2, 5, 4, 2], 1), random(&[3, 3, 2, 3], 2), random(&[3], 3)],
            move |g, v| {
                let y = g.conv2d(v[0], v[1], v[2], padding)?;
                proj(g, y, 4)
            },
        )?);
    }
    out.push(case("dense", &[random(&[3, 4], 5), random(&[4, 2], 6), random(&[2], 7)], |g, v| {
        let y = g.dense(v[0], v[1], v[2])?;
        proj(g, y, 8)
    })?);
    out.push(case(
        "batch norm (train)",
        &[random(&[3, 2, 2, 2], 9), random(&[2], 10), random(&[2], 11)],
        |g, v| {
            let y = g.batch_norm("bn", v[0], v[1], v[2], NormMode::Train, 1e-5)?;
            proj(g, y, 12)
        },
    )?);
    out.push(case(
        "batch norm (eval)",
        &[random(&[3, 2, 2, 2], 13), random(&[2], 14), random(&[2], 15)],
        |g, v| {
            let y = g.batch_norm(
                "bn",
                v[0],
                v[1],
                v[2],
                NormMode::Eval {
                    mean: &[0.3, -0.2],
                    var: &[1.5, 0.7],
                },
                1e-5,
            )?;
            proj(g, y, 16)
        },
    )?);
    out.push(case("relu", &[random(&[2, 3, 3, 2], 17)], |g, v| {
        let y = g.relu(v[0]);
        proj(g, y, 18)
    })?);
    out.push(case("sigmoid", &[random(&[2, 3, 3, 2], 19)], |g, v| {
        let y = g.sigmoid(v[0]);
        proj(g, y, 20)
    })?);
    out.push(case("avg pool 2x2", &[random(&[2, 4, 6, 2], 21)], |g, v| {
        let y = g.avg_pool2(v[0])?;
        proj(g, y, 22)
    })?);
    out.push(case("global average pool", &[random(&[2, 3, 4, 3], 23)], |g, v| {
        let y = g.global_avg_pool(v[0])?;
        proj(g, y, 24)
    })?);
    out.push(case("top-k mean", &[random(&[2, 4, 3, 2], 25)], |g, v| {
        let y = g.top_k_mean(v[0], 3)?;
        proj(g, y, 26)
    })?);
    out.push(case("per-sample centering", &[random(&[3, 4, 4, 1], 27)], |g, v| {
        let y = g.center_samples(v[0]);
        proj(g, y, 28)
    })?);
    out.push(case("weighted cross-entropy", &[random(&[5, 4], 29)], |g, v| {
        g.weighted_cross_entropy(v[0], &[0, 3, 1, 2, 1], &[500.0, 285.71, 2.0, 2.022])
    })?);
    out.push(case("binary cross-entropy", &[random(&[3, 2], 30)], |g, v| {
        let p = g.sigmoid(v[0]);
        g.binary_cross_entropy(p, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0])
    })?);
    out.push(case("scale and add", &[random(&[2, 3], 31), random(&[2, 3], 32)], |g, v| {
        let a = g.scale(v[0], 0.7);
        let y = g.add(a, v[1])?;
        proj(g, y, 33)
    })?);
    Ok(out)
}

/// Check a whole network's parameter gradients by perturbing its weights.
pub fn check_module<M, F>(name: &str, net: &mut M, loss: F) -> Result<GradCase>
where
    M: Module<f64>,
    F: Fn(&M, &mut Graph<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let l = loss(net, &mut g)?;
    g.backward(l)?;
    net.collect_grads(&g);
    let analytic: Vec<Tensor<f64>> = net
        .params()
        .iter()
        .map(|p| p.grad.clone().unwrap_or_else(|| Tensor::zeros(p.value.shape().to_vec())))
        .collect();

    let eval = |net: &M| -> Result<f64> {
        let mut g = Graph::new();
        let l = loss(net, &mut g)?;
        Ok(g.value(l).data()[0])
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        coordinates: 0,
        worst: None,
    };
    for (pi, a) in analytic.iter().enumerate() {
        let n = a.numel();
        let picks: Vec<usize> = if n > NETWORK_COORDS {
            (0..NETWORK_COORDS).map(|i| i * n / NETWORK_COORDS).collect()
        } else {
            (0..n).collect()
        };
        for idx in picks {
            let orig = net.params()[pi].value.data()[idx];
            net.params_mut()[pi].value.data_mut()[idx] = orig + GRAD_STEP;
            let plus = eval(net)?;
            net.params_mut()[pi].value.data_mut()[idx] = orig - GRAD_STEP;
            let minus = eval(net)?;
            net.params_mut()[pi].value.data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * GRAD_STEP);
            let rel = relative_error(a.data()[idx], numeric);
            report.coordinates += 1;
            report.max_abs_error = report.max_abs_error.max((a.data()[idx] - numeric).abs());
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((pi, idx));
            }
        }
    }
    Ok(GradCase {
        name: name.into(),
        report,
    })
}

/// f_loc, the context net and f_agg end to end, in training mode.
pub fn network_cases() -> Result<Vec<GradCase>> {
    let mut out = Vec::new();

    let mut local = LocalNet::<f64>::new(
        LocalNetConfig {
            patch_size: 8,
            widths: vec![2, 3],
        },
        41,
    )?;
    let x = random(&[4, 8, 8, 1], 42);
    out.push(check_module("local net", &mut local, |net, g| {
        let xv = g.input(x.clone());
        let o = net.forward(g, xv, Mode::Train)?;
        Ok(g.weighted_cross_entropy(o.logits, &[0, 1, 2, 3], &[2.0, 1.5, 1.0, 0.5])?)
    })?);

    let mut context = ContextNet::<f64>::new(
        ContextNetConfig {
            widths: vec![2, 3],
            grid_factor: 4,
            input_downsample: 1,
            pool_fraction: 0.25,
        },
        43,
    )?;
    let x = random(&[2, 8, 12, 1], 44);
    out.push(check_module("context net", &mut context, |net, g| {
        let xv = g.input(x.clone());
        let s = net.saliency_forward(g, xv, Mode::Train)?;
        let p = net.scores_forward(g, s)?;
        Ok(g.binary_cross_entropy(p, &[1.0, 0.0, 0.0, 1.0])?)
    })?);

    let mut agg = AggNet::<f64>::new(
        AggNetConfig {
            selection: MapSelection::ALL,
        },
        45,
    );
    let x = random(&[3, 3, 4, 35], 46);
    out.push(check_module("aggregation net", &mut agg, |net, g| {
        let xv = g.input(x.clone());
        let z = net.forward(g, xv, Mode::Train)?;
        Ok(g.weighted_cross_entropy(z, &[0, 2, 1], &[500.0, 285.71, 2.0, 2.022])?)
    })?);
    Ok(out)
}

pub fn run_suite() -> Result<Vec<GradCase>> {
    let mut out = layer_cases()?;
    out.extend(network_cases()?);
    Ok(out)
}
