//! Central finite-difference checks of the tape, in `f64`.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::backbone::{difference_match, forward, point_conv, BackboneConfig, PairGeometry, Variant};
use super::kernel::KernelDisposition;
use super::tape::{Influence, Tape, Var, NO_NEIGHBOR};
use crate::cloud::Matrix;
use crate::error::Result;

/// Finite-difference step.
pub const STEP: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|)`; 0 when both norms are below 1e-10.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-10 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// One input of a check: a `rows x cols` matrix that receives a gradient.
#[derive(Debug, Clone)]
pub struct Input {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl Input {
    pub fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            values: (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }
}

/// Worst per-input relative error between the tape gradient of the scalar
/// built by `build` and its central differences.
pub fn check<F>(inputs: &[Input], build: F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Vec<f64>]| -> Result<(Tape<f64>, Vec<Var>, Var)> {
        let mut t = Tape::new();
        let vars = inputs
            .iter()
            .zip(vals)
            .map(|(i, v)| t.param(i.rows, i.cols, v.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = build(&mut t, &vars)?;
        Ok((t, vars, out))
    };
    let mut vals: Vec<Vec<f64>> = inputs.iter().map(|i| i.values.clone()).collect();
    let (t, vars, out) = eval(&vals)?;
    let grads = t.backward(out)?;
    let mut worst: f64 = 0.0;
    for (which, v) in vars.iter().enumerate() {
        let n = vals[which].len();
        let analytic = grads.get(*v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; n]);
        let mut numeric = vec![0.0; n];
        for e in 0..n {
            let orig = vals[which][e];
            vals[which][e] = orig + STEP;
            let (tp, _, op) = eval(&vals)?;
            vals[which][e] = orig - STEP;
            let (tm, _, om) = eval(&vals)?;
            vals[which][e] = orig;
            numeric[e] = (tp.scalar(op) - tm.scalar(om)) / (2.0 * STEP);
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

/// Differentiable operations with a dedicated check.
pub const OPS: [&str; 16] = [
    "kernel_aggregate",
    "matmul",
    "matmul_bt",
    "add_bias",
    "leaky_relu",
    "gather_rows",
    "add",
    "sub",
    "concat_cols",
    "normalize_rows",
    "scale",
    "weighted_nll",
    "contrastive",
    "mean_all",
    "point_conv",
    "difference_match",
];

fn random_influence(rng: &mut ChaCha8Rng, n_out: usize, n_in: usize, k: usize, p: usize) -> Influence {
    let mut nbr = Vec::new();
    let mut h = Vec::new();
    for _ in 0..n_out * k {
        if rng.random_bool(0.15) {
            nbr.push(NO_NEIGHBOR);
            h.extend(std::iter::repeat_n(0.0, p));
        } else {
            nbr.push(rng.random_range(0..n_in as u32));
            h.extend((0..p).map(|_| if rng.random_bool(0.3) { 0.0 } else { rng.random::<f32>() }));
        }
    }
    Influence {
        n_out,
        n_in,
        k,
        p,
        nbr,
        h,
    }
}

/// Checks one named op on a random instance drawn from `seed`.
///
/// Every op result is reduced by a random linear functional so that all
/// output entries carry distinct upstream gradients.
pub fn check_op(op: &str, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, m, q) = (rng.random_range(2..6), rng.random_range(2..5), rng.random_range(2..5));
    let project = |t: &mut Tape<f64>, y: Var, seed: u64| -> Result<Var> {
        let (r, c) = t.shape(y);
        let mut prng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
        let w = t.constant(c, 1, (0..c).map(|_| prng.random_range(-1.0..1.0)).collect())?;
        let yw = t.matmul(y, w)?;
        let v = t.constant(1, r, (0..r).map(|_| prng.random_range(-1.0..1.0)).collect())?;
        let s = t.matmul(v, yw)?;
        Ok(t.mean_all(s))
    };
    match op {
        "kernel_aggregate" => {
            let infl = Arc::new(random_influence(&mut rng, n, m + 2, 3, 4));
            let x = Input::random(&mut rng, m + 2, q);
            check(&[x], |t, v| {
                let y = t.kernel_aggregate(v[0], infl.clone())?;
                project(t, y, seed)
            })
        }
        "point_conv" => {
            let infl = Arc::new(random_influence(&mut rng, n, m + 2, 3, 4));
            let x = Input::random(&mut rng, m + 2, q);
            let w = Input::random(&mut rng, 4 * q, 3);
            let b = Input::random(&mut rng, 1, 3);
            check(&[x, w, b], |t, v| {
                let y = point_conv(t, v[0], infl.clone(), v[1], Some(v[2]))?;
                project(t, y, seed)
            })
        }
        "matmul" => {
            let a = Input::random(&mut rng, n, m);
            let b = Input::random(&mut rng, m, q);
            check(&[a, b], |t, v| {
                let y = t.matmul(v[0], v[1])?;
                project(t, y, seed)
            })
        }
        "matmul_bt" => {
            let a = Input::random(&mut rng, n, m);
            let b = Input::random(&mut rng, q, m);
            check(&[a, b], |t, v| {
                let y = t.matmul_bt(v[0], v[1])?;
                project(t, y, seed)
            })
        }
        "add_bias" => {
            let a = Input::random(&mut rng, n, m);
            let b = Input::random(&mut rng, 1, m);
            check(&[a, b], |t, v| {
                let y = t.add_bias(v[0], v[1])?;
                project(t, y, seed)
            })
        }
        "leaky_relu" => {
            let a = Input::random(&mut rng, n, m);
            check(&[a], |t, v| {
                let y = t.leaky_relu(v[0], 0.1);
                project(t, y, seed)
            })
        }
        "gather_rows" => {
            let idx: Vec<usize> = (0..n + 3).map(|_| rng.random_range(0..n)).collect();
            let idx = Arc::new(idx);
            let a = Input::random(&mut rng, n, m);
            check(&[a], |t, v| {
                let y = t.gather_rows(v[0], idx.clone())?;
                project(t, y, seed)
            })
        }
        "add" | "sub" => {
            let a = Input::random(&mut rng, n, m);
            let b = Input::random(&mut rng, n, m);
            let is_add = op == "add";
            check(&[a, b], |t, v| {
                let y = if is_add { t.add(v[0], v[1])? } else { t.sub(v[0], v[1])? };
                project(t, y, seed)
            })
        }
        "concat_cols" => {
            let a = Input::random(&mut rng, n, m);
            let b = Input::random(&mut rng, n, q);
            check(&[a, b], |t, v| {
                let y = t.concat_cols(v[0], v[1])?;
                project(t, y, seed)
            })
        }
        "normalize_rows" => {
            let a = Input::random(&mut rng, n, m);
            check(&[a], |t, v| {
                let y = t.normalize_rows(v[0], 1e-3);
                project(t, y, seed)
            })
        }
        "scale" => {
            let a = Input::random(&mut rng, n, m);
            let s = rng.random_range(-3.0..3.0);
            check(&[a], |t, v| {
                let y = t.scale(v[0], s);
                project(t, y, seed)
            })
        }
        "weighted_nll" => {
            let labels = Arc::new((0..n).map(|_| rng.random_range(0..m as u32)).collect::<Vec<_>>());
            let w = Arc::new((0..m).map(|_| rng.random_range(0.1..3.0)).collect::<Vec<f64>>());
            let mut z = Input::random(&mut rng, n, m);
            z.values.iter_mut().for_each(|v| *v *= 4.0);
            check(&[z], |t, v| t.weighted_nll(v[0], labels.clone(), w.clone()))
        }
        "contrastive" => {
            let y = Arc::new((0..n).map(|_| rng.random_range(0..2) as f64).collect::<Vec<_>>());
            let f = Input::random(&mut rng, n, m);
            check(&[f], |t, v| t.contrastive(v[0], y.clone()))
        }
        "mean_all" => {
            let a = Input::random(&mut rng, n, m);
            check(&[a], |t, v| {
                let y = t.leaky_relu(v[0], 0.1);
                let y = t.scale(y, 2.5);
                Ok(t.mean_all(y))
            })
        }
        "difference_match" => {
            let matches = Arc::new((0..n + 1).map(|_| rng.random_range(0..m)).collect::<Vec<_>>());
            let f1 = Input::random(&mut rng, m, q);
            let f2 = Input::random(&mut rng, n + 1, q);
            check(&[f1, f2], |t, v| {
                let y = difference_match(t, v[0], v[1], matches.clone())?;
                project(t, y, seed)
            })
        }
        other => Err(crate::Error::Argument(format!("unknown op {other}"))),
    }
}

/// Small backbone used by the full-network checks.
pub fn toy_config(variant: Variant) -> BackboneConfig {
    BackboneConfig {
        variant,
        channels: vec![3, 5],
        k: vec![4, 4],
        kernel_points: 4,
        dl0: 1.0,
        use_features: true,
        feature_dim: 4,
        n_prototypes: 3,
        tau: 0.5,
        normalize: true,
        leaky_slope: 0.1,
    }
}

/// Checks every parameter of a full backbone (prototypes included) through the
/// combined pseudo-label and contrastive loss on a random 30-point pair.
pub fn check_backbone(variant: Variant, seed: u64) -> Result<f64> {
    let cfg = toy_config(variant);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cloud = |n: usize| -> Vec<[f64; 3]> {
        (0..n)
            .map(|_| [rng.random_range(0.0..4.0), rng.random_range(0.0..4.0), rng.random_range(0.0..2.0)])
            .collect()
    };
    let (p1, p2) = (cloud(28), cloud(30));
    let geom = PairGeometry::build(&cfg, &p1, &p2)?;
    let mut inputs = |n: usize| {
        let mut m = Matrix::zeros(n, cfg.in_channels());
        for i in 0..n {
            m.row_mut(i)[0] = 1.0;
            for v in &mut m.row_mut(i)[1..] {
                *v = rng.random_range(-1.0..1.0);
            }
        }
        m
    };
    let (x1, x2) = (inputs(28), inputs(30));
    let labels = Arc::new((0..30).map(|_| rng.random_range(0..3u32)).collect::<Vec<_>>());
    let weights = Arc::new(vec![0.7, 1.0, 1.6]);
    let ysim = Arc::new((0..30).map(|_| rng.random_range(0..2) as f64).collect::<Vec<_>>());
    let shapes = cfg.param_shapes();
    let mut params = Vec::new();
    for (_, shape) in &shapes {
        let n: usize = shape.iter().product();
        let std = 1.0 / (shape[0] as f64).sqrt();
        params.push(Input {
            rows: 0,
            cols: 0,
            values: (0..n).map(|_| rng.random_range(-1.0..1.0) * std).collect(),
        });
        let t = super::Tensor::zeros(shape.clone());
        let (r, c) = t.dims2();
        let last = params.last_mut().expect("just pushed");
        last.rows = r;
        last.cols = c;
    }
    let names: Vec<String> = shapes.iter().map(|(n, _)| n.clone()).collect();
    check(&params, |t, v| {
        let mut vars = super::ParamVars::default();
        for (name, var) in names.iter().zip(v) {
            vars.vars.insert(name.clone(), *var);
        }
        let out = forward(t, &cfg, &vars, &geom, &x1, &x2)?;
        let nll = t.weighted_nll(out.logits, labels.clone(), weights.clone())?;
        let con = t.contrastive(out.f_cd, ysim.clone())?;
        let s = t.add(nll, con)?;
        Ok(t.scale(s, 0.5))
    })
}

/// Bound values for every parameter of `cfg`, drawn from `seed`; prototypes trainable.
pub fn random_values(cfg: &BackboneConfig, seed: u64) -> BTreeMap<String, (Vec<usize>, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    cfg.param_shapes()
        .into_iter()
        .map(|(name, shape)| {
            let n = shape.iter().product();
            (name, (shape, (0..n).map(|_| rng.random_range(-0.5..0.5)).collect()))
        })
        .collect()
}

/// Kernel with a single center point for checks that want isotropy.
pub fn isotropic_kernel(sigma: f64) -> Result<KernelDisposition> {
    KernelDisposition::sphere(1, 1.0, sigma)
}
