//! Whole-model gradient verification and the adapter timing sweep.

use std::time::Instant;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::adapter::{self, AblationConfig, AdapterConfig, AdapterParams, SoftmaxAxis};
use crate::error::{Error, Result};
use crate::exec;
use crate::model::{PreparedExample, ScenaFuseModel};
use crate::params::{derive_seed, Bound, Grads, ParamStore};
use crate::tensor::{relative_error, Tape, Tensor};

pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const SLOPE_RANGE: (f64, f64) = (1.6, 2.4);
pub const BENCH_WIDTHS: [usize; 4] = [32, 64, 128, 256];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub total: usize,
    /// Worst relative error of the directional derivative over all directions.
    pub directional_error: f64,
    pub coords_checked: usize,
    /// Worst coordinatewise relative error; near-zero entries are bounded by
    /// finite-difference roundoff rather than by the gradient code.
    pub coord_max_error: f64,
    pub coords_over_tolerance: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub eps: f64,
    pub directions: usize,
    pub tensors: Vec<TensorCheck>,
    /// Worst directional error; this is the pass criterion.
    pub max_error: f64,
    pub coord_max_error: f64,
    pub seconds: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_error < GRAD_TOLERANCE
    }

    pub fn coordinates(&self) -> usize {
        self.tensors.iter().map(|t| t.coords_checked).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Directions per tensor, each touching every coordinate: the analytic
    /// gradient's unit vector plus an independent random unit vector.
    pub directions: usize,
    /// Coordinates sampled per tensor for the coordinatewise report; `None`
    /// checks all of them.
    pub coords_per_tensor: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: crate::tensor::DEFAULT_EPS,
            directions: 3,
            coords_per_tensor: Some(16),
            seed: 0,
        }
    }
}

/// Adds uniform noise in `[-spread, spread]` to every parameter. At the
/// default initialization most gradients sit near the relative-error floor,
/// so checks run at a perturbed point.
pub fn perturb(store: &mut ParamStore, spread: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in store.tensors_mut() {
        for x in t.data_mut() {
            *x += rng.random_range(-spread..=spread);
        }
    }
}

enum Probe {
    Direction(usize, Vec<f64>),
    Coord(usize, usize),
}

/// Compares the tape's gradients of the model's loss on `ex` with central
/// differences, for every parameter tensor: along directions that cover the
/// whole tensor, and on a sample of single coordinates.
pub fn grad_check_model(model: &ScenaFuseModel, ex: &PreparedExample, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let (_, analytic, _) = model.loss_and_grads(ex, 0.0, None)?;
    grad_check_with(model, ex, &analytic, opts)
}

/// [`grad_check_model`] against caller-supplied gradients.
pub fn grad_check_with(
    model: &ScenaFuseModel,
    ex: &PreparedExample,
    analytic: &Grads,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let start = Instant::now();
    let eps = opts.eps;
    let base = model.store.tensors();
    let loss = |params: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = params.iter().map(|p| tape.constant(p.clone())).collect();
        let l = model.loss_on_tape(&mut tape, &Bound::from_vars(vars), ex)?;
        Ok(tape.scalar(l))
    };

    let mut probes = Vec::new();
    for (pi, g) in analytic.0.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, &[pi as u64]));
        let unit = |v: &mut Vec<f64>| {
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                v.iter_mut().for_each(|x| *x /= norm);
            }
        };
        let mut g_hat = g.clone();
        unit(&mut g_hat);
        for _ in 0..opts.directions {
            let mut r: Vec<f64> = (0..g.len()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            unit(&mut r);
            // a purely random direction can land nearly orthogonal to g, where
            // the true derivative sinks below finite-difference roundoff
            let mut v: Vec<f64> = g_hat.iter().zip(&r).map(|(a, b)| a + b).collect();
            unit(&mut v);
            probes.push(Probe::Direction(pi, v));
        }
        let coords: Vec<usize> = match opts.coords_per_tensor {
            Some(cap) if cap < g.len() => {
                let mut pick = index::sample(&mut rng, g.len(), cap.max(1)).into_vec();
                pick.sort_unstable();
                pick
            }
            _ => (0..g.len()).collect(),
        };
        probes.extend(coords.into_iter().map(|ci| Probe::Coord(pi, ci)));
    }

    let errors = exec::map_ordered(&probes, |_, probe| -> Result<f64> {
        let mut work = base.clone();
        let (pi, a) = match probe {
            Probe::Direction(pi, v) => (*pi, v.iter().zip(&analytic.0[*pi]).map(|(v, g)| v * g).sum()),
            Probe::Coord(pi, ci) => (*pi, analytic.0[*pi][*ci]),
        };
        let shift = |work: &mut [Tensor], h: f64| match probe {
            Probe::Direction(_, v) => {
                for (x, (o, d)) in work[pi].data_mut().iter_mut().zip(base[pi].data().iter().zip(v)) {
                    *x = o + h * d;
                }
            }
            Probe::Coord(_, ci) => work[pi].data_mut()[*ci] = base[pi].data()[*ci] + h,
        };
        shift(&mut work, eps);
        let up = loss(&work)?;
        shift(&mut work, -eps);
        let down = loss(&work)?;
        Ok(relative_error(a, (up - down) / (2.0 * eps)))
    });

    let mut tensors: Vec<TensorCheck> = model
        .store
        .iter()
        .map(|(name, t)| TensorCheck {
            name: name.to_string(),
            total: t.len(),
            directional_error: 0.0,
            coords_checked: 0,
            coord_max_error: 0.0,
            coords_over_tolerance: 0,
        })
        .collect();
    for (probe, err) in probes.iter().zip(errors) {
        let err = err?;
        let pi = match probe {
            Probe::Direction(pi, _) | Probe::Coord(pi, _) => *pi,
        };
        if !err.is_finite() {
            return Err(Error::Value(format!("non-finite gradient error in {}", tensors[pi].name)));
        }
        let t = &mut tensors[pi];
        match probe {
            Probe::Direction(..) => t.directional_error = t.directional_error.max(err),
            Probe::Coord(..) => {
                t.coords_checked += 1;
                t.coord_max_error = t.coord_max_error.max(err);
                t.coords_over_tolerance += usize::from(err >= GRAD_TOLERANCE);
            }
        }
    }
    let max_error = tensors.iter().map(|t| t.directional_error).fold(0.0, f64::max);
    let coord_max_error = tensors.iter().map(|t| t.coord_max_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        eps,
        directions: opts.directions,
        tensors,
        max_error,
        coord_max_error,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchPoint {
    pub width: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub seq_len: usize,
    pub num_blocks: usize,
    pub points: Vec<BenchPoint>,
    pub slope: f64,
}

impl ComplexityReport {
    pub fn passed(&self) -> bool {
        (SLOPE_RANGE.0..=SLOPE_RANGE.1).contains(&self.slope)
    }
}

/// Least-squares slope of `ln y` on `ln x`.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 || xs.iter().chain(ys).any(|&v| v <= 0.0) {
        return Err(Error::Value("slope needs at least two positive points".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    Ok(sxy / sxx)
}

/// Fastest wall time of one adapter forward pass for each width `t`, with
/// text length, block count and input widths held fixed. Widths are timed
/// round-robin so that drift in machine speed affects all of them alike.
pub fn bench_complexity(
    widths: &[usize],
    seq_len: usize,
    num_blocks: usize,
    reps: usize,
    seed: u64,
) -> Result<ComplexityReport> {
    let (d, dv) = (32, 32);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x_tex = crate::params::uniform(&mut rng, &[seq_len, d], -1.0, 1.0);
    let x_vis = crate::params::uniform(&mut rng, &[num_blocks, dv], -1.0, 1.0);
    let mask = vec![true; seq_len];
    let ablation = AblationConfig::full();
    let mut adapters = Vec::with_capacity(widths.len());
    for &t in widths {
        let cfg = AdapterConfig {
            text_dim: d,
            visual_dim: dv,
            width: t,
            seq_len,
            num_blocks,
            heads: 4,
            softmax_axis: SoftmaxAxis::Feature,
        };
        let mut store = ParamStore::new();
        let params = AdapterParams::init(&mut store, &cfg, &ablation, &mut rng)?;
        adapters.push((store, params));
    }
    let run = |(store, params): &(ParamStore, AdapterParams)| -> Result<f64> {
        let start = Instant::now();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let xt = tape.constant(x_tex.clone());
        let xv = tape.constant(x_vis.clone());
        let trace = adapter::adapter_forward(&mut tape, &bound, params, xt, xv, &ablation, &mask)?;
        std::hint::black_box(tape.value(trace.r));
        Ok(start.elapsed().as_secs_f64())
    };
    let mut best = vec![f64::INFINITY; widths.len()];
    for rep in 0..=reps.max(1) {
        for (b, a) in best.iter_mut().zip(&adapters) {
            let secs = run(a)?;
            // the first round only warms up
            if rep > 0 {
                *b = b.min(secs);
            }
        }
    }
    let points: Vec<BenchPoint> = widths
        .iter()
        .zip(best)
        .map(|(&width, seconds)| BenchPoint { width, seconds })
        .collect();
    let xs: Vec<f64> = points.iter().map(|p| p.width as f64).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.seconds).collect();
    let slope = log_log_slope(&xs, &ys)?;
    Ok(ComplexityReport {
        seq_len,
        num_blocks,
        points,
        slope,
    })
}
