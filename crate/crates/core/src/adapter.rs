//! Scenario-guided adapter.
//!
//! Text embeddings and visual blocks are projected into a shared width `t`,
//! cross-attended in both directions, merged along the sequence axis, and
//! fused back into a per-token representation through attention-rectified
//! gating and a final filter. The result `R` (`l x t`) replaces the bottom
//! encoder block's attention output.
//!
//! Shapes along the way:
//!
//! | value  | shape     |
//! |--------|-----------|
//! | `X̃_tex` | `l x t` |
//! | `X̃_vis` | `k x t` |
//! | `Z_tex` | `k x t` (visual queries over text) |
//! | `Z_vis` | `l x t` (text queries over visual blocks) |
//! | `Z_int`, `U`, `R` | `l x t` |

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, AttentionOutput, AttentionVars};
use crate::params::{truncated_normal, Bound, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

pub const PREFIX: &str = "adapter/";
pub const INIT_STD: f64 = 0.02;
pub const FILTER_INIT_STD: f64 = 0.001;

/// Axis of the softmax inside the rectification step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SoftmaxAxis {
    /// Each token gets a distribution over its `t` features.
    #[default]
    Feature,
    /// Each feature gets a distribution over the `l` positions.
    Sequence,
}

impl SoftmaxAxis {
    fn axis(self) -> usize {
        match self {
            SoftmaxAxis::Feature => 1,
            SoftmaxAxis::Sequence => 0,
        }
    }
}

impl std::str::FromStr for SoftmaxAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "feature" => Ok(SoftmaxAxis::Feature),
            "sequence" => Ok(SoftmaxAxis::Sequence),
            other => Err(Error::Config(format!("unknown softmax axis {other:?}"))),
        }
    }
}

impl std::fmt::Display for SoftmaxAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SoftmaxAxis::Feature => "feature",
            SoftmaxAxis::Sequence => "sequence",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterConfig {
    /// Host text width `d`.
    pub text_dim: usize,
    /// Visual block width `d'`.
    pub visual_dim: usize,
    /// Shared width `t`.
    pub width: usize,
    /// Padded text length `l`.
    pub seq_len: usize,
    /// Number of visual blocks `k`.
    pub num_blocks: usize,
    pub heads: usize,
    pub softmax_axis: SoftmaxAxis,
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "{} interaction heads must divide width {}",
                self.heads, self.width
            )));
        }
        if self.num_blocks == 0 || self.seq_len == 0 || self.text_dim == 0 || self.visual_dim == 0 {
            return Err(Error::Config(format!("degenerate adapter config {self:?}")));
        }
        Ok(())
    }
}

/// Named single-component ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AblationConfig {
    /// Bypass the adapter; the bottom block keeps its own attention.
    pub disable_isi: bool,
    /// Drop the visual-queried text attention from the interaction.
    pub disable_vesr: bool,
    /// Drop the text-queried visual attention from the interaction.
    pub disable_srvr: bool,
    /// Replace rectify/gate/filter with concatenation and a linear map.
    pub disable_isf: bool,
    /// Replace the gate with a plain average.
    pub disable_gm: bool,
    /// Replace the filter with the average of `U` and `X̃_tex`.
    pub disable_fm: bool,
}

impl AblationConfig {
    pub fn full() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        if self.disable_vesr && self.disable_srvr {
            return Err(Error::Config(
                "disable_vesr and disable_srvr are mutually exclusive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

impl AttentionParams {
    fn init(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, t: usize) -> Self {
        let mut w = |n: &str| store.insert(format!("{prefix}/{n}"), truncated_normal(rng, &[t, t], INIT_STD));
        AttentionParams {
            wq: w("wq"),
            wk: w("wk"),
            wv: w("wv"),
            wo: w("wo"),
        }
    }

    pub fn vars(&self, bound: &Bound) -> AttentionVars {
        AttentionVars {
            wq: bound[self.wq],
            wk: bound[self.wk],
            wv: bound[self.wv],
            wo: bound[self.wo],
        }
    }

    fn ids(&self) -> [ParamId; 4] {
        [self.wq, self.wk, self.wv, self.wo]
    }
}

/// Every learnable tensor of the adapter, registered under `adapter/`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    pub config: AdapterConfig,
    /// Text projection, `d x t`.
    pub phi: ParamId,
    /// Visual projection, `d' x t`.
    pub psi: ParamId,
    /// Visual queries over text keys/values.
    pub vesr: AttentionParams,
    /// Text queries over visual keys/values.
    pub srvr: AttentionParams,
    /// Sequence-axis merge, `(k + l) x l`.
    pub phi_int: ParamId,
    pub w_alpha: ParamId,
    pub b_alpha: ParamId,
    pub w_z: ParamId,
    pub b_z: ParamId,
    pub w_beta: ParamId,
    pub b_beta: ParamId,
    pub w_x: ParamId,
    pub b_x: ParamId,
    pub w_g: ParamId,
    pub b_g: ParamId,
    pub w_h: ParamId,
    pub b_h: ParamId,
    pub w_r: ParamId,
    pub b_r: ParamId,
    /// `2t x t` map and bias used only when the fusion stage is ablated.
    pub concat_map: Option<(ParamId, ParamId)>,
}

impl AdapterParams {
    pub fn init(
        store: &mut ParamStore,
        config: &AdapterConfig,
        ablation: &AblationConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        ablation.validate()?;
        let (d, dv, t) = (config.text_dim, config.visual_dim, config.width);
        let (l, k) = (config.seq_len, config.num_blocks);
        let name = |n: &str| format!("{PREFIX}{n}");
        let phi = store.insert(name("phi"), truncated_normal(rng, &[d, t], INIT_STD));
        let psi = store.insert(name("psi"), truncated_normal(rng, &[dv, t], INIT_STD));
        let vesr = AttentionParams::init(store, rng, &name("vesr"), t);
        let srvr = AttentionParams::init(store, rng, &name("srvr"), t);
        let phi_int = store.insert(name("phi_int"), truncated_normal(rng, &[k + l, l], INIT_STD));
        let mut normal = |store: &mut ParamStore, n: &str, shape: &[usize]| {
            store.insert(name(n), truncated_normal(rng, shape, INIT_STD))
        };
        let w_alpha = normal(store, "w_alpha", &[2 * t, 1]);
        let b_alpha = store.insert(name("b_alpha"), Tensor::zeros(&[1, 1]));
        let w_z = normal(store, "w_z", &[1, t]);
        let b_z = store.insert(name("b_z"), Tensor::zeros(&[1, t]));
        let w_beta = normal(store, "w_beta", &[2 * t, 1]);
        let b_beta = store.insert(name("b_beta"), Tensor::zeros(&[1, 1]));
        let w_x = normal(store, "w_x", &[1, t]);
        let b_x = store.insert(name("b_x"), Tensor::zeros(&[1, t]));
        let w_g = normal(store, "w_g", &[2 * t, 1]);
        let b_g = store.insert(name("b_g"), Tensor::zeros(&[1, 1]));
        let w_h = normal(store, "w_h", &[2 * t, 1]);
        let b_h = store.insert(name("b_h"), Tensor::zeros(&[1, 1]));
        let w_r = store.insert(name("w_r"), truncated_normal(rng, &[t, t], FILTER_INIT_STD));
        let b_r = store.insert(name("b_r"), Tensor::zeros(&[1, t]));
        let concat_map = if ablation.disable_isf {
            let w = store.insert(name("concat_w"), truncated_normal(rng, &[2 * t, t], INIT_STD));
            let b = store.insert(name("concat_b"), Tensor::zeros(&[1, t]));
            Some((w, b))
        } else {
            None
        };
        Ok(AdapterParams {
            config: config.clone(),
            phi,
            psi,
            vesr,
            srvr,
            phi_int,
            w_alpha,
            b_alpha,
            w_z,
            b_z,
            w_beta,
            b_beta,
            w_x,
            b_x,
            w_g,
            b_g,
            w_h,
            b_h,
            w_r,
            b_r,
            concat_map,
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = vec![self.phi, self.psi];
        v.extend(self.vesr.ids());
        v.extend(self.srvr.ids());
        v.extend([
            self.phi_int,
            self.w_alpha,
            self.b_alpha,
            self.w_z,
            self.b_z,
            self.w_beta,
            self.b_beta,
            self.w_x,
            self.b_x,
            self.w_g,
            self.b_g,
            self.w_h,
            self.b_h,
            self.w_r,
            self.b_r,
        ]);
        if let Some((w, b)) = self.concat_map {
            v.extend([w, b]);
        }
        v
    }
}

fn expect_shape(tape: &Tape, v: Var, want: &[usize], what: &'static str) -> Result<()> {
    if tape.shape(v) != want {
        return Err(Error::shape(what, tape.shape(v), want));
    }
    Ok(())
}

/// Linear projections of both modalities into width `t` (no bias).
pub fn project_modalities(
    tape: &mut Tape,
    x_tex: Var,
    x_vis: Var,
    phi: Var,
    psi: Var,
) -> Result<(Var, Var)> {
    let t = tape.matmul(x_tex, phi)?;
    let v = tape.matmul(x_vis, psi)?;
    Ok((t, v))
}

/// Visual blocks query the text; returns `Z_tex` (`k x t`) and per-head weights.
pub fn visual_enhanced_attention(
    tape: &mut Tape,
    xt_tex: Var,
    xt_vis: Var,
    w: AttentionVars,
    heads: usize,
    text_mask: &[bool],
) -> Result<AttentionOutput> {
    nn::multi_head_attention(tape, xt_vis, xt_tex, w, heads, Some(text_mask))
}

/// Text tokens query the visual blocks; returns `Z_vis` (`l x t`) and weights.
pub fn sentence_rectified_attention(
    tape: &mut Tape,
    xt_tex: Var,
    xt_vis: Var,
    w: AttentionVars,
    heads: usize,
) -> Result<AttentionOutput> {
    if tape.shape(xt_vis)[0] == 0 {
        return Err(Error::Value("no visual blocks to attend over".into()));
    }
    nn::multi_head_attention(tape, xt_tex, xt_vis, w, heads, None)
}

/// `Z_int = phi_intᵀ · (Z_tex || Z_vis)` with concatenation along the sequence axis.
pub fn interact(tape: &mut Tape, z_tex: Var, z_vis: Var, phi_int: Var) -> Result<Var> {
    let seq = tape.shape(z_tex)[0] + tape.shape(z_vis)[0];
    if tape.shape(phi_int)[0] != seq {
        return Err(Error::shape("interact", tape.shape(phi_int), &[seq, 0]));
    }
    let stacked = tape.concat(z_tex, z_vis, 0)?;
    let pt = tape.transpose(phi_int)?;
    tape.matmul(pt, stacked)
}

/// Interaction from one attention direction only, using the matching rows of
/// `phi_int` (`rows` starting at `offset`).
fn interact_single(tape: &mut Tape, z: Var, phi_int: Var, offset: usize) -> Result<Var> {
    let rows = tape.shape(z)[0];
    let sub = tape.narrow(phi_int, 0, offset, rows)?;
    let pt = tape.transpose(sub)?;
    tape.matmul(pt, z)
}

#[derive(Debug, Clone, Copy)]
pub struct FusionVars {
    pub w_alpha: Var,
    pub b_alpha: Var,
    pub w_z: Var,
    pub b_z: Var,
    pub w_beta: Var,
    pub b_beta: Var,
    pub w_x: Var,
    pub b_x: Var,
    pub w_g: Var,
    pub b_g: Var,
    pub w_h: Var,
    pub b_h: Var,
    pub w_r: Var,
    pub b_r: Var,
}

impl FusionVars {
    pub fn from_bound(bound: &Bound, p: &AdapterParams) -> Self {
        FusionVars {
            w_alpha: bound[p.w_alpha],
            b_alpha: bound[p.b_alpha],
            w_z: bound[p.w_z],
            b_z: bound[p.b_z],
            w_beta: bound[p.w_beta],
            b_beta: bound[p.b_beta],
            w_x: bound[p.w_x],
            b_x: bound[p.b_x],
            w_g: bound[p.w_g],
            b_g: bound[p.b_g],
            w_h: bound[p.w_h],
            b_h: bound[p.b_h],
            w_r: bound[p.w_r],
            b_r: bound[p.b_r],
        }
    }
}

/// `act(concat_feature(a, b) · w + bias)`, an `l x 1` column.
fn column_gate(tape: &mut Tape, a: Var, b: Var, w: Var, bias: Var, sigmoid: bool) -> Result<Var> {
    let ab = tape.concat(a, b, 1)?;
    let s = tape.matmul(ab, w)?;
    let s = tape.add(s, bias)?;
    Ok(if sigmoid { tape.sigmoid(s) } else { tape.tanh(s) })
}

#[derive(Debug, Clone, Copy)]
pub struct Rectified {
    pub x_hat: Var,
    pub z_hat: Var,
    pub alpha: Var,
    pub beta: Var,
    /// Softmax factor multiplied into `Z_int`.
    pub z_factor: Var,
    /// Softmax factor multiplied into `X̃_tex`.
    pub x_factor: Var,
}

/// Attention-rectified update of the interaction and text representations.
pub fn rectify_representations(
    tape: &mut Tape,
    xt_tex: Var,
    z_int: Var,
    v: &FusionVars,
    axis: SoftmaxAxis,
) -> Result<Rectified> {
    let alpha = column_gate(tape, xt_tex, z_int, v.w_alpha, v.b_alpha, false)?;
    let za = tape.matmul(alpha, v.w_z)?;
    let za = tape.add(za, v.b_z)?;
    let z_factor = tape.softmax(za, axis.axis())?;
    let z_hat = tape.mul(z_int, z_factor)?;
    let beta = column_gate(tape, z_hat, xt_tex, v.w_beta, v.b_beta, false)?;
    let xb = tape.matmul(beta, v.w_x)?;
    let xb = tape.add(xb, v.b_x)?;
    let x_factor = tape.softmax(xb, axis.axis())?;
    let x_hat = tape.mul(xt_tex, x_factor)?;
    Ok(Rectified {
        x_hat,
        z_hat,
        alpha,
        beta,
        z_factor,
        x_factor,
    })
}

/// `U = g·X̂_tex + (1 − g)·Ẑ_int` with a per-token sigmoid gate `g`. Returns `(U, g)`.
pub fn gate_merge(tape: &mut Tape, x_hat: Var, z_hat: Var, w_g: Var, b_g: Var) -> Result<(Var, Var)> {
    let g = column_gate(tape, x_hat, z_hat, w_g, b_g, true)?;
    let one_minus = tape.affine(g, -1.0, 1.0);
    let a = tape.mul(x_hat, g)?;
    let b = tape.mul(z_hat, one_minus)?;
    Ok((tape.add(a, b)?, g))
}

/// `R = h ⊙ tanh(U·W_r + b_r)` with a per-token sigmoid filter `h`. Returns `(R, h)`.
pub fn filter_fuse(
    tape: &mut Tape,
    u: Var,
    xt_tex: Var,
    w_h: Var,
    b_h: Var,
    w_r: Var,
    b_r: Var,
) -> Result<(Var, Var)> {
    let h = column_gate(tape, u, xt_tex, w_h, b_h, true)?;
    let ur = tape.matmul(u, w_r)?;
    let ur = tape.add(ur, b_r)?;
    let ur = tape.tanh(ur);
    Ok((tape.mul(ur, h)?, h))
}

/// Every intermediate of one adapter pass, for inspection and tests.
#[derive(Debug, Clone)]
pub struct AdapterTrace {
    pub r: Var,
    pub xt_tex: Var,
    pub xt_vis: Var,
    pub z_tex: Option<Var>,
    pub z_vis: Option<Var>,
    pub z_int: Var,
    pub rectified: Option<Rectified>,
    pub u: Option<Var>,
    pub gate: Option<Var>,
    pub filter: Option<Var>,
    pub vesr_weights: Vec<Var>,
    pub srvr_weights: Vec<Var>,
}

/// Full adapter pass from host embeddings (`l x d`) and visual blocks (`k x d'`)
/// to the replacement attention output `R` (`l x t`).
#[allow(clippy::too_many_arguments)]
pub fn adapter_forward(
    tape: &mut Tape,
    bound: &Bound,
    params: &AdapterParams,
    x_tex: Var,
    x_vis: Var,
    ablation: &AblationConfig,
    text_mask: &[bool],
) -> Result<AdapterTrace> {
    ablation.validate()?;
    if ablation.disable_isi {
        return Err(Error::Config(
            "disable_isi bypasses the adapter; the caller must not invoke it".into(),
        ));
    }
    let cfg = &params.config;
    let (l, k, t, heads) = (cfg.seq_len, cfg.num_blocks, cfg.width, cfg.heads);
    expect_shape(tape, x_tex, &[l, cfg.text_dim], "adapter text input")?;
    expect_shape(tape, x_vis, &[k, cfg.visual_dim], "adapter visual input")?;
    if text_mask.len() != l {
        return Err(Error::shape("adapter text mask", &[text_mask.len()], &[l]));
    }

    let (xt_tex, xt_vis) = project_modalities(tape, x_tex, x_vis, bound[params.phi], bound[params.psi])?;

    let (z_tex, vesr_weights) = if ablation.disable_vesr {
        (None, Vec::new())
    } else {
        let a = visual_enhanced_attention(tape, xt_tex, xt_vis, params.vesr.vars(bound), heads, text_mask)?;
        expect_shape(tape, a.output, &[k, t], "Z_tex")?;
        (Some(a.output), a.weights)
    };
    let (z_vis, srvr_weights) = if ablation.disable_srvr {
        (None, Vec::new())
    } else {
        let a = sentence_rectified_attention(tape, xt_tex, xt_vis, params.srvr.vars(bound), heads)?;
        expect_shape(tape, a.output, &[l, t], "Z_vis")?;
        // padded query rows carry no text; zero them before merging
        let keep = text_mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        let keep = tape.constant(Tensor::new(&[l, 1], keep)?);
        (Some(tape.mul(a.output, keep)?), a.weights)
    };

    let phi_int = bound[params.phi_int];
    let z_int = match (z_tex, z_vis) {
        (Some(zt), Some(zv)) => interact(tape, zt, zv, phi_int)?,
        (None, Some(zv)) => interact_single(tape, zv, phi_int, k)?,
        (Some(zt), None) => interact_single(tape, zt, phi_int, 0)?,
        (None, None) => unreachable!("validated above"),
    };
    expect_shape(tape, z_int, &[l, t], "Z_int")?;

    let mut trace = AdapterTrace {
        r: z_int,
        xt_tex,
        xt_vis,
        z_tex,
        z_vis,
        z_int,
        rectified: None,
        u: None,
        gate: None,
        filter: None,
        vesr_weights,
        srvr_weights,
    };

    if ablation.disable_isf {
        let (w, b) = params
            .concat_map
            .ok_or_else(|| Error::Config("fusion ablation needs concat_map parameters".into()))?;
        let cat = tape.concat(xt_tex, z_int, 1)?;
        let r = tape.matmul(cat, bound[w])?;
        trace.r = tape.add(r, bound[b])?;
        expect_shape(tape, trace.r, &[l, t], "R")?;
        return Ok(trace);
    }

    let fv = FusionVars::from_bound(bound, params);
    let rect = rectify_representations(tape, xt_tex, z_int, &fv, cfg.softmax_axis)?;
    let u = if ablation.disable_gm {
        let s = tape.add(rect.x_hat, rect.z_hat)?;
        tape.scale(s, 0.5)
    } else {
        let (u, g) = gate_merge(tape, rect.x_hat, rect.z_hat, fv.w_g, fv.b_g)?;
        trace.gate = Some(g);
        u
    };
    expect_shape(tape, u, &[l, t], "U")?;
    let r = if ablation.disable_fm {
        let s = tape.add(u, xt_tex)?;
        tape.scale(s, 0.5)
    } else {
        let (r, h) = filter_fuse(tape, u, xt_tex, fv.w_h, fv.b_h, fv.w_r, fv.b_r)?;
        trace.filter = Some(h);
        r
    };
    expect_shape(tape, r, &[l, t], "R")?;
    trace.rectified = Some(rect);
    trace.u = Some(u);
    trace.r = r;
    Ok(trace)
}
