//! Straight-line dense-matrix reference implementations, independent of the tape.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scenafuse::adapter::{AblationConfig, AdapterConfig, AdapterParams, SoftmaxAxis};
use scenafuse::params::{ParamId, ParamStore};
use scenafuse::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub r: usize,
    pub c: usize,
    pub v: Vec<f64>,
}

impl Mat {
    pub fn zeros(r: usize, c: usize) -> Self {
        Mat { r, c, v: vec![0.0; r * c] }
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        let (r, c) = match t.shape() {
            [r, c] => (*r, *c),
            [c] => (1, *c),
            s => panic!("rank {s:?}"),
        };
        Mat { r, c, v: t.data().to_vec() }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.r, self.c], self.v.clone()).unwrap()
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.v[i * self.c + j]
    }

    pub fn set(&mut self, i: usize, j: usize, x: f64) {
        self.v[i * self.c + j] = x;
    }

    pub fn matmul(&self, o: &Mat) -> Mat {
        assert_eq!(self.c, o.r);
        let mut out = Mat::zeros(self.r, o.c);
        for i in 0..self.r {
            for j in 0..o.c {
                let mut s = 0.0;
                for k in 0..self.c {
                    s += self.at(i, k) * o.at(k, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    pub fn t(&self) -> Mat {
        let mut out = Mat::zeros(self.c, self.r);
        for i in 0..self.r {
            for j in 0..self.c {
                out.set(j, i, self.at(i, j));
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat { r: self.r, c: self.c, v: self.v.iter().map(|&x| f(x)).collect() }
    }

    /// Elementwise with broadcasting of `o` as `r x 1`, `1 x c` or same shape.
    pub fn zip(&self, o: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
        let mut out = Mat::zeros(self.r, self.c);
        for i in 0..self.r {
            for j in 0..self.c {
                let b = match (o.r, o.c) {
                    (r, c) if r == self.r && c == self.c => o.at(i, j),
                    (r, 1) if r == self.r => o.at(i, 0),
                    (1, c) if c == self.c => o.at(0, j),
                    _ => panic!("bad broadcast {}x{} vs {}x{}", self.r, self.c, o.r, o.c),
                };
                out.set(i, j, f(self.at(i, j), b));
            }
        }
        out
    }

    pub fn add(&self, o: &Mat) -> Mat {
        self.zip(o, |a, b| a + b)
    }

    pub fn mul(&self, o: &Mat) -> Mat {
        self.zip(o, |a, b| a * b)
    }

    pub fn hcat(&self, o: &Mat) -> Mat {
        assert_eq!(self.r, o.r);
        let mut out = Mat::zeros(self.r, self.c + o.c);
        for i in 0..self.r {
            for j in 0..self.c {
                out.set(i, j, self.at(i, j));
            }
            for j in 0..o.c {
                out.set(i, self.c + j, o.at(i, j));
            }
        }
        out
    }

    pub fn vcat(&self, o: &Mat) -> Mat {
        assert_eq!(self.c, o.c);
        let mut v = self.v.clone();
        v.extend_from_slice(&o.v);
        Mat { r: self.r + o.r, c: self.c, v }
    }

    pub fn rows(&self, start: usize, n: usize) -> Mat {
        Mat { r: n, c: self.c, v: self.v[start * self.c..(start + n) * self.c].to_vec() }
    }

    pub fn cols(&self, start: usize, n: usize) -> Mat {
        let mut out = Mat::zeros(self.r, n);
        for i in 0..self.r {
            for j in 0..n {
                out.set(i, j, self.at(i, start + j));
            }
        }
        out
    }

    pub fn softmax_rows(&self) -> Mat {
        let mut out = self.clone();
        for i in 0..self.r {
            let m = (0..self.c).map(|j| self.at(i, j)).fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = (0..self.c).map(|j| (self.at(i, j) - m).exp()).collect();
            let s: f64 = e.iter().sum();
            for j in 0..self.c {
                out.set(i, j, e[j] / s);
            }
        }
        out
    }

    pub fn softmax_cols(&self) -> Mat {
        self.t().softmax_rows().t()
    }

    pub fn max_abs_diff(&self, o: &Mat) -> f64 {
        assert_eq!((self.r, self.c), (o.r, o.c));
        self.v.iter().zip(&o.v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Mat {
    Mat { r, c, v: (0..r * c).map(|_| rng.random_range(-scale..scale)).collect() }
}

/// Naive per-head attention: returns the output and per-head weights.
pub fn attention(
    q_in: &Mat,
    kv_in: &Mat,
    w: [&Mat; 4],
    heads: usize,
    key_mask: Option<&[bool]>,
) -> (Mat, Vec<Mat>) {
    let q = q_in.matmul(w[0]);
    let k = kv_in.matmul(w[1]);
    let v = kv_in.matmul(w[2]);
    let dh = q.c / heads;
    let mut merged: Option<Mat> = None;
    let mut weights = Vec::new();
    for h in 0..heads {
        let (qh, kh, vh) = (q.cols(h * dh, dh), k.cols(h * dh, dh), v.cols(h * dh, dh));
        let mut scores = Mat::zeros(q.r, k.r);
        for i in 0..q.r {
            for j in 0..k.r {
                let mut s = 0.0;
                for x in 0..dh {
                    s += qh.at(i, x) * kh.at(j, x);
                }
                s /= (dh as f64).sqrt();
                if let Some(m) = key_mask {
                    if !m[j] {
                        s += -1e9;
                    }
                }
                scores.set(i, j, s);
            }
        }
        let p = scores.softmax_rows();
        let oh = p.matmul(&vh);
        weights.push(p);
        merged = Some(match merged {
            None => oh,
            Some(m) => m.hcat(&oh),
        });
    }
    (merged.unwrap().matmul(w[3]), weights)
}

pub struct AdapterFixture {
    pub store: ParamStore,
    pub params: AdapterParams,
    pub x_tex: Tensor,
    pub x_vis: Tensor,
    pub mask: Vec<bool>,
}

pub fn small_adapter_config() -> AdapterConfig {
    AdapterConfig {
        text_dim: 8,
        visual_dim: 5,
        width: 8,
        seq_len: 6,
        num_blocks: 3,
        heads: 2,
        softmax_axis: SoftmaxAxis::Feature,
    }
}

/// Random adapter with inputs; `spread` rescales every parameter so the
/// nonlinearities operate away from their near-linear regime.
pub fn adapter_fixture(
    cfg: &AdapterConfig,
    ablation: &AblationConfig,
    seed: u64,
    spread: f64,
    real_len: usize,
) -> AdapterFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let params = AdapterParams::init(&mut store, cfg, ablation, &mut rng).unwrap();
    if spread > 0.0 {
        for t in store.tensors_mut() {
            for x in t.data_mut() {
                *x = rng.random_range(-spread..spread);
            }
        }
    }
    let x_tex = rand_mat(&mut rng, cfg.seq_len, cfg.text_dim, 1.0).to_tensor();
    let x_vis = rand_mat(&mut rng, cfg.num_blocks, cfg.visual_dim, 1.0).to_tensor();
    let mask = (0..cfg.seq_len).map(|i| i < real_len).collect();
    AdapterFixture { store, params, x_tex, x_vis, mask }
}

pub fn pm(store: &ParamStore, id: ParamId) -> Mat {
    Mat::from_tensor(store.get(id))
}

pub struct OracleAdapter {
    pub xt_tex: Mat,
    pub xt_vis: Mat,
    pub z_tex: Option<Mat>,
    pub z_vis: Option<Mat>,
    pub z_int: Mat,
    pub x_hat: Option<Mat>,
    pub z_hat: Option<Mat>,
    pub u: Option<Mat>,
    pub g: Option<Mat>,
    pub h: Option<Mat>,
    pub r: Mat,
}

/// Straight-line adapter: projections, both cross-attentions, sequence-axis
/// merge, rectification, gate and filter, honoring ablation flags.
pub fn oracle_adapter(
    store: &ParamStore,
    p: &AdapterParams,
    x_tex: &Mat,
    x_vis: &Mat,
    mask: &[bool],
    ablation: &AblationConfig,
) -> OracleAdapter {
    let cfg = &p.config;
    let (l, k) = (cfg.seq_len, cfg.num_blocks);
    let xt_tex = x_tex.matmul(&pm(store, p.phi));
    let xt_vis = x_vis.matmul(&pm(store, p.psi));
    let att = |a: &scenafuse::adapter::AttentionParams| {
        [pm(store, a.wq), pm(store, a.wk), pm(store, a.wv), pm(store, a.wo)]
    };
    let vw = att(&p.vesr);
    let sw = att(&p.srvr);
    let z_tex = (!ablation.disable_vesr).then(|| {
        attention(&xt_vis, &xt_tex, [&vw[0], &vw[1], &vw[2], &vw[3]], cfg.heads, Some(mask)).0
    });
    let z_vis = (!ablation.disable_srvr).then(|| {
        let (z, _) = attention(&xt_tex, &xt_vis, [&sw[0], &sw[1], &sw[2], &sw[3]], cfg.heads, None);
        let keep = Mat { r: l, c: 1, v: mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect() };
        z.mul(&keep)
    });
    let phi_int = pm(store, p.phi_int);
    let z_int = match (&z_tex, &z_vis) {
        (Some(zt), Some(zv)) => phi_int.t().matmul(&zt.vcat(zv)),
        (None, Some(zv)) => phi_int.rows(k, l).t().matmul(zv),
        (Some(zt), None) => phi_int.rows(0, k).t().matmul(zt),
        _ => unreachable!(),
    };
    if ablation.disable_isf {
        let (w, b) = p.concat_map.unwrap();
        let r = xt_tex.hcat(&z_int).matmul(&pm(store, w)).add(&pm(store, b));
        return OracleAdapter {
            xt_tex,
            xt_vis,
            z_tex,
            z_vis,
            z_int,
            x_hat: None,
            z_hat: None,
            u: None,
            g: None,
            h: None,
            r,
        };
    }
    let soft = |m: &Mat| match cfg.softmax_axis {
        SoftmaxAxis::Feature => m.softmax_rows(),
        SoftmaxAxis::Sequence => m.softmax_cols(),
    };
    let alpha = xt_tex
        .hcat(&z_int)
        .matmul(&pm(store, p.w_alpha))
        .add(&pm(store, p.b_alpha))
        .map(f64::tanh);
    let z_hat = z_int.mul(&soft(&alpha.matmul(&pm(store, p.w_z)).add(&pm(store, p.b_z))));
    let beta = z_hat
        .hcat(&xt_tex)
        .matmul(&pm(store, p.w_beta))
        .add(&pm(store, p.b_beta))
        .map(f64::tanh);
    let x_hat = xt_tex.mul(&soft(&beta.matmul(&pm(store, p.w_x)).add(&pm(store, p.b_x))));
    let (u, g) = if ablation.disable_gm {
        (x_hat.add(&z_hat).map(|v| v * 0.5), None)
    } else {
        let g = x_hat
            .hcat(&z_hat)
            .matmul(&pm(store, p.w_g))
            .add(&pm(store, p.b_g))
            .map(sigmoid);
        let one_minus = g.map(|v| 1.0 - v);
        (x_hat.mul(&g).add(&z_hat.mul(&one_minus)), Some(g))
    };
    let (r, h) = if ablation.disable_fm {
        (u.add(&xt_tex).map(|v| v * 0.5), None)
    } else {
        let h = u
            .hcat(&xt_tex)
            .matmul(&pm(store, p.w_h))
            .add(&pm(store, p.b_h))
            .map(sigmoid);
        let ur = u.matmul(&pm(store, p.w_r)).add(&pm(store, p.b_r)).map(f64::tanh);
        (ur.mul(&h), Some(h))
    };
    OracleAdapter {
        xt_tex,
        xt_vis,
        z_tex,
        z_vis,
        z_int,
        x_hat: Some(x_hat),
        z_hat: Some(z_hat),
        u: Some(u),
        g,
        h,
        r,
    }
}
