//! Per-pixel sorted alpha compositing of projected 3D Gaussians, recorded as
//! a single tape primitive with a hand-derived backward pass.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};

use super::{Intrinsics, RenderConfig};
use crate::numerics::{Primitive, Tensor, Var};

pub const ALPHA_MAX: f64 = 0.999;
/// Output channels per pixel: r, g, b, alpha, depth.
pub const RENDER_CHANNELS: usize = 5;

const SH_C1: f64 = 0.488_602_511_902_919_9;

/// Per-Gaussian projection state shared by forward and backward.
#[derive(Clone, Debug)]
pub(crate) struct Geo {
    pub p: Vector3<f64>,
    pub j: Matrix2x3<f64>,
    pub rq: Matrix3<f64>,
    pub m: Matrix3<f64>,
    pub sigma3: Matrix3<f64>,
    pub sigmac: Matrix3<f64>,
    pub cov: Matrix2<f64>,
    pub conic: Matrix2<f64>,
    pub mean: Vector2<f64>,
}

pub(crate) fn quat_to_rot(q: &[f64]) -> Matrix3<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Vector-Jacobian product of [`quat_to_rot`].
fn quat_to_rot_vjp(q: &[f64], g: &Matrix3<f64>) -> [f64; 4] {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let gw = 2.0 * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)]
        + x * g[(2, 1)]);
    let gx = 2.0
        * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)]
            + z * g[(2, 0)]
            + w * g[(2, 1)]
            - 2.0 * x * g[(2, 2)]);
    let gy = 2.0
        * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)]
            - w * g[(2, 0)]
            + z * g[(2, 1)]
            - 2.0 * y * g[(2, 2)]);
    let gz = 2.0
        * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)] - 2.0 * z * g[(1, 1)]
            + y * g[(1, 2)]
            + x * g[(2, 0)]
            + y * g[(2, 1)]);
    [gw, gx, gy, gz]
}

/// EWA projection of one Gaussian; `None` if it lies behind the near plane
/// or its 2D covariance is not positive definite.
pub(crate) fn project_one(
    mean: &[f64],
    quat: &[f64],
    scale: &[f64],
    w: &Matrix3<f64>,
    t: &Vector3<f64>,
    intr: &Intrinsics,
    cfg: &RenderConfig,
) -> Option<Geo> {
    let mu = Vector3::new(mean[0], mean[1], mean[2]);
    let p = w * mu + t;
    if !(p.z > cfg.near) {
        return None;
    }
    let rq = quat_to_rot(quat);
    let m = rq * Matrix3::from_diagonal(&Vector3::new(scale[0], scale[1], scale[2]));
    let sigma3 = m * m.transpose();
    let sigmac = w * sigma3 * w.transpose();
    let (fx, fy) = (intr.fx, intr.fy);
    let iz = 1.0 / p.z;
    let j = Matrix2x3::new(
        fx * iz,
        0.0,
        -fx * p.x * iz * iz,
        0.0,
        fy * iz,
        -fy * p.y * iz * iz,
    );
    let cov = j * sigmac * j.transpose() + Matrix2::identity() * cfg.cov_eps;
    let det = cov[(0, 0)] * cov[(1, 1)] - cov[(0, 1)] * cov[(1, 0)];
    if !(det > 0.0) {
        return None;
    }
    let conic = Matrix2::new(cov[(1, 1)], -cov[(0, 1)], -cov[(1, 0)], cov[(0, 0)]) / det;
    let mean2 = Vector2::new(fx * p.x * iz + intr.cx, fy * p.y * iz + intr.cy);
    Some(Geo {
        p,
        j,
        rq,
        m,
        sigma3,
        sigmac,
        cov,
        conic,
        mean: mean2,
    })
}

fn sh_color(coeffs: &[f64], degree: usize, dir: &Vector3<f64>) -> [f64; 3] {
    if degree == 0 {
        return [coeffs[0], coeffs[1], coeffs[2]];
    }
    let mut c = [0.0; 3];
    for (ch, out) in c.iter_mut().enumerate() {
        let a = &coeffs[ch * 4..ch * 4 + 4];
        *out = a[0] + SH_C1 * (-dir.y * a[1] + dir.z * a[2] - dir.x * a[3]);
    }
    c
}

/// Number of color coefficients per Gaussian for an SH degree.
pub fn color_width(degree: usize) -> usize {
    assert!(degree <= 1, "SH degree above 1 is not supported");
    3 * (degree + 1) * (degree + 1)
}

#[derive(Clone, Copy, Debug)]
struct Contrib {
    idx: u32,
    /// Unclamped Gaussian falloff `exp(power)`.
    falloff: f64,
    /// Effective alpha after clamping.
    a: f64,
    /// Transmittance before this contribution.
    trans: f64,
    clamped: bool,
}

struct Splat {
    intr: Intrinsics,
    cfg: RenderConfig,
    degree: usize,
    geos: Vec<Option<Geo>>,
    colors: Vec<[f64; 3]>,
    offsets: Vec<usize>,
    contribs: Vec<Contrib>,
}

/// Tape inputs of a render call.
#[derive(Clone, Copy, Debug)]
pub struct SplatVars<'t> {
    /// `[N, 3]` centers in the canonical frame.
    pub means: Var<'t>,
    /// `[N, 1]` opacities in `(0, 1)`.
    pub opacity: Var<'t>,
    /// `[N, 4]` rotations `(w, x, y, z)`, expected unit-norm.
    pub quats: Var<'t>,
    /// `[N, 3]` positive axis scales.
    pub scales: Var<'t>,
    /// `[N, 3 (k+1)^2]` color coefficients.
    pub colors: Var<'t>,
}

/// World-to-camera rotation `[3, 3]` and translation `[3]` on the tape.
#[derive(Clone, Copy, Debug)]
pub struct CameraVars<'t> {
    pub rotation: Var<'t>,
    pub translation: Var<'t>,
}

fn camera_center(w: &Matrix3<f64>, t: &Vector3<f64>) -> Vector3<f64> {
    -(w.transpose() * t)
}

/// Renders to a `[H*W, 5]` tensor of (r, g, b, alpha, depth) per pixel in
/// row-major pixel order.
pub fn render_vars<'t>(
    splats: SplatVars<'t>,
    camera: CameraVars<'t>,
    intr: &Intrinsics,
    cfg: &RenderConfig,
) -> Var<'t> {
    let (value, prim) = {
        let means = splats.means.value();
        let opacity = splats.opacity.value();
        let quats = splats.quats.value();
        let scales = splats.scales.value();
        let colors = splats.colors.value();
        let rot = camera.rotation.value();
        let tr = camera.translation.value();
        let n = means.rows();
        assert_eq!(means.cols(), 3, "means must be [N, 3]");
        assert_eq!(opacity.numel(), n, "opacity must have N entries");
        assert_eq!(quats.shape(), &[n, 4], "quats must be [N, 4]");
        assert_eq!(scales.shape(), &[n, 3], "scales must be [N, 3]");
        let cw = colors.cols();
        let degree = match cw {
            3 => 0,
            12 => 1,
            _ => panic!("colors must have 3 or 12 columns, got {cw}"),
        };
        assert_eq!(colors.rows(), n);
        assert_eq!(rot.numel(), 9);
        assert_eq!(tr.numel(), 3);
        let w = Matrix3::from_row_slice(rot.data());
        let t = Vector3::from_column_slice(tr.data());
        let center = camera_center(&w, &t);
        forward(
            means.data(),
            opacity.data(),
            quats.data(),
            scales.data(),
            colors.data(),
            degree,
            &w,
            &t,
            &center,
            intr,
            cfg,
        )
    };
    let tape = splats.means.tape();
    tape.record(
        prim,
        &[
            splats.means,
            splats.opacity,
            splats.quats,
            splats.scales,
            splats.colors,
            camera.rotation,
            camera.translation,
        ],
        value,
    )
}

/// Per-pixel compositing weights `alpha_i * T_i`, front to back, paired
/// with the Gaussian index.
pub(crate) fn pixel_weights(t: &super::SplatTensors, rot: &Tensor, tr: &Tensor, intr: &Intrinsics, cfg: &RenderConfig) -> Vec<Vec<(usize, f64)>> {
    let degree = if t.colors.cols() == 3 { 0 } else { 1 };
    let w = Matrix3::from_row_slice(rot.data());
    let tv = Vector3::from_column_slice(tr.data());
    let (_, splat) = forward(
        t.means.data(),
        t.opacity.data(),
        t.quats.data(),
        t.scales.data(),
        t.colors.data(),
        degree,
        &w,
        &tv,
        &camera_center(&w, &tv),
        intr,
        cfg,
    );
    splat
        .offsets
        .windows(2)
        .map(|r| splat.contribs[r[0]..r[1]].iter().map(|c| (c.idx as usize, c.a * c.trans)).collect())
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn forward(
    means: &[f64],
    opacity: &[f64],
    quats: &[f64],
    scales: &[f64],
    colors: &[f64],
    degree: usize,
    w: &Matrix3<f64>,
    t: &Vector3<f64>,
    center: &Vector3<f64>,
    intr: &Intrinsics,
    cfg: &RenderConfig,
) -> (Tensor, Splat) {
    let n = opacity.len();
    let cw = color_width(degree);
    let (width, height) = (intr.width, intr.height);
    let npix = width * height;
    let mut geos = Vec::with_capacity(n);
    let mut cols = Vec::with_capacity(n);
    let mut bins: Vec<Vec<(f64, u32)>> = vec![Vec::new(); npix];
    for i in 0..n {
        let geo = project_one(
            &means[i * 3..i * 3 + 3],
            &quats[i * 4..i * 4 + 4],
            &scales[i * 3..i * 3 + 3],
            w,
            t,
            intr,
            cfg,
        );
        let mu = Vector3::new(means[i * 3], means[i * 3 + 1], means[i * 3 + 2]);
        let v = mu - center;
        let dir = if v.norm() > 0.0 { v / v.norm() } else { Vector3::z() };
        cols.push(sh_color(&colors[i * cw..(i + 1) * cw], degree, &dir));
        geos.push(geo);
    }
    // Binning in global depth order leaves every pixel list sorted.
    let mut order: Vec<(f64, u32)> = geos
        .iter()
        .enumerate()
        .filter_map(|(i, g)| g.as_ref().map(|g| (g.p.z, i as u32)))
        .collect();
    order.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    for &(z, idx) in &order {
        let g = geos[idx as usize].as_ref().unwrap();
        let (x0, x1, y0, y1) = match cfg.cull_sigma {
            Some(k) => {
                let (a, b, c) = (g.cov[(0, 0)], g.cov[(0, 1)], g.cov[(1, 1)]);
                let mid = 0.5 * (a + c);
                let lmax = mid + (mid * mid - (a * c - b * b)).max(0.0).sqrt();
                let r = k * lmax.sqrt();
                let lo_x = (g.mean.x - r - 0.5).ceil().max(0.0);
                let hi_x = (g.mean.x + r - 0.5).floor().min(width as f64 - 1.0);
                let lo_y = (g.mean.y - r - 0.5).ceil().max(0.0);
                let hi_y = (g.mean.y + r - 0.5).floor().min(height as f64 - 1.0);
                if !(lo_x <= hi_x && lo_y <= hi_y) {
                    continue;
                }
                (lo_x as usize, hi_x as usize, lo_y as usize, hi_y as usize)
            }
            None => (0, width - 1, 0, height - 1),
        };
        for py in y0..=y1 {
            for px in x0..=x1 {
                bins[py * width + px].push((z, idx));
            }
        }
    }

    let mut out = vec![0.0; npix * RENDER_CHANNELS];
    let mut offsets = Vec::with_capacity(npix + 1);
    let mut contribs = Vec::new();
    for (pix, bin) in bins.iter().enumerate() {
        offsets.push(contribs.len());
        let px = (pix % width) as f64 + 0.5;
        let py = (pix / width) as f64 + 0.5;
        let mut trans = 1.0;
        let mut rgb = [0.0; 3];
        let mut depth = 0.0;
        for &(z, idx) in bin.iter() {
            let i = idx as usize;
            let g = geos[i].as_ref().unwrap();
            let dx = px - g.mean.x;
            let dy = py - g.mean.y;
            let c = &g.conic;
            let power = -0.5 * (c[(0, 0)] * dx * dx + 2.0 * c[(0, 1)] * dx * dy + c[(1, 1)] * dy * dy);
            let falloff = power.exp();
            let raw = opacity[i] * falloff;
            let (a, clamped) = if raw > ALPHA_MAX {
                (ALPHA_MAX, true)
            } else {
                (raw.max(0.0), raw < 0.0)
            };
            let wgt = a * trans;
            for (o, col) in rgb.iter_mut().zip(cols[i]) {
                *o += wgt * col;
            }
            depth += wgt * z;
            contribs.push(Contrib {
                idx,
                falloff,
                a,
                trans,
                clamped,
            });
            trans *= 1.0 - a;
        }
        let o = &mut out[pix * RENDER_CHANNELS..(pix + 1) * RENDER_CHANNELS];
        for ch in 0..3 {
            o[ch] = rgb[ch] + trans * cfg.background[ch];
        }
        o[3] = 1.0 - trans;
        o[4] = depth;
    }
    offsets.push(contribs.len());
    (
        Tensor::new([npix, RENDER_CHANNELS], out),
        Splat {
            intr: *intr,
            cfg: cfg.clone(),
            degree,
            geos,
            colors: cols,
            offsets,
            contribs,
        },
    )
}

impl Primitive for Splat {
    fn name(&self) -> &'static str {
        "render"
    }

    fn vjp(&self, x: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (means, opacity, quats, scales, colors) =
            (x[0].data(), x[1].data(), x[2].data(), x[3].data(), x[4].data());
        let w = Matrix3::from_row_slice(x[5].data());
        let t = Vector3::from_column_slice(x[6].data());
        let n = opacity.len();
        let width = self.intr.width;
        let cw = color_width(self.degree);

        // Screen-space gradient accumulators.
        let mut g_mean2: Vec<Vector2<f64>> = vec![Vector2::zeros(); n];
        let mut g_conic = vec![[0.0f64; 3]; n];
        let mut g_opac = vec![0.0; n];
        let mut g_col = vec![[0.0f64; 3]; n];
        let mut g_z = vec![0.0; n];

        for pix in 0..self.offsets.len() - 1 {
            let gp = &g[pix * RENDER_CHANNELS..(pix + 1) * RENDER_CHANNELS];
            let list = &self.contribs[self.offsets[pix]..self.offsets[pix + 1]];
            let px = (pix % width) as f64 + 0.5;
            let py = (pix / width) as f64 + 0.5;
            // Remainders of everything behind the current contribution.
            let mut rem_c = self.cfg.background;
            let mut rem_z = 0.0;
            let mut rem_a = 0.0;
            for c in list.iter().rev() {
                let i = c.idx as usize;
                let geo = self.geos[i].as_ref().unwrap();
                let col = self.colors[i];
                let z = geo.p.z;
                let wgt = c.a * c.trans;
                for ch in 0..3 {
                    g_col[i][ch] += gp[ch] * wgt;
                }
                g_z[i] += gp[4] * wgt;
                let mut ga = 0.0;
                for ch in 0..3 {
                    ga += gp[ch] * c.trans * (col[ch] - rem_c[ch]);
                }
                ga += gp[4] * c.trans * (z - rem_z);
                ga += gp[3] * c.trans * (1.0 - rem_a);
                for ch in 0..3 {
                    rem_c[ch] = c.a * col[ch] + (1.0 - c.a) * rem_c[ch];
                }
                rem_z = c.a * z + (1.0 - c.a) * rem_z;
                rem_a = c.a + (1.0 - c.a) * rem_a;
                if c.clamped {
                    continue;
                }
                g_opac[i] += ga * c.falloff;
                let gpow = ga * c.a;
                let dx = px - geo.mean.x;
                let dy = py - geo.mean.y;
                let cn = &geo.conic;
                g_mean2[i].x += gpow * (cn[(0, 0)] * dx + cn[(0, 1)] * dy);
                g_mean2[i].y += gpow * (cn[(0, 1)] * dx + cn[(1, 1)] * dy);
                g_conic[i][0] += gpow * (-0.5 * dx * dx);
                g_conic[i][1] += gpow * (-dx * dy);
                g_conic[i][2] += gpow * (-0.5 * dy * dy);
            }
        }

        let mut gm = vec![0.0; n * 3];
        let mut gq = vec![0.0; n * 4];
        let mut gs = vec![0.0; n * 3];
        let mut gc = vec![0.0; n * cw];
        let mut gw = Matrix3::zeros();
        let mut gt = Vector3::zeros();
        let center = camera_center(&w, &t);
        let (fx, fy) = (self.intr.fx, self.intr.fy);

        for i in 0..n {
            // Color coefficients and the view-direction path.
            let gcol = g_col[i];
            if self.degree == 0 {
                gc[i * cw..i * cw + 3].copy_from_slice(&gcol);
            } else {
                let mu = Vector3::new(means[i * 3], means[i * 3 + 1], means[i * 3 + 2]);
                let v = mu - center;
                let vn = v.norm();
                if vn > 0.0 {
                    let d = v / vn;
                    let mut g_dir = Vector3::zeros();
                    for ch in 0..3 {
                        let a = &colors[i * cw + ch * 4..i * cw + ch * 4 + 4];
                        let o = &mut gc[i * cw + ch * 4..i * cw + ch * 4 + 4];
                        o[0] = gcol[ch];
                        o[1] = -SH_C1 * d.y * gcol[ch];
                        o[2] = SH_C1 * d.z * gcol[ch];
                        o[3] = -SH_C1 * d.x * gcol[ch];
                        g_dir += SH_C1 * gcol[ch] * Vector3::new(-a[3], -a[1], a[2]);
                    }
                    let g_v = (g_dir - d * d.dot(&g_dir)) / vn;
                    for k in 0..3 {
                        gm[i * 3 + k] += g_v[k];
                    }
                    // center = -W^T t
                    let g_o = -g_v;
                    gt -= w * g_o;
                    gw -= t * g_o.transpose();
                }
            }

            let Some(geo) = &self.geos[i] else { continue };
            let gmean = g_mean2[i];
            let gcn = g_conic[i];
            if gmean == Vector2::zeros() && gcn == [0.0; 3] && g_z[i] == 0.0 {
                continue;
            }
            let gcn_m = Matrix2::new(gcn[0], 0.5 * gcn[1], 0.5 * gcn[1], gcn[2]);
            // conic = cov^-1
            let g_cov = -(geo.conic * gcn_m * geo.conic);
            // cov = J Sc J^T + eps I
            let g_j = 2.0 * g_cov * geo.j * geo.sigmac;
            let g_sigmac = geo.j.transpose() * g_cov * geo.j;
            // Sc = W S3 W^T
            gw += 2.0 * g_sigmac * w * geo.sigma3;
            let g_sigma3 = w.transpose() * g_sigmac * w;
            // S3 = M M^T, M = R(q) diag(s)
            let g_m = 2.0 * g_sigma3 * geo.m;
            let s = &scales[i * 3..i * 3 + 3];
            let mut g_r = Matrix3::zeros();
            for r in 0..3 {
                for c in 0..3 {
                    g_r[(r, c)] = g_m[(r, c)] * s[c];
                    gs[i * 3 + c] += g_m[(r, c)] * geo.rq[(r, c)];
                }
            }
            let dq = quat_to_rot_vjp(&quats[i * 4..i * 4 + 4], &g_r);
            gq[i * 4..i * 4 + 4].copy_from_slice(&dq);

            // Camera-space point: mean2d, J, and depth.
            let p = geo.p;
            let iz = 1.0 / p.z;
            let iz2 = iz * iz;
            let iz3 = iz2 * iz;
            let mut g_p = Vector3::new(
                gmean.x * fx * iz,
                gmean.y * fy * iz,
                -gmean.x * fx * p.x * iz2 - gmean.y * fy * p.y * iz2 + g_z[i],
            );
            g_p.x += -g_j[(0, 2)] * fx * iz2;
            g_p.y += -g_j[(1, 2)] * fy * iz2;
            g_p.z += -g_j[(0, 0)] * fx * iz2 + g_j[(0, 2)] * 2.0 * fx * p.x * iz3
                - g_j[(1, 1)] * fy * iz2
                + g_j[(1, 2)] * 2.0 * fy * p.y * iz3;
            // p = W mu + t
            let mu = Vector3::new(means[i * 3], means[i * 3 + 1], means[i * 3 + 2]);
            let g_mu = w.transpose() * g_p;
            for k in 0..3 {
                gm[i * 3 + k] += g_mu[k];
            }
            gt += g_p;
            gw += g_p * mu.transpose();
        }

        let gw_flat: Vec<f64> = (0..9).map(|k| gw[(k / 3, k % 3)]).collect();
        vec![
            needs[0].then_some(gm),
            needs[1].then_some(g_opac),
            needs[2].then_some(gq),
            needs[3].then_some(gs),
            needs[4].then_some(gc),
            needs[5].then_some(gw_flat),
            needs[6].then(|| gt.iter().copied().collect()),
        ]
    }
}
