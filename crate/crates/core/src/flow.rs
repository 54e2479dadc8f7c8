//! Optical-flow subproblem.
//!
//! With the latent frames fixed, the fidelity `ρ` (data term plus temporal
//! L1 terms) is linearized around the current flows and the resulting
//! edge-weighted TV problem is stepped with projected primal-dual updates.
//! Every accepted step is checked against the true objective.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::blur::{apply_blur, blur_pixel};
use crate::energy::{EnergyContext, EnergyLedger};
use crate::error::{check_dims, Error, Result};
use crate::image::{
    det_sum_by, derivative_normal, diff_x, diff_x_adjoint, diff_y, diff_y_adjoint, median3, FlowField,
    Footprint, Image,
};
use crate::params::SolverParams;
use crate::state::{Direction, DualState, SequenceState};

/// Edge-aware TV weight `g(x) = ν exp(−(|∇L̄(x)| / σ_I)²)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeMap {
    pub width: usize,
    pub height: usize,
    pub g: Vec<f64>,
}

impl EdgeMap {
    pub fn max(&self) -> f64 {
        self.g.iter().copied().fold(0.0, f64::max)
    }
}

pub fn compute_edge_map(l_bar: &Image, nu: f64, sigma_i: f64) -> EdgeMap {
    let (w, h) = l_bar.dims();
    let n = w * h;
    let mut mag2 = vec![0.0; n];
    let mut gx = vec![0.0; n];
    let mut gy = vec![0.0; n];
    for c in 0..l_bar.channels() {
        diff_x(l_bar.plane(c), w, h, &mut gx);
        diff_y(l_bar.plane(c), w, h, &mut gy);
        for k in 0..n {
            mag2[k] += gx[k] * gx[k] + gy[k] * gy[k];
        }
    }
    let s2 = sigma_i * sigma_i;
    EdgeMap {
        width: w,
        height: h,
        g: mag2.iter().map(|m| nu * (-m / s2).exp()).collect(),
    }
}

/// `u_{i→k}(x) = u_a(x) + u_b(x + u_a(x))` for `u_a: i→j` and `u_b: j→k`.
pub fn compose_flow(u_a: &FlowField, u_b: &FlowField) -> Result<FlowField> {
    check_dims(u_a.dims(), u_b.dims())?;
    let (w, h) = u_a.dims();
    let pairs: Vec<(f64, f64)> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let (a, b) = u_a.at(i);
            let (c, d) = u_b.sample((i % w) as f64 + a, (i / w) as f64 + b);
            (a + c, b + d)
        })
        .collect();
    let (u, v) = pairs.into_iter().unzip();
    FlowField::from_parts(w, h, u, v)
}

/// Local model of `ρ` around the current flows for one unit flow: value,
/// gradient, and a separable curvature `Σ_x δ(x)ᵀ M(x) δ(x)` that majorizes
/// the Gauss–Newton term of every residual (L1 residuals through their
/// reweighted quadratic bound).
#[derive(Debug, Clone, PartialEq)]
pub struct RhoLinearization {
    /// Per-pixel value of the terms owned by the source frame (its data term
    /// and its temporal terms) at the expansion point.
    pub value: Vec<f64>,
    /// `∂ρ/∂u` and `∂ρ/∂v` at every pixel.
    pub grad_u: Vec<f64>,
    pub grad_v: Vec<f64>,
    /// Entries of the symmetric 2×2 curvature `M(x)`.
    pub m_uu: Vec<f64>,
    pub m_uv: Vec<f64>,
    pub m_vv: Vec<f64>,
}

impl RhoLinearization {
    pub fn zeros(n: usize) -> Self {
        RhoLinearization {
            value: vec![0.0; n],
            grad_u: vec![0.0; n],
            grad_v: vec![0.0; n],
            m_uu: vec![0.0; n],
            m_uv: vec![0.0; n],
            m_vv: vec![0.0; n],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.value
            .iter()
            .chain(&self.grad_u)
            .chain(&self.grad_v)
            .chain(&self.m_uu)
            .chain(&self.m_uv)
            .chain(&self.m_vv)
            .all(|v| v.is_finite())
    }

    fn add_curvature(&mut self, k: usize, weight: f64, a: (f64, f64)) {
        self.m_uu[k] += weight * a.0 * a.0;
        self.m_uv[k] += weight * a.0 * a.1;
        self.m_vv[k] += weight * a.1 * a.1;
    }
}

/// Residual magnitude below which an L1 term is weighted as if it were this
/// large in its quadratic bound.
pub const RESIDUAL_FLOOR: f64 = 0.01;

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Gradient of `ρ` with respect to every free unit flow.
///
/// The data part differentiates each bilinear sample of the blur through its
/// position `x + t_s u(x)`. The temporal part back-propagates through the
/// whole correspondence chain, so composed flows (|n| > 1) contribute to the
/// unit flows they are built from.
pub fn rho_gradients(
    state: &SequenceState,
    params: &SolverParams,
    samples: usize,
) -> Result<BTreeMap<(usize, Direction), RhoLinearization>> {
    state.validate()?;
    let (w, h) = state.dims();
    let n = w * h;
    let t = state.len();
    let mut out: BTreeMap<(usize, Direction), RhoLinearization> = state
        .free_flows()
        .into_iter()
        .map(|k| (k, RhoLinearization::zeros(n)))
        .collect();
    let mut values = vec![vec![0.0; n]; t];

    if params.data_weight() > 0.0 {
        let channels = state.channels();
        for i in 0..t {
            let (jac_f, jac_b, lap, val) = data_jacobians(state, i, params.data_weight(), samples)?;
            values[i].iter_mut().zip(&val).for_each(|(a, b)| *a += b);
            // kernel flows map back to unit flows, mirrored at the ends
            let (fwd_real, bwd_real) = (i + 1 < t, i >= 1);
            let targets = [
                (
                    &jac_f,
                    if fwd_real {
                        (Direction::Forward, 1.0)
                    } else {
                        (Direction::Backward, -1.0)
                    },
                ),
                (
                    &jac_b,
                    if bwd_real {
                        (Direction::Backward, 1.0)
                    } else {
                        (Direction::Forward, -1.0)
                    },
                ),
            ];
            let mut per_flow: BTreeMap<Direction, Vec<(f64, f64)>> = BTreeMap::new();
            for (jac, (dir, s)) in targets {
                let acc = per_flow
                    .entry(dir)
                    .or_insert_with(|| vec![(0.0, 0.0); n * channels]);
                for (a, j) in acc.iter_mut().zip(jac) {
                    a.0 += s * j.0;
                    a.1 += s * j.1;
                }
            }
            for (dir, jac) in per_flow {
                let lin = out.get_mut(&(i, dir)).expect("free flow");
                for c in 0..channels {
                    for k in 0..n {
                        let j = jac[c * n + k];
                        let l = 2.0 * params.data_weight() * lap[c * n + k];
                        lin.grad_u[k] += l * j.0;
                        lin.grad_v[k] += l * j.1;
                        // ‖∂(Jδ)‖² ≤ 8 Σ_x (J(x)δ(x))² for forward differences
                        lin.add_curvature(k, 8.0 * params.data_weight(), j);
                    }
                }
            }
        }
    }

    for i in 0..t {
        for off in params.offsets() {
            if !state.has_offset(i, off) {
                continue;
            }
            let mu = params.mu_for(off);
            temporal_gradient(state, i, off, mu, &mut out, &mut values[i]);
        }
    }

    for ((i, _), lin) in out.iter_mut() {
        lin.value.copy_from_slice(&values[*i]);
    }
    Ok(out)
}

/// Jacobians of frame `i`'s blurred latent with respect to its forward and
/// backward kernel flows (per channel, index `c·n + k`), the derivative-domain
/// adjoint `Σ_∂ ∂ᵀ∂ (KL − B)` per channel, and the per-pixel data energy.
#[allow(clippy::type_complexity)]
fn data_jacobians(
    state: &SequenceState,
    i: usize,
    lambda: f64,
    samples: usize,
) -> Result<(Vec<(f64, f64)>, Vec<(f64, f64)>, Vec<f64>, Vec<f64>)> {
    let (w, h) = state.dims();
    let n = w * h;
    let bp = crate::blur::BlurParams::new(state.duty[i], samples)?;
    let (kf, kb) = state.kernel_flows(i);
    let l = &state.latent[i];
    let kl = apply_blur(l, &kf, &kb, bp)?;
    let channels = l.channels();
    let mut lap = vec![0.0; n * channels];
    let mut val = vec![0.0; n];
    let mut r = vec![0.0; n];
    let mut gx = vec![0.0; n];
    let mut gy = vec![0.0; n];
    for c in 0..channels {
        let (p, q) = (kl.plane(c), state.blurry[i].plane(c));
        for k in 0..n {
            r[k] = p[k] - q[k];
        }
        derivative_normal(&r, w, h, &mut lap[c * n..(c + 1) * n]);
        diff_x(&r, w, h, &mut gx);
        diff_y(&r, w, h, &mut gy);
        for k in 0..n {
            val[k] += lambda * (gx[k] * gx[k] + gy[k] * gy[k]);
        }
    }
    let times = bp.sample_times();
    let norm = 1.0 / (2 * samples) as f64;
    let jac_for = |flow: &FlowField| -> Vec<(f64, f64)> {
        (0..n * channels)
            .into_par_iter()
            .map(|ck| {
                let (c, k) = (ck / n, ck % n);
                let (x, y) = ((k % w) as f64, (k / w) as f64);
                let (du, dv) = flow.at(k);
                let mut acc = (0.0, 0.0);
                for &t in &times {
                    let fp = Footprint::new(w, h, x + t * du, y + t * dv);
                    let (sx, sy) = fp.gradient(l.plane(c));
                    acc.0 += norm * t * sx;
                    acc.1 += norm * t * sy;
                }
                acc
            })
            .collect()
    };
    Ok((jac_for(&kf), jac_for(&kb), lap, val))
}

/// Reverse-mode gradient of `μ Σ_x |L_i(x) − L_{i+n}(c_M(x))|`, where the
/// chain `c_{m+1} = c_m + u_m(c_m)` follows the unit flows from `i` to `i+n`,
/// together with the reweighted curvature `μ a aᵀ / (2 max(|r|, floor))`
/// spread over the bilinear footprint of each chain point.
fn temporal_gradient(
    state: &SequenceState,
    i: usize,
    off: isize,
    mu: f64,
    out: &mut BTreeMap<(usize, Direction), RhoLinearization>,
    value: &mut [f64],
) {
    let (w, h) = state.dims();
    let n = w * h;
    let chain = state.chain(i, off);
    let legs: Vec<&FlowField> = chain.iter().map(|&(j, d)| state.unit_flow(j, d)).collect();
    let li = &state.latent[i];
    let lj = &state.latent[(i as isize + off) as usize];
    let channels = li.channels();

    // forward pass: chain positions, and per channel the residual and the
    // derivative of the residual with respect to the chain end
    type Forward = (Vec<(f64, f64)>, Vec<(f64, (f64, f64))>, f64);
    let per_pixel: Vec<Forward> = (0..n)
        .into_par_iter()
        .map(|k| {
            let mut pos = Vec::with_capacity(legs.len() + 1);
            let mut c = ((k % w) as f64, (k / w) as f64);
            pos.push(c);
            for leg in &legs {
                let d = leg.sample(c.0, c.1);
                c = (c.0 + d.0, c.1 + d.1);
                pos.push(c);
            }
            let fp = Footprint::new(w, h, c.0, c.1);
            let mut val = 0.0;
            let mut res = Vec::with_capacity(channels);
            for ch in 0..channels {
                let r = li.plane(ch)[k] - fp.apply(lj.plane(ch));
                val += mu * r.abs();
                let (gx, gy) = fp.gradient(lj.plane(ch));
                res.push((r, (-gx, -gy)));
            }
            (pos, res, val)
        })
        .collect();

    // reverse pass, sequential for a fixed accumulation order; `p` is the
    // Jacobian of the chain end with respect to the current chain point
    for (k, (pos, res, val)) in per_pixel.into_iter().enumerate() {
        value[k] += val;
        if res.iter().all(|(_, e)| *e == (0.0, 0.0)) {
            continue;
        }
        let mut p = [[1.0, 0.0], [0.0, 1.0]];
        for m in (0..legs.len()).rev() {
            let c = pos[m];
            let fp = Footprint::new(w, h, c.0, c.1);
            let lin = out.get_mut(&chain[m]).expect("chain uses free flows");
            for &(r, e) in &res {
                let a = (
                    e.0 * p[0][0] + e.1 * p[1][0],
                    e.0 * p[0][1] + e.1 * p[1][1],
                );
                let s = mu * sign(r);
                let wq = mu / (2.0 * r.abs().max(RESIDUAL_FLOOR));
                for q in 0..4 {
                    if fp.w[q] != 0.0 {
                        lin.grad_u[fp.idx[q]] += fp.w[q] * s * a.0;
                        lin.grad_v[fp.idx[q]] += fp.w[q] * s * a.1;
                        lin.add_curvature(fp.idx[q], fp.w[q] * wq, a);
                    }
                }
            }
            if m > 0 {
                let (ux, uy) = fp.gradient(&legs[m].u);
                let (vx, vy) = fp.gradient(&legs[m].v);
                let d = [[1.0 + ux, uy], [vx, 1.0 + vy]];
                p = [
                    [
                        p[0][0] * d[0][0] + p[0][1] * d[1][0],
                        p[0][0] * d[0][1] + p[0][1] * d[1][1],
                    ],
                    [
                        p[1][0] * d[0][0] + p[1][1] * d[1][0],
                        p[1][0] * d[0][1] + p[1][1] * d[1][1],
                    ],
                ];
            }
        }
    }
}

/// Linearization of `ρ` for the unit flow `u_{i→i+n}`, `|n| = 1`.
pub fn rho_gradient(
    state: &SequenceState,
    i: usize,
    n: isize,
    params: &SolverParams,
    samples: usize,
) -> Result<RhoLinearization> {
    let dir = Direction::from_offset(n).ok_or(Error::NotUnitOffset(n))?;
    if !state.has_flow(i, dir) {
        return Err(Error::InvalidParam {
            name: "frame",
            reason: format!("frame {i} has no flow towards offset {n}"),
        });
    }
    let mut all = rho_gradients(state, params, samples)?;
    Ok(all.remove(&(i, dir)).expect("free flow present"))
}

/// Step sizes, iteration count and curvature damping for [`update_flow`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowStepConfig {
    pub eta: f64,
    pub eps: f64,
    pub iters: usize,
    /// `κ ≥ 1`: the model curvature becomes `κM + (κ − 1) m̄ I`, with `m̄` the
    /// mean diagonal of `M`.
    pub damping: f64,
}

impl FlowStepConfig {
    /// `η = ε = 1 / (√8 · max g)`, or the explicit values from `params`.
    pub fn for_edge(params: &SolverParams, edge: &EdgeMap) -> Self {
        let gmax = edge.max();
        let base = if gmax > 0.0 {
            1.0 / (8f64.sqrt() * gmax)
        } else {
            1.0 / 8f64.sqrt()
        };
        FlowStepConfig {
            eta: params.eta_u.unwrap_or(base),
            eps: params.eps_u.unwrap_or(base),
            iters: params.flow_pd_iters,
            damping: 1.0,
        }
    }
}

/// Primal-dual iterations on the local flow model
/// `∇ρᵀδ + Σ_x δᵀMδ + Σ g |∇(u₀ + δ)|`, with over-relaxation of the primal
/// variable in the dual step. The primal proximal step is a 2×2 solve per
/// pixel.
///
/// `p` holds the dual planes `[∂x u, ∂y u, ∂x v, ∂y v]`.
pub fn update_flow(
    u0: &FlowField,
    lin: &RhoLinearization,
    edge: &EdgeMap,
    p: &[f64],
    cfg: FlowStepConfig,
) -> Result<(FlowField, Vec<f64>)> {
    let (w, h) = u0.dims();
    check_dims((w, h), (edge.width, edge.height))?;
    let n = w * h;
    if p.len() != 4 * n
        || [&lin.grad_u, &lin.grad_v, &lin.m_uu, &lin.m_uv, &lin.m_vv]
            .iter()
            .any(|x| x.len() != n)
    {
        return Err(Error::InvalidParam {
            name: "flow dual",
            reason: format!("expected {} dual and {n} model entries", 4 * n),
        });
    }
    let g = &edge.g;
    let kappa = cfg.damping.max(1.0);
    let mbar = (det_sum_by(n, |k| lin.m_uu[k] + lin.m_vv[k]) / (2 * n) as f64) * (kappa - 1.0);
    let inv_eps = 1.0 / cfg.eps;
    let mut u = u0.u.clone();
    let mut v = u0.v.clone();
    let mut ubar = u.clone();
    let mut vbar = v.clone();
    let mut p = p.to_vec();
    let mut d = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    let mut ax = vec![0.0; n];
    let mut ay = vec![0.0; n];
    let mut div = [vec![0.0; n], vec![0.0; n]];
    for _ in 0..cfg.iters {
        for (comp, field) in [&ubar, &vbar].into_iter().enumerate() {
            for (axis, diff) in [diff_x as fn(&[f64], usize, usize, &mut [f64]), diff_y]
                .into_iter()
                .enumerate()
            {
                diff(field, w, h, &mut d);
                let plane = &mut p[(2 * comp + axis) * n..(2 * comp + axis + 1) * n];
                plane
                    .par_iter_mut()
                    .zip(&d)
                    .zip(g)
                    .for_each(|((pk, dk), gk)| {
                        let z = *pk + cfg.eta * gk * dk;
                        *pk = z / z.abs().max(1.0);
                    });
            }
        }
        for (comp, out) in div.iter_mut().enumerate() {
            for k in 0..n {
                tmp[k] = g[k] * p[2 * comp * n + k];
            }
            diff_x_adjoint(&tmp, w, h, &mut ax);
            for k in 0..n {
                tmp[k] = g[k] * p[(2 * comp + 1) * n + k];
            }
            diff_y_adjoint(&tmp, w, h, &mut ay);
            out.iter_mut()
                .zip(ax.iter().zip(&ay))
                .for_each(|(o, (a, b))| *o = a + b);
        }
        let next: Vec<(f64, f64)> = (0..n)
            .into_par_iter()
            .map(|k| {
                // (2M' + I/ε) δ = (z − u₀)/ε − ∇ρ with z = u − ε Aᵀ(g p)
                let zu = u[k] - cfg.eps * div[0][k] - u0.u[k];
                let zv = v[k] - cfg.eps * div[1][k] - u0.v[k];
                let bu = zu * inv_eps - lin.grad_u[k];
                let bv = zv * inv_eps - lin.grad_v[k];
                let a11 = 2.0 * (kappa * lin.m_uu[k] + mbar) + inv_eps;
                let a22 = 2.0 * (kappa * lin.m_vv[k] + mbar) + inv_eps;
                let a12 = 2.0 * kappa * lin.m_uv[k];
                let det = a11 * a22 - a12 * a12;
                (
                    u0.u[k] + (a22 * bu - a12 * bv) / det,
                    u0.v[k] + (a11 * bv - a12 * bu) / det,
                )
            })
            .collect();
        for (k, (nu, nv)) in next.into_iter().enumerate() {
            ubar[k] = 2.0 * nu - u[k];
            vbar[k] = 2.0 * nv - v[k];
            u[k] = nu;
            v[k] = nv;
        }
    }
    Ok((FlowField::from_parts(w, h, u, v)?, p))
}

/// Offsets of the pixels whose flows are proposed at each pixel.
const PROPOSAL_OFFSETS: [(isize, isize); 12] = [
    (1, 0),
    (-1, 0),
    (2, 0),
    (-2, 0),
    (3, 0),
    (-3, 0),
    (0, 1),
    (0, -1),
    (0, 2),
    (0, -2),
    (0, 3),
    (0, -3),
];

/// Discrete propagation move for the unit flow `(i, dir)`: every pixel tries
/// the vectors of nearby pixels and keeps the one lowering its local cost
/// (the data residual differences it enters, the temporal terms whose chain
/// starts with it and its TV stencil). Continuous updates move boundaries by
/// a fraction of a pixel per step; this lets a motion boundary jump to where
/// the latents put it. All pixels are decided against the current field, so
/// the caller must check the result against the full objective.
///
/// Returns `None` when no pixel changes.
pub fn propose_from_neighbours(
    state: &SequenceState,
    params: &SolverParams,
    ctx: &EnergyContext,
    i: usize,
    dir: Direction,
) -> Result<Option<FlowField>> {
    let (w, h) = state.dims();
    let t = state.len();
    let n = w * h;
    let flow = state.unit_flow(i, dir);
    let edge = &ctx.edges[i];
    let lambda = params.data_weight();
    let bp = ctx.blur_params(state, i)?;
    let times = bp.sample_times();
    let norm = 1.0 / (2 * bp.samples) as f64;
    let (kf, kb) = state.kernel_flows(i);
    // which kernel slots the candidate occupies, with sign
    let slot_f = match dir {
        Direction::Forward if i + 1 < t => Some(1.0),
        Direction::Backward if i + 1 >= t => Some(-1.0),
        _ => None,
    };
    let slot_b = match dir {
        Direction::Backward if i >= 1 => Some(1.0),
        Direction::Forward if i == 0 => Some(-1.0),
        _ => None,
    };
    let latent = &state.latent[i];
    let blurry = &state.blurry[i];
    let channels = latent.channels();
    let residual = if lambda > 0.0 {
        let kl = apply_blur(latent, &kf, &kb, bp)?;
        (0..channels)
            .map(|c| {
                kl.plane(c)
                    .iter()
                    .zip(blurry.plane(c))
                    .map(|(a, b)| a - b)
                    .collect::<Vec<_>>()
            })
            .collect::<Vec<_>>()
    } else {
        Vec::new()
    };
    let chains: Vec<(f64, usize, Vec<(usize, Direction)>)> = params
        .offsets()
        .into_iter()
        .filter(|&m| Direction::from_offset(m) == Some(dir) && state.has_offset(i, m))
        .map(|m| {
            let chain = state.chain(i, m);
            (params.mu_for(m), (i as isize + m) as usize, chain[1..].to_vec())
        })
        .collect();

    let cost = |k: usize, c: (f64, f64)| -> f64 {
        let (x, y) = (k % w, k / w);
        let mut acc = 0.0;
        if lambda > 0.0 {
            let pf = slot_f.map_or(kf.at(k), |s| (s * c.0, s * c.1));
            let pb = slot_b.map_or(kb.at(k), |s| (s * c.0, s * c.1));
            let mut d = 0.0;
            for (ch, r) in residual.iter().enumerate() {
                let rk = blur_pixel(latent.plane(ch), w, h, k, pf, pb, &times, norm) - blurry.plane(ch)[k];
                if x + 1 < w {
                    d += (r[k + 1] - rk).powi(2);
                }
                if x > 0 {
                    d += (rk - r[k - 1]).powi(2);
                }
                if y + 1 < h {
                    d += (r[k + w] - rk).powi(2);
                }
                if y > 0 {
                    d += (rk - r[k - w]).powi(2);
                }
            }
            acc += lambda * d;
        }
        for (mu, j, rest) in &chains {
            let (mut px, mut py) = (x as f64 + c.0, y as f64 + c.1);
            for &(f, d) in rest {
                let (du, dv) = state.unit_flow(f, d).sample(px, py);
                px += du;
                py += dv;
            }
            let fp = Footprint::new(w, h, px, py);
            let mut r = 0.0;
            for ch in 0..channels {
                r += (latent.plane(ch)[k] - fp.apply(state.latent[*j].plane(ch))).abs();
            }
            acc += mu * r;
        }
        let mut tv = 0.0;
        for (comp, v) in [(&flow.u, c.0), (&flow.v, c.1)] {
            if x + 1 < w {
                tv += edge.g[k] * (comp[k + 1] - v).abs();
            }
            if x > 0 {
                tv += edge.g[k - 1] * (v - comp[k - 1]).abs();
            }
            if y + 1 < h {
                tv += edge.g[k] * (comp[k + w] - v).abs();
            }
            if y > 0 {
                tv += edge.g[k - w] * (v - comp[k - w]).abs();
            }
        }
        acc + tv
    };

    let picks: Vec<Option<(f64, f64)>> = (0..n)
        .into_par_iter()
        .map(|k| {
            let (x, y) = ((k % w) as isize, (k / w) as isize);
            let own = flow.at(k);
            let mut best = (cost(k, own), own);
            for (dx, dy) in PROPOSAL_OFFSETS {
                let (sx, sy) = (x + dx, y + dy);
                if sx < 0 || sy < 0 || sx >= w as isize || sy >= h as isize {
                    continue;
                }
                let cand = flow.at(sy as usize * w + sx as usize);
                if cand == own {
                    continue;
                }
                let e = cost(k, cand);
                if e < best.0 {
                    best = (e, cand);
                }
            }
            (best.1 != own).then_some(best.1)
        })
        .collect();
    if picks.iter().all(Option::is_none) {
        return Ok(None);
    }
    let mut out = flow.clone();
    for (k, p) in picks.into_iter().enumerate() {
        if let Some((u, v)) = p {
            out.u[k] = u;
            out.v[k] = v;
        }
    }
    Ok(Some(out))
}

/// Damping increases (each ×4) tried before a flow update is rejected.
const MAX_BACKTRACKS: usize = 8;

/// Outcome of one [`estimate_flows`] call.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FlowReport {
    pub accepted: usize,
    pub rejected: usize,
    /// Neighbour-propagation moves that lowered the objective.
    pub propagated: usize,
    pub energy_before: f64,
    pub energy_after: f64,
}

/// Re-estimate all unit flows with the latents fixed.
///
/// Each relinearization builds the local model of `ρ` once, then visits every
/// free unit flow in order: run [`update_flow`], median-filter the result and
/// keep it only if the full objective does not increase. A rejected step is
/// retried with four times the curvature damping; the damping that worked
/// last is remembered per flow. Each relinearization ends with one
/// [`propose_from_neighbours`] move per flow, kept when it lowers the
/// objective.
pub fn estimate_flows(
    state: &mut SequenceState,
    params: &SolverParams,
    ctx: &EnergyContext,
    duals: &mut DualState,
    damping: &mut BTreeMap<(usize, Direction), f64>,
) -> Result<FlowReport> {
    let (w, h) = state.dims();
    let mut ledger = EnergyLedger::compute(state, params, ctx)?;
    let mut current = ledger.total();
    let mut report = FlowReport {
        energy_before: current,
        ..FlowReport::default()
    };
    for _ in 0..params.flow_warps {
        let lins = rho_gradients(state, params, ctx.samples)?;
        for (key, lin) in &lins {
            let (i, dir) = *key;
            let edge = &ctx.edges[i];
            let base = FlowStepConfig::for_edge(params, edge);
            let dual_key = (i, dir.step());
            let p0 = duals
                .p
                .get(&dual_key)
                .cloned()
                .unwrap_or_else(|| vec![0.0; 4 * w * h]);
            let previous = state.unit_flow(i, dir).clone();
            let mut kappa = *damping.get(key).unwrap_or(&1.0);
            let mut accepted = false;
            for _ in 0..=MAX_BACKTRACKS {
                let cfg = FlowStepConfig {
                    damping: kappa,
                    ..base
                };
                let (cand, p_new) = update_flow(&previous, lin, edge, &p0, cfg)?;
                let cand = FlowField::from_parts(
                    w,
                    h,
                    median3(&cand.u, w, h),
                    median3(&cand.v, w, h),
                )?;
                *state.unit_flow_mut(i, dir) = cand;
                let mut trial = ledger.clone();
                trial.refresh_flow(state, params, ctx, i, dir)?;
                let e = trial.total();
                if e <= current {
                    ledger = trial;
                    current = e;
                    duals.p.insert(dual_key, p_new);
                    accepted = true;
                    break;
                }
                kappa *= 4.0;
            }
            if accepted {
                report.accepted += 1;
                damping.insert(*key, (kappa / 4.0).max(1.0));
            } else {
                report.rejected += 1;
                *state.unit_flow_mut(i, dir) = previous;
                damping.insert(*key, kappa.min(1e6));
            }
        }
        for (i, dir) in state.free_flows() {
            let Some(cand) = propose_from_neighbours(state, params, ctx, i, dir)? else {
                continue;
            };
            let previous = std::mem::replace(state.unit_flow_mut(i, dir), cand);
            let mut trial = ledger.clone();
            trial.refresh_flow(state, params, ctx, i, dir)?;
            let e = trial.total();
            if e < current {
                ledger = trial;
                current = e;
                report.propagated += 1;
            } else {
                *state.unit_flow_mut(i, dir) = previous;
            }
        }
    }
    report.energy_after = current;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn edge_map_constant_and_bandwidth() {
        let e = compute_edge_map(&Image::filled(5, 5, 1, 0.3), 20.0, 0.1);
        assert!(e.g.iter().all(|&g| g == 20.0));
        // |∇L̄| = σ_I in x at column 0
        let img = Image::from_fn(5, 5, 1, |x, _, _| if x == 0 { 0.0 } else { 0.1 });
        let e = compute_edge_map(&img, 2.0, 0.1);
        assert!((e.g[0] - 2.0 * (-1.0f64).exp()).abs() < 1e-12);
        assert_eq!(e.g[2], 2.0);
    }

    #[test]
    fn edge_map_published_defaults_bounded() {
        let p = SolverParams::default();
        let img = Image::from_fn(12, 12, 3, |x, y, c| ((x * 7 + y * 13 + c * 5) % 11) as f64 / 10.0);
        let e = compute_edge_map(&img, p.nu, p.sigma_i);
        assert!(e.g.iter().all(|&g| g > 0.0 && g <= 20.0));
    }

    #[test]
    fn compose_cases() {
        let a = FlowField::constant(6, 6, 1.0, 0.0);
        let b = FlowField::constant(6, 6, 2.0, 0.0);
        let c = compose_flow(&a, &b).unwrap();
        assert!(c.u.iter().all(|&x| x == 3.0) && c.v.iter().all(|&x| x == 0.0));
        let z = compose_flow(&a, &FlowField::zeros(6, 6)).unwrap();
        assert_eq!(z, a);
        assert!(compose_flow(&a, &FlowField::zeros(5, 6)).is_err());
    }

    #[test]
    fn compose_rotational_by_hand() {
        // u_a: 90° rotation field about (1.5, 1.5), scaled by 0.5
        let ua = FlowField::from_fn(4, 4, |x, y| {
            let (dx, dy) = (x as f64 - 1.5, y as f64 - 1.5);
            (-0.5 * dy, 0.5 * dx)
        });
        let ub = FlowField::constant(4, 4, 0.25, -0.5);
        let c = compose_flow(&ua, &ub).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let (a, b) = ua.get(x, y);
                assert_eq!(c.get(x, y), (a + 0.25, b - 0.5));
            }
        }
    }

    #[test]
    fn update_flow_drifts_against_gradient() {
        let u0 = FlowField::zeros(1, 1);
        let mut lin = RhoLinearization::zeros(1);
        lin.grad_u[0] = -2.0;
        let edge = EdgeMap {
            width: 1,
            height: 1,
            g: vec![5.0],
        };
        let cfg = FlowStepConfig {
            eta: 0.1,
            eps: 0.05,
            iters: 4,
            damping: 1.0,
        };
        let (u, p) = update_flow(&u0, &lin, &edge, &[0.0; 4], cfg).unwrap();
        assert!((u.u[0] - 4.0 * 0.05 * 2.0).abs() < 1e-15);
        assert_eq!(u.v[0], 0.0);
        assert!(p.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn update_flow_minimizes_the_local_model() {
        // one pixel, no TV: the iteration settles on argmin ∇ρᵀδ + δᵀMδ
        let edge = EdgeMap {
            width: 1,
            height: 1,
            g: vec![0.0],
        };
        let cfg = FlowStepConfig {
            eta: 0.5,
            eps: 1.0,
            iters: 80,
            damping: 1.0,
        };
        let mut lin = RhoLinearization::zeros(1);
        lin.grad_u[0] = -2.0;
        lin.m_uu[0] = 1.0;
        lin.m_vv[0] = 1.0;
        let (u, _) = update_flow(&FlowField::zeros(1, 1), &lin, &edge, &[0.0; 4], cfg).unwrap();
        assert!((u.u[0] - 1.0).abs() < 1e-12 && u.v[0].abs() < 1e-12);

        lin.grad_u[0] = -3.0;
        lin.m_uu[0] = 2.0;
        lin.m_vv[0] = 2.0;
        lin.m_uv[0] = 1.0;
        let (u, _) = update_flow(&FlowField::constant(1, 1, 0.5, 0.5), &lin, &edge, &[0.0; 4], cfg).unwrap();
        assert!((u.u[0] - 1.5).abs() < 1e-12 && u.v[0].abs() < 1e-12, "{:?}", u.at(0));
    }

    #[test]
    fn update_flow_stationary_and_projected() {
        let u0 = FlowField::from_fn(6, 6, |x, y| (0.3 * x as f64, (y as f64).sin() * 4.0));
        let lin = RhoLinearization::zeros(36);
        let edge = EdgeMap {
            width: 6,
            height: 6,
            g: vec![3.0; 36],
        };
        let cfg = FlowStepConfig {
            eta: 0.0,
            eps: 0.1,
            iters: 5,
            damping: 1.0,
        };
        let (u, _) = update_flow(&u0, &lin, &edge, &[0.0; 144], cfg).unwrap();
        assert_eq!(u, u0);

        let cfg = FlowStepConfig {
            eta: 2.0,
            eps: 0.1,
            iters: 5,
            damping: 1.0,
        };
        let (_, p) = update_flow(&u0, &lin, &edge, &[0.0; 144], cfg).unwrap();
        assert!(p.iter().all(|v| v.abs() <= 1.0));
        assert!(p.iter().any(|v| v.abs() == 1.0));
    }

    #[test]
    fn rho_gradient_rejects_composed_offsets() {
        let s = SequenceState::from_blurry(vec![Image::filled(4, 4, 1, 0.5); 3], 1.0).unwrap();
        let p = SolverParams::default();
        assert!(matches!(
            rho_gradient(&s, 0, 2, &p, 2),
            Err(Error::NotUnitOffset(2))
        ));
        let g = rho_gradient(&s, 0, 1, &p, 2).unwrap();
        assert!(g.grad_u.iter().chain(&g.grad_v).all(|&x| x == 0.0));
    }
}
