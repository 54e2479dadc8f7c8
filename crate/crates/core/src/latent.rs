//! Sharp-frame restoration with the flows held fixed.
//!
//! Projected dual ascent on the TV and temporal terms, then a proximal
//! primal step whose quadratic (the derivative-domain data term) is solved
//! by conjugate gradient.

use rayon::prelude::*;

use crate::blur::BlurOperator;
use crate::energy::{EnergyContext, EnergyLedger};
use crate::error::{check_dims, Error, Result};
use crate::image::{
    det_dot, derivative_normal, diff_x, diff_x_adjoint, diff_y, diff_y_adjoint, FlowField,
    Footprint, Image,
};
use crate::params::SolverParams;
use crate::state::{DualState, SequenceState};

/// Bilinear warp `(W L)(x) = L(x + u(x))` as a reusable sparse operator.
#[derive(Debug, Clone)]
pub struct WarpOperator {
    width: usize,
    height: usize,
    taps: Vec<Footprint>,
}

impl WarpOperator {
    pub fn new(flow: &FlowField) -> Self {
        let (w, h) = flow.dims();
        let taps = (0..w * h)
            .into_par_iter()
            .map(|k| {
                Footprint::new(
                    w,
                    h,
                    (k % w) as f64 + flow.u[k],
                    (k / w) as f64 + flow.v[k],
                )
            })
            .collect();
        WarpOperator {
            width: w,
            height: h,
            taps,
        }
    }

    pub fn apply_plane(&self, src: &[f64], dst: &mut [f64]) {
        dst.par_iter_mut()
            .zip(&self.taps)
            .for_each(|(d, fp)| *d = fp.apply(src));
    }

    /// Scatter (transpose); sequential so the sum order is fixed.
    pub fn transpose_plane_add(&self, src: &[f64], dst: &mut [f64], scale: f64) {
        for (fp, &v) in self.taps.iter().zip(src) {
            if v != 0.0 {
                fp.scatter(dst, scale * v);
            }
        }
    }

    /// Column sums of the interpolation weights (row sums are all 1).
    pub fn column_sums(&self) -> Vec<f64> {
        let mut col = vec![0.0; self.width * self.height];
        for fp in &self.taps {
            fp.scatter(&mut col, 1.0);
        }
        col
    }

    /// Largest column sum; `‖W‖² ≤` this.
    pub fn max_column_sum(&self) -> f64 {
        self.column_sums().into_iter().fold(0.0, f64::max)
    }
}

/// `out(x) = L_i(x) − L_j(x + u(x))`.
pub fn temporal_difference(li: &Image, lj: &Image, flow: &FlowField) -> Result<Image> {
    li.same_shape(lj)?;
    check_dims(li.dims(), flow.dims())?;
    let warp = WarpOperator::new(flow);
    let n = li.pixels();
    let mut out = li.clone();
    let mut tmp = vec![0.0; n];
    for c in 0..li.channels() {
        warp.apply_plane(lj.plane(c), &mut tmp);
        out.plane_mut(c).iter_mut().zip(&tmp).for_each(|(o, t)| *o -= t);
    }
    Ok(out)
}

/// Adjoint of the stacked operator `[L_i; L_j] ↦ L_i − W L_j`: returns the
/// contributions `(r, −Wᵀ r)` to the two slots.
pub fn temporal_difference_adjoint(r: &Image, flow: &FlowField) -> Result<(Image, Image)> {
    check_dims(r.dims(), flow.dims())?;
    let warp = WarpOperator::new(flow);
    let mut second = Image::new(r.width(), r.height(), r.channels());
    for c in 0..r.channels() {
        warp.transpose_plane_add(r.plane(c), second.plane_mut(c), -1.0);
    }
    Ok((r.clone(), second))
}

#[inline]
fn project(z: f64) -> f64 {
    z / z.abs().max(1.0)
}

/// `s ← proj(s + η A L)`; `s` holds planes `[dx_c0, dy_c0, dx_c1, ...]`.
pub fn dual_update_spatial(s: &[f64], l: &Image, eta: f64) -> Result<Vec<f64>> {
    let (w, h) = l.dims();
    let n = w * h;
    if s.len() != 2 * n * l.channels() {
        return Err(Error::InvalidParam {
            name: "s",
            reason: format!("expected {} entries, got {}", 2 * n * l.channels(), s.len()),
        });
    }
    let mut out = s.to_vec();
    let mut d = vec![0.0; n];
    for c in 0..l.channels() {
        diff_x(l.plane(c), w, h, &mut d);
        out[2 * c * n..(2 * c + 1) * n]
            .par_iter_mut()
            .zip(&d)
            .for_each(|(o, g)| *o = project(*o + eta * g));
        diff_y(l.plane(c), w, h, &mut d);
        out[(2 * c + 1) * n..(2 * c + 2) * n]
            .par_iter_mut()
            .zip(&d)
            .for_each(|(o, g)| *o = project(*o + eta * g));
    }
    Ok(out)
}

/// `q ← proj(q + η μ (L_i − W L_j))`.
pub fn dual_update_temporal(
    q: &[f64],
    li: &Image,
    lj: &Image,
    flow: &FlowField,
    mu: f64,
    eta: f64,
) -> Result<Vec<f64>> {
    li.same_shape(lj)?;
    check_dims(li.dims(), flow.dims())?;
    dual_update_temporal_with(q, li, lj, &WarpOperator::new(flow), mu, eta)
}

fn dual_update_temporal_with(
    q: &[f64],
    li: &Image,
    lj: &Image,
    warp: &WarpOperator,
    mu: f64,
    eta: f64,
) -> Result<Vec<f64>> {
    let n = li.pixels();
    if q.len() != n * li.channels() {
        return Err(Error::InvalidParam {
            name: "q",
            reason: format!("expected {} entries, got {}", n * li.channels(), q.len()),
        });
    }
    let mut out = q.to_vec();
    let mut wl = vec![0.0; n];
    for c in 0..li.channels() {
        warp.apply_plane(lj.plane(c), &mut wl);
        let a = li.plane(c);
        out[c * n..(c + 1) * n]
            .par_iter_mut()
            .enumerate()
            .for_each(|(k, o)| *o = project(*o + eta * mu * (a[k] - wl[k])));
    }
    Ok(out)
}

/// `Aᵀ s` for one frame.
pub fn spatial_adjoint(s: &[f64], w: usize, h: usize, channels: usize) -> Image {
    let n = w * h;
    let mut out = Image::new(w, h, channels);
    let mut t = vec![0.0; n];
    for c in 0..channels {
        let dst = out.plane_mut(c);
        diff_x_adjoint(&s[2 * c * n..(2 * c + 1) * n], w, h, dst);
        diff_y_adjoint(&s[(2 * c + 1) * n..(2 * c + 2) * n], w, h, &mut t);
        dst.iter_mut().zip(&t).for_each(|(d, a)| *d += a);
    }
    out
}

/// Step sizes and inner-solver budget of the latent subproblem.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatentSolveConfig {
    pub eta: f64,
    pub eps: f64,
    /// Per-row dual and per-pixel primal steps instead of `eta`/`eps`.
    pub preconditioned: bool,
    pub pd_iters: usize,
    pub cg_iters: usize,
    pub cg_tol: f64,
    pub temporal_enabled: bool,
}

impl LatentSolveConfig {
    /// Upper bound on `‖[A; μ_n D_{i,n}]‖²` given the largest warp column sum.
    pub fn operator_norm_bound(params: &SolverParams, max_column_sum: f64) -> f64 {
        let temporal: f64 = params.offsets().iter().map(|&n| params.mu_for(n).powi(2)).sum();
        8.0 + 2.0 * (1.0 + max_column_sum) * temporal
    }

    /// Explicit steps from `params`, or diagonal preconditioning when
    /// neither step is given. `eta`/`eps` then hold `1/√bound` for reference.
    pub fn from_params(params: &SolverParams, max_column_sum: f64) -> Result<Self> {
        let bound = Self::operator_norm_bound(params, max_column_sum);
        let auto = 1.0 / bound.sqrt();
        let eta = params.eta_l.unwrap_or(auto);
        let eps = params.eps_l.unwrap_or(auto);
        if eta * eps * bound > 1.0 + 1e-12 {
            return Err(Error::InvalidParam {
                name: "eta_l/eps_l",
                reason: format!(
                    "η·ε·‖K‖² = {:.3} exceeds 1 (bound ‖K‖² ≤ {bound:.3})",
                    eta * eps * bound
                ),
            });
        }
        Ok(LatentSolveConfig {
            eta,
            eps,
            preconditioned: params.eta_l.is_none() && params.eps_l.is_none(),
            pd_iters: params.pd_iters,
            cg_iters: params.cg_iters,
            cg_tol: params.cg_tol,
            temporal_enabled: params.temporal_enabled,
        })
    }
}

/// Conjugate gradient on an SPD operator, warm-started at `x`.
///
/// Stops at relative residual `tol` or after `max_iters`. Five consecutive
/// residual increases beyond 100× the starting residual are reported as
/// divergence.
pub fn conjugate_gradient<F>(
    apply: F,
    b: &[f64],
    x: &mut [f64],
    max_iters: usize,
    tol: f64,
) -> Result<usize>
where
    F: Fn(&[f64], &mut [f64]),
{
    let n = b.len();
    let mut ax = vec![0.0; n];
    apply(x, &mut ax);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
    let bnorm = det_dot(b, b).sqrt().max(1e-300);
    let mut rr = det_dot(&r, &r);
    if rr.sqrt() <= tol * bnorm {
        return Ok(0);
    }
    let mut p = r.clone();
    let mut ap = vec![0.0; n];
    let mut growth = 0;
    let r0 = rr.sqrt();
    let mut prev = r0;
    for it in 1..=max_iters {
        apply(&p, &mut ap);
        let pap = det_dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(Error::CgDiverged {
                iters: it,
                residual: rr.sqrt(),
            });
        }
        let alpha = rr / pap;
        x.par_iter_mut().zip(&p).for_each(|(xi, pi)| *xi += alpha * pi);
        r.par_iter_mut().zip(&ap).for_each(|(ri, ai)| *ri -= alpha * ai);
        let rr_new = det_dot(&r, &r);
        let res = rr_new.sqrt();
        if !res.is_finite() {
            return Err(Error::CgDiverged {
                iters: it,
                residual: res,
            });
        }
        if res <= tol * bnorm {
            return Ok(it);
        }
        // the residual norm of CG is not monotone (a warm start can sit far
        // below the transient); only growth well past the starting residual
        // counts towards divergence
        if res > prev && res > 100.0 * r0 {
            growth += 1;
            if growth >= 5 {
                return Err(Error::CgDiverged {
                    iters: it,
                    residual: res,
                });
            }
        } else {
            growth = 0;
        }
        prev = res;
        let beta = rr_new / rr;
        rr = rr_new;
        p.par_iter_mut().zip(&r).for_each(|(pi, ri)| *pi = ri + beta * *pi);
    }
    Ok(max_iters)
}

/// Proximal primal step for one frame:
///
/// `argmin_L λ Σ_∂ ‖∂KL − ∂B‖² + ‖L − (L^m − ε·push)‖² / (2ε)`,
///
/// where `push = Aᵀs + Σ μ Dᵀq` restricted to this frame. Solved through the
/// normal equations `(2λ KᵀΔK + I/ε) L = 2λ KᵀΔB + (L^m − ε·push)/ε`.
pub fn primal_update_latent(
    l_m: &Image,
    blurry: &Image,
    blur: &BlurOperator,
    push: &Image,
    lambda: f64,
    cfg: &LatentSolveConfig,
) -> Result<Image> {
    let eps = vec![cfg.eps; l_m.pixels()];
    primal_update_latent_weighted(l_m, blurry, blur, push, lambda, &eps, cfg)
}

/// [`primal_update_latent`] with a per-pixel primal step `eps[k]` (shared by
/// all channels); `cfg.eps` is ignored.
pub fn primal_update_latent_weighted(
    l_m: &Image,
    blurry: &Image,
    blur: &BlurOperator,
    push: &Image,
    lambda: f64,
    eps: &[f64],
    cfg: &LatentSolveConfig,
) -> Result<Image> {
    l_m.same_shape(blurry)?;
    l_m.same_shape(push)?;
    check_dims(l_m.dims(), blur.dims())?;
    let (w, h) = l_m.dims();
    let n = w * h;
    if eps.len() != n || eps.iter().any(|e| !(*e > 0.0)) {
        return Err(Error::InvalidParam {
            name: "eps",
            reason: format!("expected {n} positive steps"),
        });
    }
    let mut out = l_m.clone();
    let mut t1 = vec![0.0; n];
    let mut t2 = vec![0.0; n];
    for c in 0..l_m.channels() {
        let lm = l_m.plane(c);
        let pu = push.plane(c);
        derivative_normal(blurry.plane(c), w, h, &mut t1);
        blur.apply_transpose_plane(&t1, &mut t2);
        let rhs: Vec<f64> = (0..n)
            .map(|k| 2.0 * lambda * t2[k] + (lm[k] - eps[k] * pu[k]) / eps[k])
            .collect();
        let apply = |x: &[f64], y: &mut [f64]| {
            let mut a = vec![0.0; n];
            let mut b = vec![0.0; n];
            blur.apply_plane(x, &mut a);
            derivative_normal(&a, w, h, &mut b);
            blur.apply_transpose_plane(&b, y);
            y.par_iter_mut()
                .zip(x)
                .zip(eps)
                .for_each(|((yi, xi), e)| *yi = 2.0 * lambda * *yi + xi / e);
        };
        conjugate_gradient(apply, &rhs, out.plane_mut(c), cfg.cg_iters, cfg.cg_tol)?;
    }
    Ok(out)
}

/// Outcome of one [`restore_latent`] call.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LatentReport {
    pub energy_before: f64,
    pub energy_after: f64,
    /// Sweep whose iterate was kept (0 = the entry point).
    pub best_sweep: usize,
}

struct TemporalLink {
    i: usize,
    j: usize,
    n: isize,
    mu: f64,
    warp: WarpOperator,
}

/// Run `pd_iters` Gauss–Seidel sweeps of the dual and primal updates over
/// all frames, keeping the iterate with the lowest objective (never worse
/// than the entry point).
pub fn restore_latent(
    state: &mut SequenceState,
    duals: &mut DualState,
    params: &SolverParams,
    ctx: &EnergyContext,
) -> Result<LatentReport> {
    state.validate()?;
    let t = state.len();
    let (w, h) = state.dims();
    let channels = state.channels();

    let blurs = (0..t)
        .map(|i| {
            let (f, b) = state.kernel_flows(i);
            BlurOperator::new(&f, &b, ctx.blur_params(state, i)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut links = Vec::new();
    for i in 0..t {
        for n in params.offsets() {
            if let Some(flow) = state.flow_to(i, n) {
                links.push(TemporalLink {
                    i,
                    j: (i as isize + n) as usize,
                    n,
                    mu: params.mu_for(n),
                    warp: WarpOperator::new(&flow),
                });
            }
        }
    }
    let max_col = links
        .iter()
        .map(|l| l.warp.max_column_sum())
        .fold(0.0, f64::max);
    let cfg = LatentSolveConfig::from_params(params, max_col)?;
    // Diagonal preconditioning: dual steps are inverse row sums of |K|, the
    // primal step of a pixel is the inverse column sum over every row that
    // touches it.
    let eta_s = if cfg.preconditioned { 0.5 } else { cfg.eta };
    let eta_q = |mu: f64| if cfg.preconditioned { 0.5 / mu } else { cfg.eta };
    let eps: Vec<Vec<f64>> = (0..t)
        .map(|i| {
            if !cfg.preconditioned {
                return vec![cfg.eps; w * h];
            }
            let mut col = vec![4.0; w * h];
            for link in &links {
                if link.i == i {
                    col.iter_mut().for_each(|c| *c += link.mu);
                }
                if link.j == i {
                    link.warp
                        .column_sums()
                        .iter()
                        .zip(col.iter_mut())
                        .for_each(|(s, c)| *c += link.mu * s);
                }
            }
            col.into_iter().map(|c| 1.0 / c).collect()
        })
        .collect();

    if duals.s.len() != t {
        *duals = DualState::zeros(state, &params.offsets());
    }
    for link in &links {
        duals
            .q
            .entry((link.i, link.n))
            .or_insert_with(|| vec![0.0; w * h * channels]);
    }

    let entry = EnergyLedger::compute(state, params, ctx)?.total();
    let entry_latent = state.latent.clone();
    let mut best_e = entry;
    let mut best: Option<Vec<Image>> = None;
    let mut best_sweep = 0;

    for sweep in 1..=cfg.pd_iters {
        for i in 0..t {
            duals.s[i] = dual_update_spatial(&duals.s[i], &state.latent[i], eta_s)?;
            for link in links.iter().filter(|l| l.i == i) {
                let q = &duals.q[&(link.i, link.n)];
                let q_new = dual_update_temporal_with(
                    q,
                    &state.latent[link.i],
                    &state.latent[link.j],
                    &link.warp,
                    link.mu,
                    eta_q(link.mu),
                )?;
                duals.q.insert((link.i, link.n), q_new);
            }
            let mut push = spatial_adjoint(&duals.s[i], w, h, channels);
            for link in &links {
                let q = &duals.q[&(link.i, link.n)];
                if link.i == i {
                    push.data_mut()
                        .iter_mut()
                        .zip(q)
                        .for_each(|(p, qv)| *p += link.mu * qv);
                }
                if link.j == i {
                    for c in 0..channels {
                        let n = w * h;
                        link.warp.transpose_plane_add(
                            &q[c * n..(c + 1) * n],
                            push.plane_mut(c),
                            -link.mu,
                        );
                    }
                }
            }
            state.latent[i] = primal_update_latent_weighted(
                &state.latent[i],
                &state.blurry[i],
                &blurs[i],
                &push,
                params.data_weight(),
                &eps[i],
                &cfg,
            )?;
        }
        let e = EnergyLedger::compute(state, params, ctx)?.total();
        if e < best_e {
            best_e = e;
            best = Some(state.latent.clone());
            best_sweep = sweep;
        }
    }
    match best {
        Some(frames) => state.latent = frames,
        None => state.latent = entry_latent,
    }
    Ok(LatentReport {
        energy_before: entry,
        energy_after: best_e,
        best_sweep,
    })
}
