//! The joint objective: derivative-domain data term, L1 temporal coherence
//! and the (edge-weighted) anisotropic TV priors on latents and flows.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::blur::{apply_blur, BlurParams};
use crate::error::Result;
use crate::flow::{compute_edge_map, EdgeMap};
use crate::image::{det_sum_by, diff_x, diff_y, FlowField, Footprint, Image};
use crate::params::SolverParams;
use crate::state::{Direction, SequenceState};

/// Energy broken down by term.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyTerms {
    pub data: f64,
    pub temporal: f64,
    /// TV of the latent frames plus edge-weighted TV of the flows.
    pub spatial: f64,
}

impl EnergyTerms {
    pub fn total(&self) -> f64 {
        self.data + self.temporal + self.spatial
    }
}

/// Quantities held fixed while the energy of one pyramid level is minimized:
/// the edge maps (from the latents at level entry) and the blur sample count.
#[derive(Debug, Clone)]
pub struct EnergyContext {
    pub edges: Vec<EdgeMap>,
    pub samples: usize,
}

impl EnergyContext {
    /// Edge maps from the current latents; sample count from the params or,
    /// when automatic, from the largest current kernel flow.
    pub fn from_state(state: &SequenceState, params: &SolverParams) -> Self {
        let edges = state
            .latent
            .iter()
            .map(|l| compute_edge_map(l, params.edge_weight(), params.sigma_i))
            .collect();
        let samples = params.blur_samples.unwrap_or_else(|| auto_samples(state));
        EnergyContext { edges, samples }
    }

    pub fn blur_params(&self, state: &SequenceState, i: usize) -> Result<BlurParams> {
        BlurParams::new(state.duty[i], self.samples)
    }
}

/// Sample count covering the largest displacement of any kernel in `state`.
pub fn auto_samples(state: &SequenceState) -> usize {
    let mut best = 2;
    for i in 0..state.len() {
        let (f, b) = state.kernel_flows(i);
        let m = f.max_magnitude().max(b.max_magnitude());
        best = best.max(crate::blur::default_samples(state.duty[i], m));
    }
    best
}

/// `λ Σ_∂ ‖∂ K_i L_i − ∂ B_i‖²` for one frame.
pub fn data_term(state: &SequenceState, i: usize, lambda: f64, bp: BlurParams) -> Result<f64> {
    if lambda == 0.0 {
        return Ok(0.0);
    }
    let (fwd, bwd) = state.kernel_flows(i);
    let kl = apply_blur(&state.latent[i], &fwd, &bwd, bp)?;
    let b = &state.blurry[i];
    let (w, h) = kl.dims();
    let n = w * h;
    let mut r = vec![0.0; n];
    let mut gx = vec![0.0; n];
    let mut gy = vec![0.0; n];
    let mut acc = 0.0;
    for c in 0..kl.channels() {
        let (p, q) = (kl.plane(c), b.plane(c));
        for k in 0..n {
            r[k] = p[k] - q[k];
        }
        diff_x(&r, w, h, &mut gx);
        diff_y(&r, w, h, &mut gy);
        acc += det_sum_by(n, |k| gx[k] * gx[k] + gy[k] * gy[k]);
    }
    Ok(lambda * acc)
}

/// `μ_n Σ_x |L_i(x) − L_{i+n}(x + u_{i→i+n}(x))|` summed over channels.
pub fn temporal_term(state: &SequenceState, i: usize, n: isize, mu: f64) -> f64 {
    if mu == 0.0 {
        return 0.0;
    }
    let Some(flow) = state.flow_to(i, n) else {
        return 0.0;
    };
    let j = (i as isize + n) as usize;
    mu * temporal_l1(&state.latent[i], &state.latent[j], &flow)
}

pub(crate) fn temporal_l1(li: &Image, lj: &Image, flow: &FlowField) -> f64 {
    let (w, h) = li.dims();
    let mut acc = 0.0;
    for c in 0..li.channels() {
        let (a, b) = (li.plane(c), lj.plane(c));
        acc += det_sum_by(w * h, |k| {
            let fp = Footprint::new(
                w,
                h,
                (k % w) as f64 + flow.u[k],
                (k / w) as f64 + flow.v[k],
            );
            (a[k] - fp.apply(b)).abs()
        });
    }
    acc
}

/// Anisotropic TV `Σ |∂x L| + |∂y L|` over all channels.
pub fn latent_tv(l: &Image) -> f64 {
    let (w, h) = l.dims();
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    let mut acc = 0.0;
    for c in 0..l.channels() {
        diff_x(l.plane(c), w, h, &mut gx);
        diff_y(l.plane(c), w, h, &mut gy);
        acc += det_sum_by(w * h, |k| gx[k].abs() + gy[k].abs());
    }
    acc
}

/// Edge-weighted anisotropic TV of a flow field.
pub fn flow_tv(flow: &FlowField, edge: &EdgeMap) -> f64 {
    let (w, h) = flow.dims();
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    let mut acc = 0.0;
    for comp in [&flow.u, &flow.v] {
        diff_x(comp, w, h, &mut gx);
        diff_y(comp, w, h, &mut gy);
        acc += det_sum_by(w * h, |k| edge.g[k] * (gx[k].abs() + gy[k].abs()));
    }
    acc
}

/// Per-term cache of the objective so that changing one unit flow only
/// re-evaluates the terms it touches.
#[derive(Debug, Clone)]
pub struct EnergyLedger {
    pub data: Vec<f64>,
    pub temporal: BTreeMap<(usize, isize), f64>,
    pub latent_tv: Vec<f64>,
    pub flow_tv: BTreeMap<(usize, Direction), f64>,
}

impl EnergyLedger {
    pub fn compute(
        state: &SequenceState,
        params: &SolverParams,
        ctx: &EnergyContext,
    ) -> Result<Self> {
        let t = state.len();
        let mut data = Vec::with_capacity(t);
        for i in 0..t {
            data.push(data_term(state, i, params.data_weight(), ctx.blur_params(state, i)?)?);
        }
        let mut temporal = BTreeMap::new();
        for i in 0..t {
            for n in params.offsets() {
                if state.has_offset(i, n) {
                    temporal.insert((i, n), temporal_term(state, i, n, params.mu_for(n)));
                }
            }
        }
        let latent_tv = state.latent.iter().map(latent_tv).collect();
        let flow_tv = state
            .free_flows()
            .into_iter()
            .map(|(i, d)| ((i, d), flow_tv(state.unit_flow(i, d), &ctx.edges[i])))
            .collect();
        Ok(EnergyLedger {
            data,
            temporal,
            latent_tv,
            flow_tv,
        })
    }

    pub fn terms(&self) -> EnergyTerms {
        EnergyTerms {
            data: self.data.iter().sum(),
            temporal: self.temporal.values().sum(),
            spatial: self.latent_tv.iter().sum::<f64>() + self.flow_tv.values().sum::<f64>(),
        }
    }

    pub fn total(&self) -> f64 {
        self.terms().total()
    }

    /// Temporal terms whose correspondence chain uses the unit flow `(i, dir)`.
    pub fn temporal_keys_using(
        &self,
        state: &SequenceState,
        i: usize,
        dir: Direction,
    ) -> Vec<(usize, isize)> {
        self.temporal
            .keys()
            .copied()
            .filter(|&(j, n)| state.chain(j, n).contains(&(i, dir)))
            .collect()
    }

    /// Re-evaluate every term that depends on the unit flow `(i, dir)`.
    pub fn refresh_flow(
        &mut self,
        state: &SequenceState,
        params: &SolverParams,
        ctx: &EnergyContext,
        i: usize,
        dir: Direction,
    ) -> Result<()> {
        self.data[i] = data_term(state, i, params.data_weight(), ctx.blur_params(state, i)?)?;
        for key in self.temporal_keys_using(state, i, dir) {
            let v = temporal_term(state, key.0, key.1, params.mu_for(key.1));
            self.temporal.insert(key, v);
        }
        if let Some(v) = self.flow_tv.get_mut(&(i, dir)) {
            *v = flow_tv(state.unit_flow(i, dir), &ctx.edges[i]);
        }
        Ok(())
    }
}

/// Full objective with an explicit level context.
pub fn energy_terms(
    state: &SequenceState,
    params: &SolverParams,
    ctx: &EnergyContext,
) -> Result<EnergyTerms> {
    Ok(EnergyLedger::compute(state, params, ctx)?.terms())
}

/// Full objective; edge maps are taken from the current latents.
pub fn total_energy(state: &SequenceState, params: &SolverParams) -> Result<f64> {
    let ctx = EnergyContext::from_state(state, params);
    Ok(energy_terms(state, params, &ctx)?.total())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn textured(w: usize, h: usize, phase: f64) -> Image {
        Image::from_fn(w, h, 1, |x, y, _| {
            0.5 + 0.3 * ((x as f64 * 0.7 + phase).sin() * (y as f64 * 0.45).cos())
        })
    }

    #[test]
    fn zero_for_consistent_constant_state() {
        let s = SequenceState::from_blurry(vec![Image::filled(8, 8, 1, 0.4); 3], 1.0).unwrap();
        assert_eq!(total_energy(&s, &SolverParams::default()).unwrap(), 0.0);
    }

    #[test]
    fn data_term_is_linear_in_lambda() {
        let mut s = SequenceState::from_blurry(
            vec![textured(10, 9, 0.0), textured(10, 9, 0.4), textured(10, 9, 0.9)],
            0.8,
        )
        .unwrap();
        s.fwd[0] = FlowField::constant(10, 9, 1.5, 0.0);
        s.fwd[1] = FlowField::constant(10, 9, 1.0, 0.5);
        s.bwd[1] = FlowField::constant(10, 9, -1.5, 0.0);
        s.bwd[2] = FlowField::constant(10, 9, -1.0, -0.5);
        let p1 = SolverParams::default();
        let p2 = SolverParams {
            lambda: 2.0 * p1.lambda,
            ..p1.clone()
        };
        let ctx = EnergyContext::from_state(&s, &p1);
        let e1 = energy_terms(&s, &p1, &ctx).unwrap();
        let e2 = energy_terms(&s, &p2, &ctx).unwrap();
        assert!(e1.data > 0.0);
        assert!((e2.data - 2.0 * e1.data).abs() <= 1e-12 * e1.data);
        assert_eq!(e1.temporal, e2.temporal);
        assert_eq!(e1.spatial, e2.spatial);
    }

    #[test]
    fn ledger_refresh_matches_full_recompute() {
        let mut s = SequenceState::from_blurry(
            vec![
                textured(9, 9, 0.0),
                textured(9, 9, 0.5),
                textured(9, 9, 1.0),
                textured(9, 9, 1.5),
            ],
            0.6,
        )
        .unwrap();
        let p = SolverParams::default();
        let ctx = EnergyContext {
            edges: s
                .latent
                .iter()
                .map(|l| compute_edge_map(l, p.edge_weight(), p.sigma_i))
                .collect(),
            samples: 3,
        };
        let mut ledger = EnergyLedger::compute(&s, &p, &ctx).unwrap();
        s.fwd[1] = FlowField::from_fn(9, 9, |x, y| (0.1 * x as f64, -0.05 * y as f64));
        ledger
            .refresh_flow(&s, &p, &ctx, 1, Direction::Forward)
            .unwrap();
        let full = EnergyLedger::compute(&s, &p, &ctx).unwrap();
        assert!((ledger.total() - full.total()).abs() < 1e-9 * full.total());
        assert_eq!(
            ledger.temporal_keys_using(&s, 1, Direction::Forward),
            vec![(0, 2), (1, 1), (1, 2)]
        );
    }
}
