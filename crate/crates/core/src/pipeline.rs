//! Coarse-to-fine orchestration: flow initialization, duty-cycle estimate,
//! pyramid, alternation of the two subproblems, refinement and propagation.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blur::estimate_duty_cycle;
use crate::energy::{energy_terms, EnergyContext, EnergyTerms};
use crate::error::{check_dims, Error, Result};
use crate::flow::estimate_flows;
use crate::image::{FlowField, Image};
use crate::latent::restore_latent;
use crate::params::SolverParams;
use crate::refine::{spatiotemporal_filter, OcclusionMap};
use crate::state::{DualState, SequenceState};

/// Smallest side length of any pyramid level.
pub const MIN_LEVEL_SIZE: usize = 8;

/// Keys cubic convolution weight (`a = −0.5`).
fn cubic(t: f64) -> f64 {
    let t = t.abs();
    if t < 1.0 {
        (1.5 * t - 2.5) * t * t + 1.0
    } else if t < 2.0 {
        ((-0.5 * t + 2.5) * t - 4.0) * t + 2.0
    } else {
        0.0
    }
}

/// Four taps and weights per output coordinate (pixel-centre alignment,
/// clamp at the borders).
fn taps(src_len: usize, dst_len: usize) -> Vec<([usize; 4], [f64; 4])> {
    let ratio = src_len as f64 / dst_len as f64;
    (0..dst_len)
        .map(|d| {
            let s = (d as f64 + 0.5) * ratio - 0.5;
            let base = s.floor();
            let f = s - base;
            let mut idx = [0; 4];
            let mut w = [0.0; 4];
            for k in 0..4 {
                let off = k as isize - 1;
                idx[k] = (base as isize + off).clamp(0, src_len as isize - 1) as usize;
                w[k] = cubic(f - off as f64);
            }
            (idx, w)
        })
        .collect()
}

/// Weighted sum written as offsets from the nearest-left tap, so constant
/// input stays exactly constant (the weights sum to one).
#[inline]
fn blend(vals: [f64; 4], w: [f64; 4]) -> f64 {
    let anchor = vals[1];
    anchor
        + w[0] * (vals[0] - anchor)
        + w[2] * (vals[2] - anchor)
        + w[3] * (vals[3] - anchor)
}

/// Separable bicubic resize of one plane.
pub fn resize_plane(src: &[f64], w: usize, h: usize, nw: usize, nh: usize) -> Vec<f64> {
    if (w, h) == (nw, nh) {
        return src.to_vec();
    }
    let tx = taps(w, nw);
    let ty = taps(h, nh);
    let mut tmp = vec![0.0; nw * h];
    tmp.par_chunks_mut(nw).enumerate().for_each(|(y, row)| {
        let s = &src[y * w..(y + 1) * w];
        for (x, o) in row.iter_mut().enumerate() {
            let (i, wt) = tx[x];
            *o = blend(i.map(|k| s[k]), wt);
        }
    });
    let mut out = vec![0.0; nw * nh];
    out.par_chunks_mut(nw).enumerate().for_each(|(y, row)| {
        let (i, wt) = ty[y];
        for (x, o) in row.iter_mut().enumerate() {
            *o = blend(i.map(|k| tmp[k * nw + x]), wt);
        }
    });
    out
}

/// Bicubic resize of every channel.
pub fn resize_image(img: &Image, nw: usize, nh: usize) -> Image {
    let (w, h) = img.dims();
    let mut data = Vec::with_capacity(nw * nh * img.channels());
    for c in 0..img.channels() {
        data.extend(resize_plane(img.plane(c), w, h, nw, nh));
    }
    Image::from_planar(nw, nh, img.channels(), data).expect("resize keeps values finite")
}

/// Bicubic resize of a flow field; each component is multiplied by its own
/// axis ratio so that displacements stay in pixels of the new grid.
pub fn resize_flow(flow: &FlowField, nw: usize, nh: usize) -> FlowField {
    let (w, h) = flow.dims();
    let su = nw as f64 / w as f64;
    let sv = nh as f64 / h as f64;
    let u = resize_plane(&flow.u, w, h, nw, nh);
    let v = resize_plane(&flow.v, w, h, nw, nh);
    FlowField::from_parts(nw, nh, u, v)
        .expect("resize keeps sizes")
        .scaled(su, sv)
}

/// One resolution of the pyramid.
#[derive(Debug, Clone, PartialEq)]
pub struct PyramidLevel {
    /// Cumulative scale relative to the input.
    pub scale: f64,
    pub state: SequenceState,
}

/// `round(len · scale)`.
pub fn level_len(len: usize, scale: f64) -> usize {
    (len as f64 * scale).round() as usize
}

/// Number of levels whose smaller side stays ≥ [`MIN_LEVEL_SIZE`], capped at
/// `requested` when given.
pub fn level_count(width: usize, height: usize, scale: f64, requested: Option<usize>) -> usize {
    let min = width.min(height);
    let mut count = 1;
    while level_len(min, scale.powi(count as i32)) >= MIN_LEVEL_SIZE {
        count += 1;
        if count > 1000 {
            break;
        }
    }
    match requested {
        Some(r) => r.clamp(1, count),
        None => count,
    }
}

/// Blurry-frame pyramid; index 0 is the coarsest level and the last level is
/// the input itself. Each level is resampled from the next finer one.
pub fn build_pyramid(frames: &[Image], params: &SolverParams) -> Result<Vec<PyramidLevel>> {
    if frames.is_empty() {
        return Err(Error::TooFewFrames { needed: 1, got: 0 });
    }
    let (w, h) = frames[0].dims();
    for f in frames {
        f.same_shape(&frames[0])?;
    }
    let count = level_count(w, h, params.pyr_scale, params.pyr_levels);
    let duty = params.duty.unwrap_or(1.0);
    let mut levels = Vec::with_capacity(count);
    let mut current = frames.to_vec();
    for k in 0..count {
        let scale = params.pyr_scale.powi(k as i32);
        let (nw, nh) = (level_len(w, scale), level_len(h, scale));
        if k > 0 {
            current = current.par_iter().map(|f| resize_image(f, nw, nh)).collect();
        }
        levels.push(PyramidLevel {
            scale,
            state: state_of(current.clone(), duty)?,
        });
    }
    levels.reverse();
    Ok(levels)
}

/// Like [`SequenceState::from_blurry`] but also accepts a single frame.
fn state_of(frames: Vec<Image>, duty: f64) -> Result<SequenceState> {
    let (w, h) = frames[0].dims();
    let t = frames.len();
    Ok(SequenceState {
        latent: frames.clone(),
        blurry: frames,
        fwd: vec![FlowField::zeros(w, h); t],
        bwd: vec![FlowField::zeros(w, h); t],
        duty: vec![duty; t],
    })
}

/// Carry latents and flows to the next finer level of size `to_dims`.
pub fn propagate(
    state: &SequenceState,
    from_scale: f64,
    to_scale: f64,
    to_dims: (usize, usize),
) -> Result<SequenceState> {
    if !(to_scale > from_scale) {
        return Err(Error::WrongPropagationDirection {
            from: from_scale,
            to: to_scale,
        });
    }
    let (nw, nh) = to_dims;
    let up = |v: &[Image]| -> Vec<Image> { v.par_iter().map(|f| resize_image(f, nw, nh)).collect() };
    let upf = |v: &[FlowField]| -> Vec<FlowField> {
        v.par_iter().map(|f| resize_flow(f, nw, nh)).collect()
    };
    Ok(SequenceState {
        blurry: up(&state.blurry),
        latent: up(&state.latent),
        fwd: upf(&state.fwd),
        bwd: upf(&state.bwd),
        duty: state.duty.clone(),
    })
}

/// Energy of the current state, broken down, at one point of the schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyRecord {
    /// Pyramid level, 0 = coarsest.
    pub level: usize,
    /// 0 at level entry, then one record per alternation.
    pub iteration: usize,
    pub stage: Stage,
    pub data: f64,
    pub temporal: f64,
    pub spatial: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Entry,
    Alternation,
    /// After the spatio-temporal filter was applied.
    Filter,
    /// The filter would have raised the energy and
    /// was discarded.
    FilterRejected,
}

impl EnergyRecord {
    fn new(level: usize, iteration: usize, stage: Stage, e: EnergyTerms) -> Self {
        EnergyRecord {
            level,
            iteration,
            stage,
            data: e.data,
            temporal: e.temporal,
            spatial: e.spatial,
            total: e.total(),
        }
    }
}

/// Final state plus the bookkeeping of a [`run`].
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub state: SequenceState,
    pub energy_log: Vec<EnergyRecord>,
    pub duty: f64,
    /// False when the duty cycle came from the parameters.
    pub duty_estimated: bool,
    pub levels: usize,
}

fn check_frames(blurry: &[Image]) -> Result<()> {
    if blurry.len() < 2 {
        return Err(Error::TooFewFrames {
            needed: 2,
            got: blurry.len(),
        });
    }
    for f in blurry {
        f.same_shape(&blurry[0])?;
        if !f.is_finite() {
            return Err(Error::InvalidImage("non-finite pixel".into()));
        }
    }
    Ok(())
}

/// Initial flows from the blurry frames alone: the flow subproblem with the
/// data term switched off (`λ = 0`), latents fixed to the blurry frames, run
/// coarse to fine from zero.
pub fn init_flows(blurry: &[Image], params: &SolverParams) -> Result<(Vec<FlowField>, Vec<FlowField>)> {
    check_frames(blurry)?;
    let mut p = params.clone();
    p.lambda = 0.0;
    // classic pairwise TV-L1; the ablation switch concerns the restoration,
    // not this baseline
    p.temporal_enabled = true;
    p.n_neighbors = 1;
    p.pyr_levels = None;
    p.validate()?;
    let pyramid = build_pyramid(blurry, &p)?;
    let mut flows: Option<(Vec<FlowField>, Vec<FlowField>)> = None;
    for level in pyramid {
        let mut state = level.state;
        let (w, h) = state.dims();
        if let Some((f, b)) = flows.take() {
            state.fwd = f.iter().map(|x| resize_flow(x, w, h)).collect();
            state.bwd = b.iter().map(|x| resize_flow(x, w, h)).collect();
        }
        let ctx = EnergyContext::from_state(&state, &p);
        let mut duals = DualState::zeros(&state, &p.offsets());
        let mut steps = BTreeMap::new();
        for _ in 0..p.outer_iters.max(1) {
            estimate_flows(&mut state, &p, &ctx, &mut duals, &mut steps)?;
        }
        flows = Some((state.fwd, state.bwd));
    }
    Ok(flows.expect("pyramid has at least one level"))
}

/// Full objective of a state, edge maps from its current latents.
pub fn total_energy(state: &SequenceState, params: &SolverParams) -> Result<f64> {
    crate::energy::total_energy(state, params)
}

/// Run the whole coarse-to-fine scheme.
pub fn run(blurry: &[Image], params: &SolverParams) -> Result<RunOutput> {
    run_with_progress(blurry, params, |_| {})
}

/// [`run`] with a hook receiving every energy record as it is produced.
pub fn run_with_progress<F>(blurry: &[Image], params: &SolverParams, mut hook: F) -> Result<RunOutput>
where
    F: FnMut(&EnergyRecord),
{
    check_frames(blurry)?;
    params.validate()?;
    let (w, h) = blurry[0].dims();

    let (init_fwd, init_bwd) = init_flows(blurry, params)?;
    let (duty, duty_estimated) = match params.duty {
        Some(d) => (d, false),
        None => {
            let per_frame = estimate_duty_cycle(blurry, &init_fwd, &init_bwd)?;
            (per_frame[0], true)
        }
    };

    let mut p = params.clone();
    p.duty = Some(duty);
    let pyramid = build_pyramid(blurry, &p)?;
    let levels = pyramid.len();
    let mut log = Vec::new();
    let mut prev: Option<(f64, SequenceState)> = None;

    for (li, level) in pyramid.into_iter().enumerate() {
        let dims = level.state.dims();
        let mut state = match prev.take() {
            None => {
                let mut s = level.state;
                s.fwd = init_fwd.iter().map(|f| resize_flow(f, dims.0, dims.1)).collect();
                s.bwd = init_bwd.iter().map(|f| resize_flow(f, dims.0, dims.1)).collect();
                s
            }
            Some((from, s)) => {
                let mut up = propagate(&s, from, level.scale, dims)?;
                up.blurry = level.state.blurry;
                up
            }
        };
        state.duty = vec![duty; state.len()];
        zero_outward_flows(&mut state);

        let ctx = EnergyContext::from_state(&state, &p);
        let mut duals = DualState::zeros(&state, &p.offsets());
        let mut steps = BTreeMap::new();
        let entry = energy_terms(&state, &p, &ctx)?;
        let rec = EnergyRecord::new(li, 0, Stage::Entry, entry);
        hook(&rec);
        log.push(rec);
        let mut current = entry.total();

        for it in 1..=p.outer_iters {
            restore_latent(&mut state, &mut duals, &p, &ctx)?;
            estimate_flows(&mut state, &p, &ctx, &mut duals, &mut steps)?;
            let rec = EnergyRecord::new(li, it, Stage::Alternation, energy_terms(&state, &p, &ctx)?);
            current = rec.total;
            hook(&rec);
            log.push(rec);
        }

        let finest = li + 1 == levels;
        if p.filter_enabled && (finest || !p.filter_finest_only) {
            let occ = OcclusionMap::from_state(&state, p.n_neighbors, level.scale)?;
            let filtered = spatiotemporal_filter(&state, &occ, p.sigma_w, p.n_neighbors)?;
            let previous = std::mem::replace(&mut state.latent, filtered);
            let e = energy_terms(&state, &p, &ctx)?;
            let stage = if e.total() <= current {
                Stage::Filter
            } else {
                state.latent = previous;
                Stage::FilterRejected
            };
            let rec = EnergyRecord::new(li, p.outer_iters + 1, stage, energy_terms(&state, &p, &ctx)?);
            hook(&rec);
            log.push(rec);
        }
        prev = Some((level.scale, state));
    }
    let (_, state) = prev.expect("at least one level");
    check_dims((w, h), state.dims())?;
    Ok(RunOutput {
        state,
        energy_log: log,
        duty,
        duty_estimated,
        levels,
    })
}

/// Flows pointing outside the sequence stay zero.
fn zero_outward_flows(state: &mut SequenceState) {
    let (w, h) = state.dims();
    let t = state.len();
    state.bwd[0] = FlowField::zeros(w, h);
    state.fwd[t - 1] = FlowField::zeros(w, h);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hd_pyramid_dimensions() {
        let p = SolverParams {
            pyr_levels: Some(17),
            ..SolverParams::default()
        };
        assert_eq!(level_count(1280, 720, 0.9, Some(17)), 17);
        let s = p.pyr_scale.powi(16);
        assert_eq!((level_len(1280, s), level_len(720, s)), (237, 133));
    }

    #[test]
    fn auto_level_count_stops_at_eight() {
        let n = level_count(64, 48, 0.9, None);
        let s = 0.9f64.powi(n as i32 - 1);
        assert!(level_len(48, s) >= 8);
        assert!(level_len(48, s * 0.9) < 8);
        assert_eq!(level_count(64, 48, 0.9, Some(1)), 1);
    }

    #[test]
    fn single_level_is_the_input() {
        let frames = vec![Image::filled(16, 12, 1, 0.2), Image::filled(16, 12, 1, 0.4)];
        let p = SolverParams {
            pyr_levels: Some(1),
            ..SolverParams::default()
        };
        let pyr = build_pyramid(&frames, &p).unwrap();
        assert_eq!(pyr.len(), 1);
        assert_eq!(pyr[0].state.blurry, frames);
    }

    #[test]
    fn constant_stays_constant() {
        let frames = vec![Image::filled(30, 20, 3, 0.7); 2];
        let pyr = build_pyramid(&frames, &SolverParams::default()).unwrap();
        for l in &pyr {
            assert!(l.state.blurry[1].data().iter().all(|&v| v == 0.7));
        }
    }

    #[test]
    fn constant_flow_scales_with_size() {
        let f = FlowField::constant(18, 18, 1.0, 0.0);
        let g = resize_flow(&f, 20, 20);
        assert!(g.u.iter().all(|&u| (u - 20.0 / 18.0).abs() < 1e-12));
        assert!(g.v.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn propagate_rejects_coarsening() {
        let s = SequenceState::from_blurry(vec![Image::new(8, 8, 1); 2], 1.0).unwrap();
        assert!(matches!(
            propagate(&s, 1.0, 0.9, (7, 7)),
            Err(Error::WrongPropagationDirection { .. })
        ));
    }
}
