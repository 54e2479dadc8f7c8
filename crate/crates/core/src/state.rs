use std::borrow::Cow;
use std::collections::BTreeMap;

use crate::error::{check_dims, Error, Result};
use crate::flow::compose_flow;
use crate::image::{FlowField, Image};

/// Blurry observations, current latent estimates, bidirectional unit flows
/// and duty cycles for a whole sequence at one resolution.
///
/// `fwd[i]` is `u_{i→i+1}` and `bwd[i]` is `u_{i→i-1}`. The flows that point
/// outside the sequence (`bwd[0]`, `fwd[T-1]`) are kept as zero fields and are
/// never read by the energy terms.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceState {
    pub blurry: Vec<Image>,
    pub latent: Vec<Image>,
    pub fwd: Vec<FlowField>,
    pub bwd: Vec<FlowField>,
    pub duty: Vec<f64>,
}

/// Direction of a unit flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    pub fn step(self) -> isize {
        match self {
            Direction::Forward => 1,
            Direction::Backward => -1,
        }
    }

    pub fn from_offset(n: isize) -> Option<Direction> {
        match n {
            1 => Some(Direction::Forward),
            -1 => Some(Direction::Backward),
            _ => None,
        }
    }
}

impl SequenceState {
    /// Start from `L = B`, zero flows and a common duty cycle.
    pub fn from_blurry(blurry: Vec<Image>, duty: f64) -> Result<Self> {
        if blurry.len() < 2 {
            return Err(Error::TooFewFrames {
                needed: 2,
                got: blurry.len(),
            });
        }
        let (w, h) = blurry[0].dims();
        let c = blurry[0].channels();
        for b in &blurry {
            check_dims((w, h), b.dims())?;
            if b.channels() != c {
                return Err(Error::ChannelMismatch {
                    expected: c,
                    got: b.channels(),
                });
            }
        }
        let t = blurry.len();
        Ok(SequenceState {
            latent: blurry.clone(),
            blurry,
            fwd: vec![FlowField::zeros(w, h); t],
            bwd: vec![FlowField::zeros(w, h); t],
            duty: vec![duty; t],
        })
    }

    pub fn len(&self) -> usize {
        self.blurry.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blurry.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.blurry[0].dims()
    }

    pub fn channels(&self) -> usize {
        self.blurry[0].channels()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.blurry.len();
        if t < 2 {
            return Err(Error::TooFewFrames { needed: 2, got: t });
        }
        for (name, len) in [
            ("latent", self.latent.len()),
            ("fwd", self.fwd.len()),
            ("bwd", self.bwd.len()),
            ("duty", self.duty.len()),
        ] {
            if len != t {
                return Err(Error::InvalidParam {
                    name: "state",
                    reason: format!("{name} has {len} entries, expected {t}"),
                });
            }
        }
        let dims = self.dims();
        for i in 0..t {
            self.blurry[i].same_shape(&self.blurry[0])?;
            self.latent[i].same_shape(&self.blurry[0])?;
            check_dims(dims, self.fwd[i].dims())?;
            check_dims(dims, self.bwd[i].dims())?;
            if !(self.duty[i] > 0.0 && self.duty[i] <= 1.0) {
                return Err(Error::InvalidParam {
                    name: "duty",
                    reason: format!("frame {i} has duty {}", self.duty[i]),
                });
            }
        }
        Ok(())
    }

    pub fn unit_flow(&self, i: usize, dir: Direction) -> &FlowField {
        match dir {
            Direction::Forward => &self.fwd[i],
            Direction::Backward => &self.bwd[i],
        }
    }

    pub fn unit_flow_mut(&mut self, i: usize, dir: Direction) -> &mut FlowField {
        match dir {
            Direction::Forward => &mut self.fwd[i],
            Direction::Backward => &mut self.bwd[i],
        }
    }

    /// Whether the unit flow `(i, dir)` points at an existing frame.
    pub fn has_flow(&self, i: usize, dir: Direction) -> bool {
        match dir {
            Direction::Forward => i + 1 < self.len(),
            Direction::Backward => i >= 1,
        }
    }

    /// Unit flows that are free variables: every `(i, dir)` pointing inside
    /// the sequence, in frame order, forward before backward.
    pub fn free_flows(&self) -> Vec<(usize, Direction)> {
        let mut out = Vec::new();
        for i in 0..self.len() {
            for dir in [Direction::Forward, Direction::Backward] {
                if self.has_flow(i, dir) {
                    out.push((i, dir));
                }
            }
        }
        out
    }

    /// Whether frame `i + n` exists.
    pub fn has_offset(&self, i: usize, n: isize) -> bool {
        let j = i as isize + n;
        j >= 0 && (j as usize) < self.len()
    }

    /// Unit flows making up `u_{i→i+n}`, in chain order.
    pub fn chain(&self, i: usize, n: isize) -> Vec<(usize, Direction)> {
        let dir = if n > 0 {
            Direction::Forward
        } else {
            Direction::Backward
        };
        let s = dir.step();
        (0..n.unsigned_abs())
            .map(|k| ((i as isize + k as isize * s) as usize, dir))
            .collect()
    }

    /// `u_{i→i+n}`, composing unit flows for |n| > 1.
    pub fn flow_to(&self, i: usize, n: isize) -> Option<Cow<'_, FlowField>> {
        if n == 0 || !self.has_offset(i, n) {
            return None;
        }
        let chain = self.chain(i, n);
        let (j0, d0) = chain[0];
        let mut acc = Cow::Borrowed(self.unit_flow(j0, d0));
        for &(j, d) in &chain[1..] {
            acc = Cow::Owned(compose_flow(&acc, self.unit_flow(j, d)).ok()?);
        }
        Some(acc)
    }

    /// Flows that parameterize the blur kernel of frame `i`. A missing
    /// direction at the ends of the sequence is mirrored from the other one
    /// (constant velocity across the frame).
    pub fn kernel_flows(&self, i: usize) -> (Cow<'_, FlowField>, Cow<'_, FlowField>) {
        let t = self.len();
        let fwd = if i + 1 < t {
            Cow::Borrowed(&self.fwd[i])
        } else {
            Cow::Owned(self.bwd[i].negated())
        };
        let bwd = if i >= 1 {
            Cow::Borrowed(&self.bwd[i])
        } else {
            Cow::Owned(self.fwd[i].negated())
        };
        (fwd, bwd)
    }
}

/// Dual variables of both subproblems, persisted across primal-dual
/// iterations within a pyramid level.
///
/// * `s[i]`: latent TV dual, planes `[dx_c0, dy_c0, dx_c1, ...]`.
/// * `q[(i, n)]`: temporal dual, one plane per channel.
/// * `p[(i, n)]`: flow TV dual for `u_{i→i+n}`, planes `[ux, uy, vx, vy]`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DualState {
    pub s: Vec<Vec<f64>>,
    pub q: BTreeMap<(usize, isize), Vec<f64>>,
    pub p: BTreeMap<(usize, isize), Vec<f64>>,
}

impl DualState {
    pub fn zeros(state: &SequenceState, offsets: &[isize]) -> Self {
        let (w, h) = state.dims();
        let n = w * h;
        let c = state.channels();
        let t = state.len();
        let mut q = BTreeMap::new();
        for i in 0..t {
            for &k in offsets {
                if state.has_offset(i, k) {
                    q.insert((i, k), vec![0.0; n * c]);
                }
            }
        }
        let p = state
            .free_flows()
            .into_iter()
            .map(|(i, d)| ((i, d.step()), vec![0.0; 4 * n]))
            .collect();
        DualState {
            s: vec![vec![0.0; 2 * n * c]; t],
            q,
            p,
        }
    }

    /// Largest absolute dual component (≤ 1 after every projected update).
    pub fn max_abs(&self) -> f64 {
        self.s
            .iter()
            .flatten()
            .chain(self.q.values().flatten())
            .chain(self.p.values().flatten())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(t: usize) -> SequenceState {
        SequenceState::from_blurry(vec![Image::filled(6, 5, 1, 0.5); t], 1.0).unwrap()
    }

    #[test]
    fn needs_two_frames() {
        assert!(SequenceState::from_blurry(vec![Image::new(4, 4, 1)], 1.0).is_err());
    }

    #[test]
    fn rejects_mixed_sizes() {
        let r = SequenceState::from_blurry(vec![Image::new(4, 4, 1), Image::new(4, 5, 1)], 1.0);
        assert!(r.is_err());
    }

    #[test]
    fn free_flows_skip_boundaries() {
        let s = state(3);
        assert_eq!(
            s.free_flows(),
            vec![
                (0, Direction::Forward),
                (1, Direction::Forward),
                (1, Direction::Backward),
                (2, Direction::Backward)
            ]
        );
    }

    #[test]
    fn chains_and_composition() {
        let mut s = state(4);
        for i in 0..3 {
            s.fwd[i] = FlowField::constant(6, 5, 1.0, 0.0);
        }
        assert_eq!(
            s.chain(1, -2),
            vec![(1, Direction::Backward), (0, Direction::Backward)]
        );
        assert!(s.flow_to(0, -1).is_none());
        assert!(s.flow_to(2, 2).is_none());
        let f = s.flow_to(0, 2).unwrap();
        assert_eq!(f.get(1, 1), (2.0, 0.0));
    }

    #[test]
    fn kernel_flows_mirror_at_ends() {
        let mut s = state(3);
        s.fwd[0] = FlowField::constant(6, 5, 2.0, -1.0);
        s.bwd[2] = FlowField::constant(6, 5, 0.5, 0.0);
        let (f, b) = s.kernel_flows(0);
        assert_eq!(f.get(0, 0), (2.0, -1.0));
        assert_eq!(b.get(0, 0), (-2.0, 1.0));
        let (f, _) = s.kernel_flows(2);
        assert_eq!(f.get(3, 3), (-0.5, -0.0));
    }

    #[test]
    fn dual_shapes() {
        let s = state(3);
        let d = DualState::zeros(&s, &[-2, -1, 1, 2]);
        assert_eq!(d.s.len(), 3);
        assert_eq!(d.q.len(), 2 + 2 + 2);
        assert_eq!(d.p.len(), 4);
        assert_eq!(d.max_abs(), 0.0);
    }
}
