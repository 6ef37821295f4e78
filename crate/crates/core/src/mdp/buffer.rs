use std::collections::VecDeque;

use rand::Rng;

use super::{Trajectory, Transition};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
struct Epoch<S> {
    index: usize,
    trajectories: Vec<Trajectory<S>>,
    transitions: usize,
}

/// Replay buffer organised by exploration epoch. Prioritized sampling draws
/// from the newest epoch with probability 1/2 and otherwise uniformly over
/// the transitions of all earlier epochs.
#[derive(Debug, Clone)]
pub struct ReplayBuffer<S = usize> {
    epochs: VecDeque<Epoch<S>>,
    capacity: Option<usize>,
    total: usize,
}

impl<S> Default for ReplayBuffer<S> {
    fn default() -> Self {
        Self::new(None)
    }
}

/// Location of one transition inside the buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlotRef {
    pub epoch: usize,
    pub trajectory: usize,
    pub step: usize,
}

impl<S> ReplayBuffer<S> {
    /// `capacity` caps the number of stored transitions; whole epochs are
    /// evicted oldest first, the newest epoch is always kept.
    pub fn new(capacity: Option<usize>) -> Self {
        Self {
            epochs: VecDeque::new(),
            capacity,
            total: 0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn num_transitions(&self) -> usize {
        self.total
    }

    pub fn num_epochs(&self) -> usize {
        self.epochs.len()
    }

    pub fn epoch_indices(&self) -> Vec<usize> {
        self.epochs.iter().map(|e| e.index).collect()
    }

    pub fn push(&mut self, epoch_index: usize, trajectories: Vec<Trajectory<S>>) -> Result<()> {
        let added: usize = trajectories.iter().map(Trajectory::len).sum();
        match self.epochs.back_mut() {
            Some(last) if last.index == epoch_index => {
                last.trajectories.extend(trajectories);
                last.transitions += added;
            }
            Some(last) if last.index > epoch_index => {
                return Err(Error::Config(format!(
                    "epoch index {epoch_index} precedes the newest stored epoch {}",
                    last.index
                )))
            }
            _ => self.epochs.push_back(Epoch {
                index: epoch_index,
                trajectories,
                transitions: added,
            }),
        }
        self.total += added;
        if let Some(cap) = self.capacity {
            while self.total > cap && self.epochs.len() > 1 {
                if let Some(old) = self.epochs.pop_front() {
                    self.total -= old.transitions;
                }
            }
        }
        Ok(())
    }

    pub fn trajectories(&self) -> impl Iterator<Item = &Trajectory<S>> {
        self.epochs.iter().flat_map(|e| e.trajectories.iter())
    }

    pub fn transitions(&self) -> impl Iterator<Item = &Transition<S>> {
        self.trajectories().flat_map(|t| t.steps.iter())
    }

    pub fn get(&self, slot: SlotRef) -> &Transition<S> {
        &self.epochs[slot.epoch].trajectories[slot.trajectory].steps[slot.step]
    }

    pub fn trajectory(&self, slot: SlotRef) -> &Trajectory<S> {
        &self.epochs[slot.epoch].trajectories[slot.trajectory]
    }

    fn locate_in(&self, epochs: std::ops::Range<usize>, mut k: usize) -> SlotRef {
        for e in epochs {
            let epoch = &self.epochs[e];
            if k >= epoch.transitions {
                k -= epoch.transitions;
                continue;
            }
            for (ti, t) in epoch.trajectories.iter().enumerate() {
                if k < t.len() {
                    return SlotRef {
                        epoch: e,
                        trajectory: ti,
                        step: k,
                    };
                }
                k -= t.len();
            }
        }
        unreachable!("transition offset beyond buffer contents")
    }

    /// One slot drawn by the prioritized scheme.
    pub fn sample_slot<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<SlotRef> {
        if self.total == 0 {
            return Err(Error::EmptyBuffer);
        }
        let last = self.epochs.len() - 1;
        let last_n = self.epochs[last].transitions;
        let earlier_n = self.total - last_n;
        let from_last = earlier_n == 0 || (last_n > 0 && rng.gen_bool(0.5));
        Ok(if from_last {
            self.locate_in(last..last + 1, rng.gen_range(0..last_n))
        } else {
            self.locate_in(0..last, rng.gen_range(0..earlier_n))
        })
    }

    pub fn sample_prioritized<R: Rng + ?Sized>(
        &self,
        batch_size: usize,
        rng: &mut R,
    ) -> Result<Vec<&Transition<S>>> {
        (0..batch_size)
            .map(|_| self.sample_slot(rng).map(|s| self.get(s)))
            .collect()
    }

    /// Prioritized draw of trajectory segments with at least `k` transitions
    /// from the start index. Slots too close to the end of their trajectory
    /// are redrawn; fails when no trajectory is long enough.
    pub fn sample_segments<R: Rng + ?Sized>(
        &self,
        batch_size: usize,
        k: usize,
        rng: &mut R,
    ) -> Result<Vec<(&Trajectory<S>, usize)>> {
        if self.total == 0 {
            return Err(Error::EmptyBuffer);
        }
        if !self.trajectories().any(|t| t.len() >= k) {
            let longest = self.trajectories().map(Trajectory::len).max().unwrap_or(0);
            return Err(Error::TrajectoryTooShort {
                needed: k,
                available: longest,
            });
        }
        let mut out = Vec::with_capacity(batch_size);
        while out.len() < batch_size {
            let slot = self.sample_slot(rng)?;
            let traj = self.trajectory(slot);
            if slot.step + k <= traj.len() {
                out.push((traj, slot.step));
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn traj(tag: usize, len: usize) -> Trajectory {
        Trajectory {
            steps: (0..len)
                .map(|i| Transition {
                    h: i + 1,
                    state: tag,
                    action: 0,
                    reward: 0.0,
                    next_state: tag,
                    terminal: i + 1 == len,
                })
                .collect(),
            seed: tag as u64,
        }
    }

    #[test]
    fn empty_buffer_errors() {
        let b: ReplayBuffer = ReplayBuffer::default();
        let mut rng = seeded(0);
        assert!(matches!(
            b.sample_prioritized(1, &mut rng),
            Err(Error::EmptyBuffer)
        ));
    }

    #[test]
    fn single_epoch_samples_only_pushed() {
        let mut b = ReplayBuffer::default();
        b.push(0, vec![traj(7, 3)]).unwrap();
        let mut rng = seeded(1);
        for t in b.sample_prioritized(100, &mut rng).unwrap() {
            assert_eq!(t.state, 7);
        }
    }

    #[test]
    fn two_epochs_both_retrievable_and_half_split() {
        let mut b = ReplayBuffer::default();
        b.push(0, vec![traj(0, 4)]).unwrap();
        b.push(1, vec![traj(1, 4)]).unwrap();
        assert_eq!(b.num_epochs(), 2);
        let mut rng = seeded(2);
        let n = 100_000;
        let last = b
            .sample_prioritized(n, &mut rng)
            .unwrap()
            .iter()
            .filter(|t| t.state == 1)
            .count();
        assert!((last as f64 / n as f64 - 0.5).abs() < 0.01);
    }

    #[test]
    fn three_earlier_epochs_get_a_sixth_each() {
        let mut b = ReplayBuffer::default();
        for e in 0..4 {
            b.push(e, vec![traj(e, 5)]).unwrap();
        }
        let mut rng = seeded(3);
        let n = 120_000;
        let mut counts = [0usize; 4];
        for t in b.sample_prioritized(n, &mut rng).unwrap() {
            counts[t.state] += 1;
        }
        for c in &counts[..3] {
            assert!((*c as f64 / n as f64 - 1.0 / 6.0).abs() < 0.01);
        }
    }

    #[test]
    fn capacity_evicts_oldest_epochs() {
        let mut b = ReplayBuffer::new(Some(10));
        for e in 0..5 {
            b.push(e, vec![traj(e, 4)]).unwrap();
        }
        assert_eq!(b.epoch_indices(), vec![3, 4]);
        assert_eq!(b.num_transitions(), 8);
    }

    #[test]
    fn decreasing_epoch_rejected_and_same_epoch_appends() {
        let mut b = ReplayBuffer::default();
        b.push(2, vec![traj(0, 1)]).unwrap();
        b.push(2, vec![traj(1, 1)]).unwrap();
        assert_eq!(b.num_epochs(), 1);
        assert!(b.push(1, vec![traj(2, 1)]).is_err());
    }

    #[test]
    fn segments_respect_length() {
        let mut b = ReplayBuffer::default();
        b.push(0, vec![traj(0, 2), traj(1, 5)]).unwrap();
        let mut rng = seeded(4);
        for (t, start) in b.sample_segments(200, 3, &mut rng).unwrap() {
            assert!(start + 3 <= t.len());
        }
        assert!(matches!(
            b.sample_segments(1, 6, &mut rng),
            Err(Error::TrajectoryTooShort { .. })
        ));
    }
}
