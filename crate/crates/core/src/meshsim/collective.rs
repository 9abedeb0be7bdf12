//! All-reduce with a fixed reduction order.
//!
//! Contributions are ordered by ascending [`CoreId`] and combined by a
//! level-by-level pairwise tree: `[a0+a1, a2+a3, a4]`, then
//! `[(a0+a1)+(a2+a3), a4]`, and so on, an odd trailing element being carried
//! to the next level unchanged. Repeating a collective therefore produces
//! bitwise-identical results.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};

use super::{CoreId, HostTensor, MeshError, TensorData};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReduceOp {
    Sum,
    Mean,
}

/// Elementwise pairwise-tree sum of equally sized slices, in slice order.
pub fn pairwise_tree_sum(inputs: &[&[f32]]) -> Vec<f32> {
    assert!(!inputs.is_empty(), "tree sum of nothing");
    let mut level: Vec<Vec<f32>> = inputs.iter().map(|s| s.to_vec()).collect();
    while level.len() > 1 {
        let mut next = Vec::with_capacity(level.len().div_ceil(2));
        let mut it = level.into_iter();
        while let Some(mut a) = it.next() {
            if let Some(b) = it.next() {
                for (x, y) in a.iter_mut().zip(&b) {
                    *x += *y;
                }
            }
            next.push(a);
        }
        level = next;
    }
    level.pop().unwrap()
}

fn pairwise_tree_sum_u32(inputs: &[&[u32]]) -> Vec<u32> {
    let mut level: Vec<Vec<u32>> = inputs.iter().map(|s| s.to_vec()).collect();
    while level.len() > 1 {
        let mut next = Vec::with_capacity(level.len().div_ceil(2));
        let mut it = level.into_iter();
        while let Some(mut a) = it.next() {
            if let Some(b) = it.next() {
                for (x, y) in a.iter_mut().zip(&b) {
                    *x = x.wrapping_add(*y);
                }
            }
            next.push(a);
        }
        level = next;
    }
    level.pop().unwrap()
}

/// Reduce tensors that are already sorted by ascending core id.
pub(crate) fn reduce_ordered(
    inputs: &[&HostTensor],
    op: ReduceOp,
) -> Result<HostTensor, MeshError> {
    let first = inputs[0];
    for t in &inputs[1..] {
        if t.shape() != first.shape() {
            return Err(MeshError::ShapeMismatch {
                expected: first.shape().to_vec(),
                found: t.shape().to_vec(),
            });
        }
        if t.dtype() != first.dtype() {
            return Err(MeshError::DTypeMismatch {
                expected: first.dtype(),
                found: t.dtype(),
            });
        }
    }
    let data = match first.data() {
        TensorData::F32(_) => {
            let slices = inputs
                .iter()
                .map(|t| t.as_f32())
                .collect::<Result<Vec<_>, _>>()?;
            let mut sum = pairwise_tree_sum(&slices);
            if op == ReduceOp::Mean {
                let n = inputs.len() as f32;
                sum.iter_mut().for_each(|x| *x /= n);
            }
            TensorData::F32(sum)
        }
        TensorData::U32(_) => {
            if op == ReduceOp::Mean {
                return Err(MeshError::Unsupported("mean over u32 tensors".into()));
            }
            let slices = inputs
                .iter()
                .map(|t| t.as_u32())
                .collect::<Result<Vec<_>, _>>()?;
            TensorData::U32(pairwise_tree_sum_u32(&slices))
        }
    };
    HostTensor::new(first.shape().to_vec(), data)
}

struct Round {
    id: u64,
    op: Option<ReduceOp>,
    slots: BTreeMap<CoreId, Arc<HostTensor>>,
    /// Cores that joined this round, including ones that have since timed
    /// out and withdrawn their slot.
    arrived: BTreeSet<CoreId>,
    callers: usize,
}

#[derive(Default)]
struct GroupState {
    current: Option<Round>,
    next_id: u64,
    // round id -> (result, callers yet to collect it)
    done: HashMap<u64, (Result<Arc<HostTensor>, MeshError>, usize)>,
}

/// Rendezvous point for collectives whose contributions arrive from several
/// threads.
#[derive(Default)]
pub(crate) struct Rendezvous {
    groups: Mutex<HashMap<Vec<CoreId>, GroupState>>,
    cv: Condvar,
}

impl Rendezvous {
    /// Contribute `mine` (already validated to be distinct group members) and
    /// block until every member of `members` has contributed.
    pub(crate) fn contribute(
        &self,
        members: &[CoreId],
        mine: Vec<(CoreId, Arc<HostTensor>)>,
        op: ReduceOp,
        timeout: Duration,
    ) -> Result<Arc<HostTensor>, MeshError> {
        let mut key = members.to_vec();
        key.sort();
        let deadline = Instant::now() + timeout;
        let mut groups = self.groups.lock();
        let my_round = {
            let st = groups.entry(key.clone()).or_default();
            if st.current.is_none() {
                let id = st.next_id;
                st.next_id += 1;
                st.current = Some(Round {
                    id,
                    op: None,
                    slots: BTreeMap::new(),
                    arrived: BTreeSet::new(),
                    callers: 0,
                });
            }
            let round = st.current.as_mut().unwrap();
            if let Some(existing) = round.op {
                if existing != op {
                    return Err(MeshError::GroupMismatch(format!(
                        "collective op {op:?} joined a pending {existing:?} round"
                    )));
                }
            }
            for (core, t) in &mine {
                if round.slots.contains_key(core) {
                    return Err(MeshError::GroupMismatch(format!(
                        "core {core} contributed twice to one collective round"
                    )));
                }
                if let Some(other) = round.slots.values().next() {
                    if other.shape() != t.shape() {
                        return Err(MeshError::ShapeMismatch {
                            expected: other.shape().to_vec(),
                            found: t.shape().to_vec(),
                        });
                    }
                }
            }
            round.op = Some(op);
            round.slots.extend(mine.iter().cloned());
            round.arrived.extend(mine.iter().map(|(c, _)| *c));
            round.callers += 1;
            let id = round.id;
            if round.slots.len() == key.len() {
                let round = st.current.take().unwrap();
                let ordered: Vec<&HostTensor> = round.slots.values().map(|t| t.as_ref()).collect();
                let result = reduce_ordered(&ordered, op).map(Arc::new);
                st.done.insert(id, (result, round.callers));
                self.cv.notify_all();
            }
            id
        };
        loop {
            let st = groups.get_mut(&key).unwrap();
            if let Some((result, remaining)) = st.done.get_mut(&my_round) {
                let out = result.clone();
                *remaining -= 1;
                if *remaining == 0 {
                    st.done.remove(&my_round);
                }
                return out;
            }
            if self.cv.wait_until(&mut groups, deadline).timed_out() {
                let st = groups.get_mut(&key).unwrap();
                if st.done.contains_key(&my_round) {
                    continue;
                }
                let round = st.current.as_mut().unwrap();
                for (core, _) in &mine {
                    round.slots.remove(core);
                }
                round.callers -= 1;
                let missing: Vec<CoreId> = key
                    .iter()
                    .filter(|c| !round.arrived.contains(c))
                    .copied()
                    .collect();
                if round.callers == 0 {
                    st.current = None;
                }
                return Err(MeshError::Deadlock {
                    group: key.clone(),
                    missing,
                    timeout,
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn withdrawn_contributor_is_not_reported_missing() {
        let rv = Rendezvous::default();
        let members = [CoreId(0), CoreId(1), CoreId(2)];
        let t = || Arc::new(HostTensor::vector(vec![1.0]));
        let e = std::thread::scope(|s| {
            let slow = s.spawn(|| rv.contribute(&members, vec![(CoreId(0), t())], ReduceOp::Sum, Duration::from_secs(2)));
            std::thread::sleep(Duration::from_millis(50));
            // Core 1 gives up long before core 0 does.
            let fast = rv.contribute(&members, vec![(CoreId(1), t())], ReduceOp::Sum, Duration::from_millis(100));
            assert!(matches!(fast, Err(MeshError::Deadlock { ref missing, .. }) if missing == &vec![CoreId(2)]));
            slow.join().unwrap().unwrap_err()
        });
        match e {
            MeshError::Deadlock { missing, .. } => assert_eq!(missing, vec![CoreId(2)]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn tree_order_for_five() {
        let v: Vec<Vec<f32>> = (0..5).map(|i| vec![i as f32]).collect();
        let s: Vec<&[f32]> = v.iter().map(|x| x.as_slice()).collect();
        assert_eq!(pairwise_tree_sum(&s), vec![10.0]);
    }

    #[test]
    fn tree_differs_from_left_fold_when_rounding_matters() {
        // ((1e8 + 1) + (-1e8 + 1)) vs (((1e8 + 1) - 1e8) + 1)
        let v = [vec![1e8f32], vec![1.0], vec![-1e8], vec![1.0]];
        let s: Vec<&[f32]> = v.iter().map(|x| x.as_slice()).collect();
        let tree = pairwise_tree_sum(&s)[0];
        let fold = ((1e8f32 + 1.0) + -1e8) + 1.0;
        assert_eq!(tree, (1e8f32 + 1.0) + (-1e8 + 1.0));
        assert_ne!(tree.to_bits(), fold.to_bits());
    }
}
