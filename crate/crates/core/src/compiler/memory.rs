//! Buffer lifetime analysis and slot assignment.
//!
//! Lifetimes are measured in stages. A value is born in the stage of its
//! producer and dies in the last stage that reads it; graph outputs live
//! forever. Two values may share a slot only when one dies strictly before
//! the other is born, so instructions of the same stage never race on a slot.

use alloc::vec::Vec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Lifetime {
    pub birth: usize,
    /// Inclusive; `usize::MAX` for values that must survive the plan.
    pub death: usize,
    pub bytes: usize,
}

impl Lifetime {
    pub fn live_at(&self, stage: usize) -> bool {
        self.birth <= stage && stage <= self.death
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    /// Slot of each value, parallel to the input lifetimes.
    pub slot_of: Vec<usize>,
    /// Byte size of each slot.
    pub slot_bytes: Vec<usize>,
}

/// Greedy first-fit over values sorted by (birth, index): each value takes
/// the lowest-numbered slot whose last occupant died before it is born.
pub fn assign_slots(lifetimes: &[Lifetime]) -> Assignment {
    let mut order: Vec<usize> = (0..lifetimes.len()).collect();
    order.sort_by_key(|&i| (lifetimes[i].birth, i));

    let mut slot_of = alloc::vec![usize::MAX; lifetimes.len()];
    let mut slot_bytes: Vec<usize> = Vec::new();
    let mut slot_free_after: Vec<usize> = Vec::new();
    for i in order {
        let lt = lifetimes[i];
        let slot = match slot_free_after.iter().position(|&d| d < lt.birth) {
            Some(s) => s,
            None => {
                slot_bytes.push(0);
                slot_free_after.push(0);
                slot_bytes.len() - 1
            }
        };
        slot_of[i] = slot;
        slot_bytes[slot] = slot_bytes[slot].max(lt.bytes);
        slot_free_after[slot] = lt.death;
    }
    Assignment {
        slot_of,
        slot_bytes,
    }
}

/// Largest total size of simultaneously live values over all stages.
pub fn peak_live_bytes(lifetimes: &[Lifetime], stages: usize) -> usize {
    (0..=stages)
        .map(|t| {
            lifetimes
                .iter()
                .filter(|l| l.live_at(t))
                .map(|l| l.bytes)
                .sum()
        })
        .max()
        .unwrap_or(0)
}
