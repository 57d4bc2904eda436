use serde::{Deserialize, Serialize};

use super::binning::{Axis, QuantileBinning};
use super::keys::{Key, KEY_VOCAB};
use crate::error::DataError;

/// Number of factored action slots: 4 keys, mouse dx/dy bins, 2 buttons.
pub const NUM_SLOTS: usize = 8;
pub const KEY_SLOTS: usize = 4;

/// Which vocabulary a slot draws from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SlotKind {
    Key,
    MouseX,
    MouseY,
    Button,
}

pub const SLOT_KINDS: [SlotKind; NUM_SLOTS] = [
    SlotKind::Key,
    SlotKind::Key,
    SlotKind::Key,
    SlotKind::Key,
    SlotKind::MouseX,
    SlotKind::MouseY,
    SlotKind::Button,
    SlotKind::Button,
];

/// Recorded input for one frame, before discretisation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RawAction {
    pub keys: Vec<Key>,
    pub dx: f64,
    pub dy: f64,
    #[serde(default)]
    pub lb: bool,
    #[serde(default)]
    pub rb: bool,
}

impl RawAction {
    pub fn idle() -> Self {
        Self::default()
    }

    /// Distinct, non-`NONE` keys in ascending code order.
    pub fn key_set(&self) -> Vec<Key> {
        let mut k: Vec<Key> = self.keys.iter().copied().filter(|k| !k.is_none()).collect();
        k.sort();
        k.dedup();
        k
    }

    /// Same pressed keys, buttons and mouse motion.
    pub fn same_input(&self, other: &RawAction) -> bool {
        self.key_set() == other.key_set()
            && self.lb == other.lb
            && self.rb == other.rb
            && self.dx == other.dx
            && self.dy == other.dy
    }
}

/// Discretised 8-slot action.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Action {
    /// Non-`NONE` keys strictly ascending, then `NONE` padding.
    pub keys: [Key; KEY_SLOTS],
    pub dx_bin: u16,
    pub dy_bin: u16,
    pub buttons: [bool; 2],
}

impl Action {
    /// Canonicalises any key multiset into the 4 key slots.
    pub fn canonical_keys(keys: &[Key]) -> Result<[Key; KEY_SLOTS], DataError> {
        let mut k: Vec<Key> = keys.iter().copied().filter(|k| !k.is_none()).collect();
        k.sort();
        k.dedup();
        if k.len() > KEY_SLOTS {
            return Err(DataError::TooManyKeys(k.len()));
        }
        let mut out = [Key::NONE; KEY_SLOTS];
        out[..k.len()].copy_from_slice(&k);
        Ok(out)
    }

    /// Slot class indices in decoding order.
    pub fn slots(&self) -> [usize; NUM_SLOTS] {
        [
            self.keys[0].code(),
            self.keys[1].code(),
            self.keys[2].code(),
            self.keys[3].code(),
            self.dx_bin as usize,
            self.dy_bin as usize,
            self.buttons[0] as usize,
            self.buttons[1] as usize,
        ]
    }

    /// Rebuilds an action from decoded slot indices, re-canonicalising the
    /// key slots (duplicates collapse, order becomes ascending).
    pub fn from_slots(slots: &[usize; NUM_SLOTS]) -> Result<Action, DataError> {
        let keys: Vec<Key> = slots[..KEY_SLOTS].iter().map(|&c| Key::from_code(c)).collect::<Result<_, _>>()?;
        Ok(Action {
            keys: Action::canonical_keys(&keys)?,
            dx_bin: slots[4] as u16,
            dy_bin: slots[5] as u16,
            buttons: [slots[6] != 0, slots[7] != 0],
        })
    }

    pub fn pressed_keys(&self) -> Vec<Key> {
        self.keys.iter().copied().filter(|k| !k.is_none()).collect()
    }
}

/// Class counts per slot for a given binning: used to size model heads.
pub fn slot_vocab(kind: SlotKind, mouse_bins: usize) -> usize {
    match kind {
        SlotKind::Key => KEY_VOCAB,
        SlotKind::MouseX | SlotKind::MouseY => mouse_bins,
        SlotKind::Button => 2,
    }
}

/// Maps a raw action onto the factored action space.
pub fn discretize(raw: &RawAction, binning: &QuantileBinning) -> Result<Action, DataError> {
    Ok(Action {
        keys: Action::canonical_keys(&raw.keys)?,
        dx_bin: binning.axis(Axis::X).bin_of(raw.dx) as u16,
        dy_bin: binning.axis(Axis::Y).bin_of(raw.dy) as u16,
        buttons: [raw.lb, raw.rb],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keys_are_sorted_and_padded() {
        let b = QuantileBinning::fit(&[-10.0, -5.0, -1.0, 1.0, 5.0, 10.0], &[], 1);
        let raw = RawAction { keys: vec![Key::D, Key::W], dx: 0.0, ..Default::default() };
        let a = discretize(&raw, &b).unwrap();
        assert_eq!(a.keys, [Key::D, Key::W, Key::NONE, Key::NONE]);
        assert_eq!(a.dx_bin as usize, b.axis(Axis::X).zero_bin());
    }

    #[test]
    fn more_than_four_keys_is_rejected() {
        let b = QuantileBinning::fit(&[], &[], 4);
        let raw = RawAction { keys: vec![Key::A, Key::D, Key::W, Key::S, Key::SPACE], ..Default::default() };
        assert!(matches!(discretize(&raw, &b), Err(DataError::TooManyKeys(5))));
    }

    #[test]
    fn slots_round_trip() {
        let a = Action { keys: [Key::A, Key::W, Key::NONE, Key::NONE], dx_bin: 3, dy_bin: 1, buttons: [true, false] };
        assert_eq!(Action::from_slots(&a.slots()).unwrap(), a);
    }

    #[test]
    fn decoded_duplicates_collapse() {
        let slots = [Key::W.code(), Key::A.code(), Key::W.code(), 0, 2, 0, 0, 1];
        let a = Action::from_slots(&slots).unwrap();
        assert_eq!(a.keys, [Key::A, Key::W, Key::NONE, Key::NONE]);
    }
}
