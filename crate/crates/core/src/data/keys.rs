//! Fixed keyboard vocabulary. Index 0 is the padding value `NONE`; the 64
//! key codes occupy 1..=64.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::DataError;

pub const KEY_NAMES: [&str; 64] = [
    "A", "B", "C", "D", "E", "F", "G", "H", "I", "J", "K", "L", "M", "N", "O", "P", "Q", "R", "S", "T", "U", "V", "W",
    "X", "Y", "Z", "0", "1", "2", "3", "4", "5", "6", "7", "8", "9", "Up", "Down", "Left", "Right", "Space", "Shift",
    "Ctrl", "Alt", "Tab", "Esc", "Enter", "Backspace", "F1", "F2", "F3", "F4", "F5", "F6", "F7", "F8", "F9", "F10",
    "F11", "F12", "CapsLock", "Backquote", "Minus", "Equals",
];

/// Number of key-slot classes including `NONE`.
pub const KEY_VOCAB: usize = KEY_NAMES.len() + 1;

/// A key code drawn from [`KEY_NAMES`], or `NONE` (code 0).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Key(u8);

impl Key {
    pub const NONE: Key = Key(0);
    pub const W: Key = Key(23);
    pub const A: Key = Key(1);
    pub const S: Key = Key(19);
    pub const D: Key = Key(4);
    pub const SPACE: Key = Key(41);
    pub const SHIFT: Key = Key(42);

    pub fn from_code(code: usize) -> Result<Key, DataError> {
        if code < KEY_VOCAB {
            Ok(Key(code as u8))
        } else {
            Err(DataError::UnknownKey(code.to_string()))
        }
    }

    pub fn code(self) -> usize {
        self.0 as usize
    }

    pub fn is_none(self) -> bool {
        self.0 == 0
    }

    pub fn name(self) -> &'static str {
        if self.0 == 0 {
            "NONE"
        } else {
            KEY_NAMES[self.0 as usize - 1]
        }
    }

    pub fn from_name(name: &str) -> Result<Key, DataError> {
        if name == "NONE" {
            return Ok(Key::NONE);
        }
        KEY_NAMES
            .iter()
            .position(|n| n.eq_ignore_ascii_case(name))
            .map(|i| Key(i as u8 + 1))
            .ok_or_else(|| DataError::UnknownKey(name.to_string()))
    }
}

impl fmt::Display for Key {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl Serialize for Key {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Key {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Key::from_name(&s).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip_and_constants_agree() {
        for code in 0..KEY_VOCAB {
            let k = Key::from_code(code).unwrap();
            assert_eq!(Key::from_name(k.name()).unwrap(), k);
        }
        assert_eq!(Key::W.name(), "W");
        assert_eq!(Key::A.name(), "A");
        assert_eq!(Key::S.name(), "S");
        assert_eq!(Key::D.name(), "D");
        assert_eq!(Key::SPACE.name(), "Space");
        assert_eq!(Key::SHIFT.name(), "Shift");
        assert_eq!(KEY_VOCAB, 65);
    }

    #[test]
    fn unknown_codes_are_rejected() {
        assert!(Key::from_code(65).is_err());
        assert!(Key::from_name("Hyper").is_err());
    }
}
