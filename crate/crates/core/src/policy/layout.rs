//! Per-timestep token roles and the attendability rule shared by the batch
//! mask and the incremental cache.

use serde::{Deserialize, Serialize};

use crate::data::NUM_SLOTS;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    Text,
    Image(usize),
    Reasoning,
    /// The `a_in` readout the action decoder expands.
    Prediction,
    /// Ground-truth action slot.
    Action(usize),
}

impl Role {
    /// Index into the learned type-embedding table.
    pub fn type_id(self) -> usize {
        match self {
            Role::Text => 0,
            Role::Image(_) => 1,
            Role::Reasoning => 2,
            Role::Prediction => 3,
            Role::Action(_) => 4,
        }
    }
}

pub const NUM_ROLE_TYPES: usize = 5;

/// `[t, o x N_i, k, a_in, a x 8]` per timestep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLayout {
    pub image_tokens: usize,
}

impl TokenLayout {
    pub fn new(image_tokens: usize) -> Self {
        assert!(image_tokens >= 1, "need at least one image token");
        TokenLayout { image_tokens }
    }

    pub fn tokens_per_step(&self) -> usize {
        self.image_tokens + NUM_SLOTS + 3
    }

    pub fn reasoning_index(&self) -> usize {
        1 + self.image_tokens
    }

    pub fn prediction_index(&self) -> usize {
        2 + self.image_tokens
    }

    pub fn action_index(&self, slot: usize) -> usize {
        3 + self.image_tokens + slot
    }

    pub fn role(&self, idx: usize) -> Role {
        let n = self.image_tokens;
        match idx {
            0 => Role::Text,
            i if i <= n => Role::Image(i - 1),
            i if i == n + 1 => Role::Reasoning,
            i if i == n + 2 => Role::Prediction,
            i if i < self.tokens_per_step() => Role::Action(i - n - 3),
            _ => panic!("token index {idx} outside a {}-token timestep", self.tokens_per_step()),
        }
    }

    pub fn index_of(&self, role: Role) -> usize {
        match role {
            Role::Text => 0,
            Role::Image(j) => 1 + j,
            Role::Reasoning => self.reasoning_index(),
            Role::Prediction => self.prediction_index(),
            Role::Action(s) => self.action_index(s),
        }
    }

    /// Flattened sequence position of a token.
    pub fn flat(&self, p: Pos) -> usize {
        p.timestep * self.tokens_per_step() + p.idx
    }

    pub fn pos(&self, flat: usize) -> Pos {
        Pos { timestep: flat / self.tokens_per_step(), idx: flat % self.tokens_per_step() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Pos {
    pub timestep: usize,
    pub idx: usize,
}

/// Whether query `q` may attend key `k`.
///
/// * nothing attends a later timestep, and with a window of `w` timesteps
///   nothing attends a timestep `w` or more steps back;
/// * `a_in` is attended only by itself;
/// * earlier timesteps are otherwise fully visible;
/// * within a timestep, text/image/reasoning tokens attend each other,
///   `a_in` attends those and itself, and the ground-truth action tokens
///   attend everything except `a_in`. Text/image/reasoning tokens do not
///   attend the same timestep's action tokens, which keeps the action out
///   of `a_in`'s receptive field at every depth.
pub fn attends(layout: &TokenLayout, q: Pos, k: Pos, window: Option<usize>) -> bool {
    if k.timestep > q.timestep {
        return false;
    }
    if let Some(w) = window {
        if q.timestep - k.timestep >= w {
            return false;
        }
    }
    let kr = layout.role(k.idx);
    if kr == Role::Prediction {
        return q == k;
    }
    if k.timestep < q.timestep {
        return true;
    }
    match layout.role(q.idx) {
        Role::Action(_) => true,
        _ => !matches!(kr, Role::Action(_)),
    }
}

/// Row-major boolean matrix; `get(q, k)` is true when `q` may attend `k`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    pub size: usize,
    pub data: Vec<bool>,
}

impl AttentionMask {
    pub fn get(&self, q: usize, k: usize) -> bool {
        self.data[q * self.size + k]
    }
}

pub fn build_mask(timesteps: usize, layout: &TokenLayout) -> AttentionMask {
    build_mask_windowed(timesteps, layout, None)
}

pub fn build_mask_windowed(timesteps: usize, layout: &TokenLayout, window: Option<usize>) -> AttentionMask {
    assert!(timesteps >= 1, "mask needs at least one timestep");
    let size = timesteps * layout.tokens_per_step();
    let mut data = Vec::with_capacity(size * size);
    for q in 0..size {
        for k in 0..size {
            data.push(attends(layout, layout.pos(q), layout.pos(k), window));
        }
    }
    AttentionMask { size, data }
}

/// Inverse-dynamics tokens: `[o x N_i, readout]` per timestep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdmLayout {
    pub image_tokens: usize,
}

impl IdmLayout {
    pub fn tokens_per_step(&self) -> usize {
        self.image_tokens + 1
    }

    pub fn readout_index(&self) -> usize {
        self.image_tokens
    }
}

/// The inverse-dynamics model sees the whole window in both directions.
pub fn build_idm_mask(timesteps: usize, layout: &IdmLayout) -> AttentionMask {
    let size = timesteps * layout.tokens_per_step();
    AttentionMask { size, data: vec![true; size * size] }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_positions_for_one_image_token() {
        let l = TokenLayout::new(1);
        assert_eq!(l.tokens_per_step(), 12);
        assert_eq!(l.role(0), Role::Text);
        assert_eq!(l.role(1), Role::Image(0));
        assert_eq!(l.role(2), Role::Reasoning);
        assert_eq!(l.role(3), Role::Prediction);
        assert_eq!(l.role(4), Role::Action(0));
        assert_eq!(l.role(11), Role::Action(7));
        for i in 0..12 {
            assert_eq!(l.index_of(l.role(i)), i);
        }
    }

    #[test]
    fn prediction_token_cannot_see_its_own_action() {
        let l = TokenLayout::new(1);
        let m = build_mask(2, &l);
        for j in 4..12 {
            assert!(!m.get(3, j));
            assert!(m.get(12 + 3, j));
        }
        assert!(!m.get(1, 3));
        assert!(!m.get(12 + 1, 3));
        assert!(m.get(3, 3));
    }

    #[test]
    fn window_hides_old_timesteps() {
        let l = TokenLayout::new(1);
        let m = build_mask_windowed(4, &l, Some(2));
        assert!(m.get(l.flat(Pos { timestep: 3, idx: 0 }), l.flat(Pos { timestep: 2, idx: 5 })));
        assert!(!m.get(l.flat(Pos { timestep: 3, idx: 0 }), l.flat(Pos { timestep: 1, idx: 5 })));
        assert_eq!(build_mask_windowed(2, &l, Some(2)), build_mask(2, &l));
    }
}
