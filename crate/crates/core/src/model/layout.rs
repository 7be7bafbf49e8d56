//! Placement of register tokens among image tokens.

use serde::{Deserialize, Serialize};

/// Where registers go in the token sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionMode {
    /// All registers before the image tokens.
    Head,
    /// One contiguous run of registers at offset `⌊m/2⌋`.
    Middle,
    /// Image tokens split into `n+1` balanced groups with one register
    /// between consecutive groups.
    #[default]
    Even,
}

impl std::str::FromStr for PositionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "head" => Ok(PositionMode::Head),
            "middle" => Ok(PositionMode::Middle),
            "even" => Ok(PositionMode::Even),
            other => Err(format!("unknown position mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Slot {
    Image(usize),
    Register(usize),
}

/// A sequence of `m + n` slots, each tagged with the image patch or register
/// it holds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenLayout {
    pub mode: PositionMode,
    slots: Vec<Slot>,
    m: usize,
    n: usize,
}

/// Sizes of `groups` contiguous groups covering `m` items; the first
/// `m mod groups` groups get one extra.
pub fn balanced_groups(m: usize, groups: usize) -> Vec<usize> {
    let (base, extra) = (m / groups, m % groups);
    (0..groups).map(|g| base + usize::from(g < extra)).collect()
}

pub fn build_layout(m: usize, n: usize, mode: PositionMode) -> TokenLayout {
    let images = (0..m).map(Slot::Image);
    let registers = (0..n).map(Slot::Register);
    let slots: Vec<Slot> = match mode {
        PositionMode::Head => registers.chain(images).collect(),
        PositionMode::Middle => {
            let half = m / 2;
            (0..half)
                .map(Slot::Image)
                .chain(registers)
                .chain((half..m).map(Slot::Image))
                .collect()
        }
        PositionMode::Even => {
            let mut slots = Vec::with_capacity(m + n);
            let mut next = 0;
            for (g, size) in balanced_groups(m, n + 1).into_iter().enumerate() {
                if g > 0 {
                    slots.push(Slot::Register(g - 1));
                }
                slots.extend((next..next + size).map(Slot::Image));
                next += size;
            }
            slots
        }
    };
    TokenLayout { mode, slots, m, n }
}

impl TokenLayout {
    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn image_tokens(&self) -> usize {
        self.m
    }

    pub fn registers(&self) -> usize {
        self.n
    }

    /// Sequence positions of image tokens, in patch order.
    pub fn image_positions(&self) -> Vec<usize> {
        let mut pos = vec![0; self.m];
        for (k, s) in self.slots.iter().enumerate() {
            if let Slot::Image(i) = *s {
                pos[i] = k;
            }
        }
        pos
    }

    /// Sequence positions of registers, in register order.
    pub fn register_positions(&self) -> Vec<usize> {
        let mut pos = vec![0; self.n];
        for (k, s) in self.slots.iter().enumerate() {
            if let Slot::Register(j) = *s {
                pos[j] = k;
            }
        }
        pos
    }

    /// Row order that interleaves `[images; registers]` (image rows first,
    /// register rows at offset `m`) into sequence order.
    pub fn gather_order(&self) -> Vec<usize> {
        self.slots
            .iter()
            .map(|s| match *s {
                Slot::Image(i) => i,
                Slot::Register(j) => self.m + j,
            })
            .collect()
    }

    /// `I`/`R` string with single spaces, e.g. `I I R I I R I I`.
    pub fn pattern(&self) -> String {
        self.slots
            .iter()
            .map(|s| match s {
                Slot::Image(_) => "I",
                Slot::Register(_) => "R",
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

impl std::fmt::Display for TokenLayout {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.pattern())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_images_two_registers() {
        assert_eq!(build_layout(6, 2, PositionMode::Head).pattern(), "R R I I I I I I");
        assert_eq!(build_layout(6, 2, PositionMode::Middle).pattern(), "I I I R R I I I");
        assert_eq!(build_layout(6, 2, PositionMode::Even).pattern(), "I I R I I R I I");
    }

    #[test]
    fn remainder_goes_to_leading_groups() {
        let sizes = balanced_groups(196, 13);
        assert_eq!(sizes[0], 16);
        assert!(sizes[1..].iter().all(|&s| s == 15));
        assert_eq!(build_layout(5, 2, PositionMode::Even).pattern(), "I I R I I R I");
    }

    #[test]
    fn no_registers_is_identity() {
        for mode in [PositionMode::Head, PositionMode::Middle, PositionMode::Even] {
            let l = build_layout(4, 0, mode);
            assert_eq!(l.gather_order(), [0, 1, 2, 3]);
        }
    }
}
