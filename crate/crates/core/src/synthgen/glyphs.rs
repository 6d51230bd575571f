//! 5×7 block letters for the glyph-text garment pattern.

pub const GLYPH_W: usize = 5;
pub const GLYPH_H: usize = 7;

const FONT: &[(char, [u8; 7])] = &[
    ('A', [0b01110, 0b10001, 0b10001, 0b11111, 0b10001, 0b10001, 0b10001]),
    ('B', [0b11110, 0b10001, 0b10001, 0b11110, 0b10001, 0b10001, 0b11110]),
    ('C', [0b01110, 0b10001, 0b10000, 0b10000, 0b10000, 0b10001, 0b01110]),
    ('E', [0b11111, 0b10000, 0b10000, 0b11110, 0b10000, 0b10000, 0b11111]),
    ('F', [0b11111, 0b10000, 0b10000, 0b11110, 0b10000, 0b10000, 0b10000]),
    ('H', [0b10001, 0b10001, 0b10001, 0b11111, 0b10001, 0b10001, 0b10001]),
    ('K', [0b10001, 0b10010, 0b10100, 0b11000, 0b10100, 0b10010, 0b10001]),
    ('L', [0b10000, 0b10000, 0b10000, 0b10000, 0b10000, 0b10000, 0b11111]),
    ('N', [0b10001, 0b11001, 0b10101, 0b10011, 0b10001, 0b10001, 0b10001]),
    ('O', [0b01110, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01110]),
    ('P', [0b11110, 0b10001, 0b10001, 0b11110, 0b10000, 0b10000, 0b10000]),
    ('S', [0b01111, 0b10000, 0b10000, 0b01110, 0b00001, 0b00001, 0b11110]),
    ('T', [0b11111, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100]),
    ('U', [0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01110]),
    ('V', [0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01010, 0b00100]),
    ('X', [0b10001, 0b10001, 0b01010, 0b00100, 0b01010, 0b10001, 0b10001]),
    ('Y', [0b10001, 0b10001, 0b01010, 0b00100, 0b00100, 0b00100, 0b00100]),
    ('Z', [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b10000, 0b11111]),
];

pub fn alphabet_len() -> usize {
    FONT.len()
}

pub fn letter(index: usize) -> char {
    FONT[index % FONT.len()].0
}

/// Whether cell `(row, col)` of the letter's bitmap is inked.
pub fn inked(ch: char, row: usize, col: usize) -> bool {
    if row >= GLYPH_H || col >= GLYPH_W {
        return false;
    }
    FONT.iter()
        .find(|(c, _)| *c == ch)
        .is_some_and(|(_, rows)| rows[row] & (1 << (GLYPH_W - 1 - col)) != 0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn t_has_a_full_top_bar_and_a_stem() {
        assert!((0..5).all(|c| inked('T', 0, c)));
        assert!((1..7).all(|r| inked('T', r, 2) && !inked('T', r, 0)));
        assert!(!inked('?', 0, 0));
    }
}
