//! Grids, the fixed token canvas the model reads and writes, and the
//! canonical digest used to tally votes.
//!
//! Tokens: `PAD = 0`, color `c` is token `c + 1`. A grid is placed at the
//! top-left of a square canvas (30x30 unless a smaller desk-scale canvas is
//! configured) and everything outside it is `PAD`.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Result, TrmError};

pub const MAX_GRID_SIDE: usize = 30;
pub const CANVAS_SIDE: usize = 30;
pub const CANVAS_LEN: usize = CANVAS_SIDE * CANVAS_SIDE;
pub const NUM_COLORS: usize = 10;
pub const PAD: u8 = 0;
/// PAD plus ten colors.
pub const VOCAB_SIZE: usize = NUM_COLORS + 1;

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Grid {
    height: usize,
    width: usize,
    cells: Vec<u8>,
}

impl Grid {
    pub fn new(height: usize, width: usize, cells: Vec<u8>) -> Result<Self> {
        if !(1..=MAX_GRID_SIDE).contains(&height) || !(1..=MAX_GRID_SIDE).contains(&width) {
            return Err(TrmError::GridBounds(format!(
                "size {height}x{width} outside 1..={MAX_GRID_SIDE}"
            )));
        }
        if cells.len() != height * width {
            return Err(TrmError::GridBounds(format!(
                "{} cells for a {height}x{width} grid",
                cells.len()
            )));
        }
        if let Some(bad) = cells.iter().find(|&&c| c as usize >= NUM_COLORS) {
            return Err(TrmError::GridBounds(format!("color {bad} outside 0..=9")));
        }
        Ok(Grid {
            height,
            width,
            cells,
        })
    }

    pub fn filled(height: usize, width: usize, color: u8) -> Result<Self> {
        Grid::new(height, width, vec![color; height * width])
    }

    pub fn from_rows<R: AsRef<[u8]>>(rows: &[R]) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.as_ref().len());
        let mut cells = Vec::with_capacity(height * width);
        for row in rows {
            let row = row.as_ref();
            if row.len() != width {
                return Err(TrmError::GridBounds("ragged rows".into()));
            }
            cells.extend_from_slice(row);
        }
        Grid::new(height, width, cells)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn cells(&self) -> &[u8] {
        &self.cells
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.cells[row * self.width + col]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[u8]> {
        self.cells.chunks(self.width)
    }

    pub fn to_rows(&self) -> Vec<Vec<u8>> {
        self.rows().map(<[u8]>::to_vec).collect()
    }
}

impl fmt::Debug for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Grid{}x{}[", self.height, self.width)?;
        for (i, row) in self.rows().enumerate() {
            if i > 0 {
                write!(f, "|")?;
            }
            for c in row {
                write!(f, "{c}")?;
            }
        }
        write!(f, "]")
    }
}

impl Serialize for Grid {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_rows().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Grid {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let rows: Vec<Vec<i64>> = Vec::deserialize(deserializer)?;
        let mut narrow = Vec::with_capacity(rows.len());
        for row in rows {
            let mut out = Vec::with_capacity(row.len());
            for v in row {
                if !(0..NUM_COLORS as i64).contains(&v) {
                    return Err(serde::de::Error::custom(format!(
                        "grid bounds: color {v} outside 0..=9"
                    )));
                }
                out.push(v as u8);
            }
            narrow.push(out);
        }
        Grid::from_rows(&narrow).map_err(|e| serde::de::Error::custom(e.to_string()))
    }
}

/// A square token canvas, row-major. The model's sequence length is
/// `side * side`.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct TokenCanvas {
    side: usize,
    tokens: Vec<u8>,
}

impl TokenCanvas {
    pub fn new(side: usize, tokens: Vec<u8>) -> Result<Self> {
        if side == 0 || side > CANVAS_SIDE {
            return Err(TrmError::GridBounds(format!("canvas side {side}")));
        }
        if tokens.len() != side * side {
            return Err(TrmError::GridBounds(format!(
                "{} tokens for a {side}x{side} canvas",
                tokens.len()
            )));
        }
        if let Some(bad) = tokens.iter().find(|&&t| t as usize >= VOCAB_SIZE) {
            return Err(TrmError::GridBounds(format!("token {bad} outside 0..=10")));
        }
        Ok(TokenCanvas { side, tokens })
    }

    pub fn blank(side: usize) -> Self {
        TokenCanvas {
            side,
            tokens: vec![PAD; side * side],
        }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn tokens(&self) -> &[u8] {
        &self.tokens
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.tokens[row * self.side + col]
    }

    /// Moves content up/left by `(dx, dy)`; anything shifted off the canvas is
    /// dropped and vacated cells become PAD.
    pub fn shifted_back(&self, dx: usize, dy: usize) -> TokenCanvas {
        let side = self.side;
        let mut out = vec![PAD; side * side];
        for r in 0..side.saturating_sub(dy) {
            for c in 0..side.saturating_sub(dx) {
                out[r * side + c] = self.tokens[(r + dy) * side + c + dx];
            }
        }
        TokenCanvas { side, tokens: out }
    }
}

impl fmt::Debug for TokenCanvas {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TokenCanvas{}[", self.side)?;
        for (i, row) in self.tokens.chunks(self.side).enumerate() {
            if i > 0 {
                write!(f, "|")?;
            }
            for t in row {
                write!(f, "{t:x}")?;
            }
        }
        write!(f, "]")
    }
}

/// Encodes onto the full 30x30 canvas.
pub fn encode_grid(grid: &Grid) -> TokenCanvas {
    encode_grid_at(grid, CANVAS_SIDE, 0, 0).expect("valid grids always fit the full canvas")
}

/// Encodes with the top-left corner of the grid at column `dx`, row `dy`.
pub fn encode_grid_at(grid: &Grid, side: usize, dx: usize, dy: usize) -> Result<TokenCanvas> {
    if grid.height + dy > side || grid.width + dx > side {
        return Err(TrmError::TranslationOverflow {
            dx,
            dy,
            height: grid.height,
            width: grid.width,
            side,
        });
    }
    let mut canvas = TokenCanvas::blank(side);
    for (r, row) in grid.rows().enumerate() {
        let start = (r + dy) * side + dx;
        for (slot, &c) in canvas.tokens[start..start + grid.width].iter_mut().zip(row) {
            *slot = c + 1;
        }
    }
    Ok(canvas)
}

/// Total decoding of a (possibly ill-formed) predicted canvas.
///
/// Height is the length of the prefix of rows that each contain a non-PAD
/// token, width likewise over columns. Interior PADs read as color 0, and a
/// PAD at the origin yields `[[0]]`.
pub fn decode_grid(canvas: &TokenCanvas) -> Grid {
    let side = canvas.side;
    let tokens = &canvas.tokens;
    if tokens[0] == PAD {
        return Grid {
            height: 1,
            width: 1,
            cells: vec![0],
        };
    }
    let height = (0..side)
        .take_while(|&r| tokens[r * side..(r + 1) * side].iter().any(|&t| t != PAD))
        .count();
    let width = (0..side)
        .take_while(|&c| (0..side).any(|r| tokens[r * side + c] != PAD))
        .count();
    let mut cells = Vec::with_capacity(height * width);
    for r in 0..height {
        for c in 0..width {
            cells.push(tokens[r * side + c].saturating_sub(1));
        }
    }
    Grid {
        height,
        width,
        cells,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GridDigest(pub u64);

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// FNV-1a, 64-bit.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    fnv1a64_extend(FNV_OFFSET, bytes)
}

pub(crate) fn fnv1a64_extend(mut hash: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

/// FNV-1a over `[h:u8][w:u8][cells row-major]`.
pub fn canonical_digest(grid: &Grid) -> GridDigest {
    let hash = fnv1a64_extend(FNV_OFFSET, &[grid.height as u8, grid.width as u8]);
    GridDigest(fnv1a64_extend(hash, &grid.cells))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn canvas_from(side: usize, rows: &[&[u8]]) -> TokenCanvas {
        let mut tokens = vec![PAD; side * side];
        for (r, row) in rows.iter().enumerate() {
            tokens[r * side..r * side + row.len()].copy_from_slice(row);
        }
        TokenCanvas::new(side, tokens).unwrap()
    }

    #[test]
    fn encode_single_cell() {
        let canvas = encode_grid(&Grid::from_rows(&[[3u8]]).unwrap());
        assert_eq!(canvas.tokens().len(), CANVAS_LEN);
        assert_eq!(canvas.tokens()[0], 4);
        assert_eq!(canvas.tokens().iter().filter(|&&t| t == PAD).count(), 899);
    }

    #[test]
    fn encode_two_by_two() {
        let canvas = encode_grid(&Grid::from_rows(&[[0u8, 1], [2, 3]]).unwrap());
        let t = canvas.tokens();
        assert_eq!((t[0], t[1], t[30], t[31]), (1, 2, 3, 4));
        assert_eq!(t.iter().filter(|&&x| x != PAD).count(), 4);
    }

    #[test]
    fn encode_full_canvas() {
        let canvas = encode_grid(&Grid::filled(30, 30, 0).unwrap());
        assert!(canvas.tokens().iter().all(|&t| t == 1));
    }

    #[test]
    fn decode_all_pad() {
        let g = decode_grid(&TokenCanvas::blank(30));
        assert_eq!(g, Grid::from_rows(&[[0u8]]).unwrap());
    }

    #[test]
    fn decode_ragged_prediction() {
        // row 0: three colors, row 1: two colors then PAD, row 2: empty.
        let canvas = canvas_from(30, &[&[3, 4, 5], &[6, 7, PAD]]);
        let g = decode_grid(&canvas);
        assert_eq!(g, Grid::from_rows(&[[2u8, 3, 4], [5, 6, 0]]).unwrap());
    }

    #[test]
    fn decode_stops_at_first_empty_row_and_column() {
        // rows stop at the empty row 2; columns are scanned over the whole canvas
        let canvas = canvas_from(5, &[&[2, 2, PAD, 9], &[2, 2], &[PAD], &[5, 5, 5, 5, 5]]);
        let g = decode_grid(&canvas);
        assert_eq!(g, Grid::from_rows(&[[1u8, 1, 0, 8, 0], [1, 1, 0, 0, 0]]).unwrap());
        let canvas = canvas_from(5, &[&[2, 2, PAD, 9], &[2, 2]]);
        assert_eq!(decode_grid(&canvas), Grid::from_rows(&[[1u8, 1], [1, 1]]).unwrap());
    }

    #[test]
    fn decode_pad_origin_is_degenerate() {
        let canvas = canvas_from(30, &[&[PAD, 5, 5], &[5, 5, 5]]);
        assert_eq!(decode_grid(&canvas), Grid::from_rows(&[[0u8]]).unwrap());
    }

    #[test]
    fn grid_validation() {
        assert!(Grid::new(0, 1, vec![]).is_err());
        assert!(Grid::new(31, 1, vec![0; 31]).is_err());
        assert!(Grid::new(1, 2, vec![0]).is_err());
        assert!(Grid::new(1, 1, vec![10]).is_err());
        assert!(Grid::from_rows(&[vec![1u8, 2], vec![3]]).is_err());
    }

    #[test]
    fn translated_encoding_overflows() {
        let g = Grid::filled(10, 10, 1).unwrap();
        assert!(encode_grid_at(&g, 30, 20, 20).is_ok());
        assert!(matches!(
            encode_grid_at(&g, 30, 21, 0),
            Err(TrmError::TranslationOverflow { .. })
        ));
    }

    #[test]
    fn shift_back_inverts_offset_encoding() {
        let g = Grid::from_rows(&[[1u8, 2, 3], [4, 5, 6]]).unwrap();
        let placed = encode_grid_at(&g, 8, 3, 4).unwrap();
        assert_eq!(placed.shifted_back(3, 4), encode_grid_at(&g, 8, 0, 0).unwrap());
    }

    #[test]
    fn fnv_reference_vectors() {
        // Published FNV-1a 64 test vectors.
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn digest_json_round_trip() {
        let g = Grid::from_rows(&[[1u8, 2], [3, 4]]).unwrap();
        let json = serde_json::to_string(&g).unwrap();
        assert_eq!(json, "[[1,2],[3,4]]");
        let back: Grid = serde_json::from_str(&json).unwrap();
        assert_eq!(canonical_digest(&back), canonical_digest(&g));
        assert!(serde_json::from_str::<Grid>("[[1,12]]").is_err());
    }
}
