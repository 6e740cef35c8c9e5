//! The augmentation group: dihedral transforms, color permutations and
//! canvas translations, each with an exact inverse.
//!
//! An augmentation is applied in the order dihedral, then colors, then
//! translation. Its inverse undoes them in reverse order.

use std::collections::HashSet;
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TrmError};
use crate::grid::{decode_grid, encode_grid_at, Grid, TokenCanvas, CANVAS_SIDE, NUM_COLORS};

/// One of the 8 symmetries of the square.
///
/// 0 identity, 1 rotate 90 clockwise, 2 rotate 180, 3 rotate 270 clockwise,
/// 4 horizontal flip (mirror columns), 5 vertical flip (mirror rows),
/// 6 main-diagonal transpose, 7 anti-diagonal transpose.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DihedralElement(u8);

impl DihedralElement {
    pub const IDENTITY: DihedralElement = DihedralElement(0);
    pub const ROT90: DihedralElement = DihedralElement(1);
    pub const ROT180: DihedralElement = DihedralElement(2);
    pub const ROT270: DihedralElement = DihedralElement(3);
    pub const FLIP_H: DihedralElement = DihedralElement(4);
    pub const FLIP_V: DihedralElement = DihedralElement(5);
    pub const TRANSPOSE: DihedralElement = DihedralElement(6);
    pub const ANTI_TRANSPOSE: DihedralElement = DihedralElement(7);

    pub fn new(index: u8) -> Option<Self> {
        (index < 8).then_some(DihedralElement(index))
    }

    pub fn all() -> impl Iterator<Item = DihedralElement> {
        (0..8).map(DihedralElement)
    }

    pub fn index(self) -> u8 {
        self.0
    }

    pub fn swaps_axes(self) -> bool {
        matches!(self.0, 1 | 3 | 6 | 7)
    }

    pub fn inverse(self) -> Self {
        match self.0 {
            1 => Self::ROT270,
            3 => Self::ROT90,
            _ => self,
        }
    }

    /// Output shape for an input of `height x width`.
    pub fn output_shape(self, height: usize, width: usize) -> (usize, usize) {
        if self.swaps_axes() {
            (width, height)
        } else {
            (height, width)
        }
    }

    /// Input cell that lands at output `(r, c)` for an input of `height x width`.
    fn source(self, height: usize, width: usize, r: usize, c: usize) -> (usize, usize) {
        match self.0 {
            0 => (r, c),
            1 => (height - 1 - c, r),
            2 => (height - 1 - r, width - 1 - c),
            3 => (c, width - 1 - r),
            4 => (r, width - 1 - c),
            5 => (height - 1 - r, c),
            6 => (c, r),
            7 => (height - 1 - c, width - 1 - r),
            _ => unreachable!("dihedral index is always < 8"),
        }
    }

    pub fn apply(self, grid: &Grid) -> Grid {
        let (h, w) = (grid.height(), grid.width());
        let (oh, ow) = self.output_shape(h, w);
        let mut cells = Vec::with_capacity(oh * ow);
        for r in 0..oh {
            for c in 0..ow {
                let (sr, sc) = self.source(h, w, r, c);
                cells.push(grid.get(sr, sc));
            }
        }
        Grid::new(oh, ow, cells).expect("dihedral maps valid grids to valid grids")
    }

    /// The element equal to applying `self` and then `next`.
    pub fn then(self, next: DihedralElement) -> DihedralElement {
        let probe = Grid::from_rows(&[[0u8, 1, 2], [3, 4, 5]]).expect("probe grid");
        let target = next.apply(&self.apply(&probe));
        DihedralElement::all()
            .find(|e| e.apply(&probe) == target)
            .expect("D4 is closed under composition")
    }
}

/// A bijection on the ten colors.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ColorPermutation([u8; NUM_COLORS]);

impl ColorPermutation {
    pub const IDENTITY: ColorPermutation = ColorPermutation([0, 1, 2, 3, 4, 5, 6, 7, 8, 9]);

    pub fn new(mapping: [u8; NUM_COLORS]) -> Option<Self> {
        let mut seen = [false; NUM_COLORS];
        for &m in &mapping {
            let slot = seen.get_mut(m as usize)?;
            if *slot {
                return None;
            }
            *slot = true;
        }
        Some(ColorPermutation(mapping))
    }

    /// Exchanges two colors.
    pub fn swap(a: u8, b: u8) -> Self {
        let mut mapping = Self::IDENTITY.0;
        mapping.swap(a as usize, b as usize);
        ColorPermutation(mapping)
    }

    pub fn mapping(&self) -> &[u8; NUM_COLORS] {
        &self.0
    }

    pub fn map(&self, color: u8) -> u8 {
        self.0[color as usize]
    }

    pub fn inverse(&self) -> Self {
        let mut inv = [0u8; NUM_COLORS];
        for (from, &to) in self.0.iter().enumerate() {
            inv[to as usize] = from as u8;
        }
        ColorPermutation(inv)
    }

    pub fn fixes_background(&self) -> bool {
        self.0[0] == 0
    }

    pub fn apply(&self, grid: &Grid) -> Grid {
        let cells = grid.cells().iter().map(|&c| self.map(c)).collect();
        Grid::new(grid.height(), grid.width(), cells).expect("permutation keeps colors in range")
    }
}

impl fmt::Debug for ColorPermutation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Colors[")?;
        for c in self.0 {
            write!(f, "{c}")?;
        }
        write!(f, "]")
    }
}

/// Non-negative canvas offset: `dx` columns right, `dy` rows down.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Translation {
    pub dx: usize,
    pub dy: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Augmentation {
    pub dihedral: DihedralElement,
    pub colors: ColorPermutation,
    pub translation: Translation,
}

pub const AUGMENTATION_RECORD_LEN: usize = 13;

impl Augmentation {
    pub const IDENTITY: Augmentation = Augmentation {
        dihedral: DihedralElement::IDENTITY,
        colors: ColorPermutation::IDENTITY,
        translation: Translation { dx: 0, dy: 0 },
    };

    pub fn new(dihedral: DihedralElement, colors: ColorPermutation, translation: Translation) -> Self {
        Augmentation {
            dihedral,
            colors,
            translation,
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    /// `[d:u8][perm:10 x u8][dx:u8][dy:u8]`
    pub fn to_record(&self) -> [u8; AUGMENTATION_RECORD_LEN] {
        let mut out = [0u8; AUGMENTATION_RECORD_LEN];
        out[0] = self.dihedral.0;
        out[1..11].copy_from_slice(&self.colors.0);
        out[11] = self.translation.dx as u8;
        out[12] = self.translation.dy as u8;
        out
    }

    pub fn from_record(record: &[u8]) -> Option<Self> {
        if record.len() != AUGMENTATION_RECORD_LEN {
            return None;
        }
        let dihedral = DihedralElement::new(record[0])?;
        let colors = ColorPermutation::new(record[1..11].try_into().ok()?)?;
        let (dx, dy) = (record[11] as usize, record[12] as usize);
        if dx >= CANVAS_SIDE || dy >= CANVAS_SIDE {
            return None;
        }
        Some(Augmentation::new(dihedral, colors, Translation { dx, dy }))
    }

    /// Dihedral and color parts only.
    pub fn transform_grid(&self, grid: &Grid) -> Grid {
        self.colors.apply(&self.dihedral.apply(grid))
    }
}

/// A transformed grid together with its canvas offset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlacedGrid {
    pub grid: Grid,
    pub offset: Translation,
}

impl PlacedGrid {
    pub fn to_canvas(&self, side: usize) -> Result<TokenCanvas> {
        encode_grid_at(&self.grid, side, self.offset.dx, self.offset.dy)
    }
}

/// Applies `augmentation` to `grid`, checking the translated content still
/// fits the 30x30 canvas.
pub fn apply_augmentation(grid: &Grid, augmentation: &Augmentation) -> Result<PlacedGrid> {
    apply_augmentation_on(grid, augmentation, CANVAS_SIDE)
}

pub fn apply_augmentation_on(grid: &Grid, augmentation: &Augmentation, side: usize) -> Result<PlacedGrid> {
    let transformed = augmentation.transform_grid(grid);
    let Translation { dx, dy } = augmentation.translation;
    if transformed.height() + dy > side || transformed.width() + dx > side {
        return Err(TrmError::TranslationOverflow {
            dx,
            dy,
            height: transformed.height(),
            width: transformed.width(),
            side,
        });
    }
    Ok(PlacedGrid {
        grid: transformed,
        offset: augmentation.translation,
    })
}

/// Undoes an augmentation: un-offset, inverse colors, inverse dihedral.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InverseAugmentation {
    offset: Translation,
    colors: ColorPermutation,
    dihedral: DihedralElement,
}

impl InverseAugmentation {
    pub fn is_identity(&self) -> bool {
        *self == invert_augmentation(&Augmentation::IDENTITY)
    }

    /// Maps a grid already stripped of its offset back to the original frame.
    pub fn apply_to_grid(&self, grid: &Grid) -> Grid {
        self.dihedral.apply(&self.colors.apply(grid))
    }

    pub fn apply_to_placed(&self, placed: &PlacedGrid) -> Grid {
        self.apply_to_grid(&placed.grid)
    }

    /// Maps a model prediction in the augmented frame back to an original-frame grid.
    pub fn apply_to_canvas(&self, canvas: &TokenCanvas) -> Grid {
        let unshifted = canvas.shifted_back(self.offset.dx, self.offset.dy);
        self.apply_to_grid(&decode_grid(&unshifted))
    }
}

pub fn invert_augmentation(augmentation: &Augmentation) -> InverseAugmentation {
    InverseAugmentation {
        offset: augmentation.translation,
        colors: augmentation.colors.inverse(),
        dihedral: augmentation.dihedral.inverse(),
    }
}

/// Which parts of the group are sampled, and the canvas translations must fit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationSpace {
    pub canvas_side: usize,
    pub dihedral: bool,
    pub recolor: bool,
    /// Restrict color permutations to those fixing color 0.
    pub fix_background: bool,
    pub translate: bool,
}

impl Default for AugmentationSpace {
    fn default() -> Self {
        AugmentationSpace {
            canvas_side: CANVAS_SIDE,
            dihedral: true,
            recolor: true,
            fix_background: false,
            translate: true,
        }
    }
}

/// Largest height and width over every grid of a task.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridExtent {
    pub max_height: usize,
    pub max_width: usize,
}

impl GridExtent {
    pub fn of<'a>(grids: impl IntoIterator<Item = &'a Grid>) -> Self {
        grids.into_iter().fold(
            GridExtent {
                max_height: 1,
                max_width: 1,
            },
            |acc, g| GridExtent {
                max_height: acc.max_height.max(g.height()),
                max_width: acc.max_width.max(g.width()),
            },
        )
    }

    /// Largest admissible (dx, dy) after applying `d`.
    fn translation_headroom(&self, d: DihedralElement, side: usize) -> Option<(usize, usize)> {
        let (h, w) = d.output_shape(self.max_height, self.max_width);
        Some((side.checked_sub(w)?, side.checked_sub(h)?))
    }
}

const ENUMERATION_LIMIT: u128 = 1 << 16;

fn factorial(n: u128) -> u128 {
    (1..=n).product()
}

impl AugmentationSpace {
    fn dihedral_elements(&self) -> Vec<DihedralElement> {
        if self.dihedral {
            DihedralElement::all().collect()
        } else {
            vec![DihedralElement::IDENTITY]
        }
    }

    fn permutation_count(&self) -> u128 {
        match (self.recolor, self.fix_background) {
            (false, _) => 1,
            (true, true) => factorial(9),
            (true, false) => factorial(10),
        }
    }

    /// Number of distinct augmentations whose translations fit `extent`.
    pub fn size(&self, extent: &GridExtent) -> u128 {
        let placements: u128 = self
            .dihedral_elements()
            .into_iter()
            .filter_map(|d| extent.translation_headroom(d, self.canvas_side))
            .map(|(tx, ty)| {
                if self.translate {
                    (tx as u128 + 1) * (ty as u128 + 1)
                } else {
                    1
                }
            })
            .sum();
        placements * self.permutation_count()
    }

    fn random_permutation(&self, rng: &mut ChaCha8Rng) -> ColorPermutation {
        if !self.recolor {
            return ColorPermutation::IDENTITY;
        }
        let mut mapping = ColorPermutation::IDENTITY.0;
        if self.fix_background {
            mapping[1..].shuffle(rng);
        } else {
            mapping.shuffle(rng);
        }
        ColorPermutation(mapping)
    }
}

/// Derives a per-task seed from a run seed and the task id.
pub fn task_seed(base_seed: u64, task_id: &str) -> u64 {
    splitmix64(base_seed ^ crate::grid::fnv1a64(task_id.as_bytes()))
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Samples `n` distinct augmentations valid for every grid within `extent`.
///
/// Element 0 is always the identity. The list for a given seed is
/// prefix-stable: asking for fewer augmentations returns a prefix of a longer
/// request.
pub fn sample_augmentations(
    task_seed: u64,
    n: usize,
    extent: &GridExtent,
    space: &AugmentationSpace,
) -> Result<Vec<Augmentation>> {
    let available = space.size(extent);
    if extent.max_height > space.canvas_side || extent.max_width > space.canvas_side {
        return Err(TrmError::InsufficientAugmentationSpace {
            available: 0,
            requested: n,
        });
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    if (n as u128) > available {
        return Err(TrmError::InsufficientAugmentationSpace {
            available,
            requested: n,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(task_seed);
    let mut out = vec![Augmentation::IDENTITY];

    if available <= ENUMERATION_LIMIT {
        let mut all = enumerate_space(extent, space);
        all.retain(|a| !a.is_identity());
        all.shuffle(&mut rng);
        out.extend(all.into_iter().take(n - 1));
        return Ok(out);
    }

    let elements = space.dihedral_elements();
    let mut seen: HashSet<Augmentation> = out.iter().copied().collect();
    while out.len() < n {
        let d = elements[rng.random_range(0..elements.len())];
        let Some((tx, ty)) = extent.translation_headroom(d, space.canvas_side) else {
            continue;
        };
        let colors = space.random_permutation(&mut rng);
        let translation = if space.translate {
            Translation {
                dx: rng.random_range(0..=tx),
                dy: rng.random_range(0..=ty),
            }
        } else {
            Translation::default()
        };
        let a = Augmentation::new(d, colors, translation);
        if seen.insert(a) {
            out.push(a);
        }
    }
    Ok(out)
}

/// Every augmentation in a space small enough to list (no recoloring).
fn enumerate_space(extent: &GridExtent, space: &AugmentationSpace) -> Vec<Augmentation> {
    debug_assert!(!space.recolor);
    let mut all = Vec::new();
    for d in space.dihedral_elements() {
        let Some((tx, ty)) = extent.translation_headroom(d, space.canvas_side) else {
            continue;
        };
        let (tx, ty) = if space.translate { (tx, ty) } else { (0, 0) };
        for dy in 0..=ty {
            for dx in 0..=tx {
                all.push(Augmentation::new(d, ColorPermutation::IDENTITY, Translation { dx, dy }));
            }
        }
    }
    all
}
