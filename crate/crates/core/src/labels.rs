//! Binary masks, exact Euclidean distance transforms, and the split of a
//! mask's foreground into boundary, center and others regions.

use gapnet_tensor::{Real, Tensor};

use crate::error::{invalid, Result};

/// Squared distance reported when no target pixel exists at all.
pub const EDT_INF: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(invalid(format!(
                "mask {width}x{height} needs {} pixels, got {}",
                width * height,
                bits.len()
            )));
        }
        Ok(BinaryMask { width, height, bits })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        BinaryMask {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    /// `f(row, col)` for every pixel.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let bits = (0..width * height).map(|i| f(i / width, i % width)).collect();
        BinaryMask { width, height, bits }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.contains(&true)
    }

    pub fn union(&self, other: &Self) -> Self {
        self.zip(other, |a, b| a || b)
    }

    pub fn intersection(&self, other: &Self) -> Self {
        self.zip(other, |a, b| a && b)
    }

    pub fn complement(&self) -> Self {
        BinaryMask {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    fn zip(&self, other: &Self, f: impl Fn(bool, bool) -> bool) -> Self {
        assert_eq!((self.width, self.height), (other.width, other.height), "mask extents differ");
        BinaryMask {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().zip(&other.bits).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    /// `[1, 1, H, W]` tensor of zeros and ones.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::new(
            &[1, 1, self.height, self.width],
            self.bits.iter().map(|&b| if b { T::one() } else { T::zero() }).collect(),
        )
        .expect("extent matches")
    }

    /// Horizontal mirror image.
    pub fn flipped(&self) -> Self {
        Self::from_fn(self.width, self.height, |r, c| self.get(r, self.width - 1 - c))
    }
}

/// Exact squared distance from every pixel to the nearest `target` pixel of
/// a `width × height` grid, with the flat index of that pixel.
///
/// Among equidistant targets the smallest column wins, then the smallest
/// row. Without any target every entry is [`EDT_INF`] / `usize::MAX`.
pub fn nearest_target(targets: &[bool], width: usize, height: usize) -> (Vec<u64>, Vec<usize>) {
    let n = width * height;
    assert_eq!(targets.len(), n, "target grid size");
    // Per column: nearest target row, ties to the smaller row.
    let mut near_row = vec![usize::MAX; n];
    for c in 0..width {
        let mut above = None;
        for r in 0..height {
            if targets[r * width + c] {
                above = Some(r);
            }
            near_row[r * width + c] = above.map_or(usize::MAX, |a| a);
        }
        let mut below = None;
        for r in (0..height).rev() {
            if targets[r * width + c] {
                below = Some(r);
            }
            let i = r * width + c;
            if let Some(b) = below {
                if near_row[i] == usize::MAX || b - r < r - near_row[i] {
                    near_row[i] = b;
                }
            }
        }
    }
    let mut dist = vec![EDT_INF; n];
    let mut index = vec![usize::MAX; n];
    // Lower envelope of the parabolas (x - q)² + f(q) along each row.
    let mut f = vec![0i64; width];
    let mut v = vec![0usize; width];
    let mut z: Vec<(i64, i64)> = vec![(0, 1); width + 1];
    for r in 0..height {
        let row = &near_row[r * width..(r + 1) * width];
        let mut k: isize = -1;
        for q in 0..width {
            if row[q] == usize::MAX {
                continue;
            }
            let dy = r as i64 - row[q] as i64;
            f[q] = dy * dy;
            let q_i = q as i64;
            loop {
                if k < 0 {
                    k = 0;
                    v[0] = q;
                    z[0] = (i64::MIN, 1);
                    z[1] = (i64::MAX, 1);
                    break;
                }
                let p = v[k as usize];
                let p_i = p as i64;
                let s = ((f[q] + q_i * q_i) - (f[p] + p_i * p_i), 2 * (q_i - p_i));
                if rational_le(s, z[k as usize]) {
                    k -= 1;
                    continue;
                }
                k += 1;
                v[k as usize] = q;
                z[k as usize] = s;
                z[k as usize + 1] = (i64::MAX, 1);
                break;
            }
        }
        if k < 0 {
            continue;
        }
        let mut j = 0usize;
        for x in 0..width {
            let x_i = x as i64;
            while rational_lt(z[j + 1], (x_i, 1)) {
                j += 1;
            }
            let q = v[j];
            let dx = x_i - q as i64;
            dist[r * width + x] = (dx * dx + f[q]) as u64;
            index[r * width + x] = row[q] * width + q;
        }
    }
    (dist, index)
}

fn rational_le(a: (i64, i64), b: (i64, i64)) -> bool {
    cmp_rational(a, b) != std::cmp::Ordering::Greater
}

fn rational_lt(a: (i64, i64), b: (i64, i64)) -> bool {
    cmp_rational(a, b) == std::cmp::Ordering::Less
}

/// Compares `a.0 / a.1` with `b.0 / b.1` for positive denominators; the
/// extreme numerators stand for ±∞.
fn cmp_rational(a: (i64, i64), b: (i64, i64)) -> std::cmp::Ordering {
    let inf = |x: (i64, i64)| match x.0 {
        i64::MIN => -1,
        i64::MAX => 1,
        _ => 0,
    };
    match (inf(a), inf(b)) {
        (0, 0) => (a.0 as i128 * b.1 as i128).cmp(&(b.0 as i128 * a.1 as i128)),
        (x, y) => x.cmp(&y),
    }
}

/// Squared distance from each foreground pixel to the nearest background
/// pixel; background pixels get 0 and an all-foreground mask gets
/// [`EDT_INF`] everywhere.
pub fn edt_squared(mask: &BinaryMask) -> Result<Vec<u64>> {
    if mask.width == 0 || mask.height == 0 {
        return Err(invalid("distance transform of a zero-area mask"));
    }
    let background: Vec<bool> = mask.bits.iter().map(|b| !b).collect();
    Ok(nearest_target(&background, mask.width, mask.height).0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Region {
    Background,
    Boundary,
    Center,
    Others,
}

impl Region {
    /// Gray level used when exporting region maps.
    pub fn palette(self) -> u8 {
        match self {
            Region::Background => 0,
            Region::Boundary => 85,
            Region::Others => 170,
            Region::Center => 255,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecomposeParams {
    /// Pixels closer than this to the background are boundary.
    pub boundary_px: u64,
    /// Share of foreground pixels, by decreasing distance, that form the center.
    pub center_percent: u64,
}

impl Default for DecomposeParams {
    fn default() -> Self {
        DecomposeParams {
            boundary_px: 5,
            center_percent: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TriRegionLabel {
    pub width: usize,
    pub height: usize,
    pub region: Vec<Region>,
    pub dist2: Vec<u64>,
}

impl TriRegionLabel {
    pub fn mask(&self, region: Region) -> BinaryMask {
        BinaryMask {
            width: self.width,
            height: self.height,
            bits: self.region.iter().map(|&r| r == region).collect(),
        }
    }

    pub fn palette_image(&self) -> Vec<u8> {
        self.region.iter().map(|r| r.palette()).collect()
    }
}

/// Splits the foreground into boundary (distance below the threshold),
/// center (top share by distance, boundary excluded) and others.
pub fn decompose(mask: &BinaryMask, params: DecomposeParams) -> Result<TriRegionLabel> {
    let dist2 = edt_squared(mask)?;
    let limit = params.boundary_px * params.boundary_px;
    let mut region: Vec<Region> = mask
        .bits
        .iter()
        .zip(&dist2)
        .map(|(&fg, &d)| match (fg, d < limit) {
            (false, _) => Region::Background,
            (true, true) => Region::Boundary,
            (true, false) => Region::Others,
        })
        .collect();
    let mut fg: Vec<usize> = (0..region.len()).filter(|&i| mask.bits[i]).collect();
    let take = (fg.len() as u64 * params.center_percent).div_ceil(100) as usize;
    // Stable sort keeps row-major order among equal distances.
    fg.sort_by(|&a, &b| dist2[b].cmp(&dist2[a]));
    for &i in fg.iter().take(take) {
        if region[i] == Region::Others {
            region[i] = Region::Center;
        }
    }
    Ok(TriRegionLabel {
        width: mask.width,
        height: mask.height,
        region,
        dist2,
    })
}

/// What a side output is trained against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Target {
    Full,
    Boundary,
    Center,
    Others,
    CenterOthers,
    BoundaryOthers,
}

/// Every target map derivable from one mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionTargets {
    pub full: BinaryMask,
    pub label: TriRegionLabel,
}

impl RegionTargets {
    pub fn new(mask: &BinaryMask) -> Result<Self> {
        Ok(RegionTargets {
            full: mask.clone(),
            label: decompose(mask, DecomposeParams::default())?,
        })
    }

    pub fn get(&self, target: Target) -> BinaryMask {
        let l = &self.label;
        match target {
            Target::Full => self.full.clone(),
            Target::Boundary => l.mask(Region::Boundary),
            Target::Center => l.mask(Region::Center),
            Target::Others => l.mask(Region::Others),
            Target::CenterOthers => l.mask(Region::Center).union(&l.mask(Region::Others)),
            Target::BoundaryOthers => l.mask(Region::Boundary).union(&l.mask(Region::Others)),
        }
    }
}

/// `(g1, g2, g3)`: boundary ∪ others, center, and the full mask.
pub fn supervision_targets(mask: &BinaryMask) -> Result<(BinaryMask, BinaryMask, BinaryMask)> {
    let t = RegionTargets::new(mask)?;
    Ok((t.get(Target::BoundaryOthers), t.get(Target::Center), t.get(Target::Full)))
}
