//! Geometry-aligned partitions of a feature map into equal rectangles, their
//! inverse, and the raster between a patch and a token sequence.
//!
//! Cut geometry is recursive bisection alternating axes, height first:
//!
//! | level      | k  | grid (rows x cols) |
//! |------------|----|--------------------|
//! | full       | 1  | 1 x 1              |
//! | halves     | 2  | 2 x 1              |
//! | quadrants  | 4  | 2 x 2              |
//! | octants    | 8  | 4 x 2              |
//! | sixteenths | 16 | 4 x 4              |
//!
//! Patches are ordered row-major over the grid, top-left first.

use std::fmt;
use std::str::FromStr;

use crate::error::{shape_err, Error, Result};
use crate::real::Real;
use crate::ssm::TokenSequence;
use crate::tensor::{FeatureMap, Shape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SplitLevel {
    Full,
    Halves,
    Quadrants,
    Octants,
    Sixteenths,
}

impl SplitLevel {
    pub const ALL: [SplitLevel; 5] = [
        SplitLevel::Full,
        SplitLevel::Halves,
        SplitLevel::Quadrants,
        SplitLevel::Octants,
        SplitLevel::Sixteenths,
    ];

    pub fn k(self) -> usize {
        let (r, c) = self.grid();
        r * c
    }

    /// Patch grid as `(rows, cols)`.
    pub fn grid(self) -> (usize, usize) {
        match self {
            SplitLevel::Full => (1, 1),
            SplitLevel::Halves => (2, 1),
            SplitLevel::Quadrants => (2, 2),
            SplitLevel::Octants => (4, 2),
            SplitLevel::Sixteenths => (4, 4),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SplitLevel::Full => "full",
            SplitLevel::Halves => "halves",
            SplitLevel::Quadrants => "quadrants",
            SplitLevel::Octants => "octants",
            SplitLevel::Sixteenths => "sixteenths",
        }
    }

    pub fn from_k(k: usize) -> Option<Self> {
        Self::ALL.into_iter().find(|l| l.k() == k)
    }
}

impl fmt::Display for SplitLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SplitLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase();
        let level = match t.as_str() {
            "full" | "none" | "1" => SplitLevel::Full,
            "halves" | "half" | "2" => SplitLevel::Halves,
            "quadrants" | "quadrant" | "quarter" | "quarters" | "4" => SplitLevel::Quadrants,
            "octants" | "octant" | "8" => SplitLevel::Octants,
            "sixteenths" | "sixteenth" | "16" => SplitLevel::Sixteenths,
            _ => return Err(Error::Invalid(format!("unknown split level {s:?}"))),
        };
        Ok(level)
    }
}

/// One rectangle of a partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchRect {
    pub y: usize,
    pub x: usize,
    pub h: usize,
    pub w: usize,
}

/// A split level bound to concrete (already padded) map extents.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PartitionSpec {
    pub level: SplitLevel,
    pub h: usize,
    pub w: usize,
}

impl PartitionSpec {
    pub fn new(level: SplitLevel, h: usize, w: usize) -> Result<Self> {
        let (rows, cols) = level.grid();
        if h == 0 || w == 0 || h % rows != 0 || w % cols != 0 {
            return Err(Error::NotDivisible { h, w, rows, cols });
        }
        Ok(Self { level, h, w })
    }

    pub fn k(&self) -> usize {
        self.level.k()
    }

    pub fn patch_h(&self) -> usize {
        self.h / self.level.grid().0
    }

    pub fn patch_w(&self) -> usize {
        self.w / self.level.grid().1
    }

    /// Tokens per patch sequence.
    pub fn patch_len(&self) -> usize {
        self.patch_h() * self.patch_w()
    }

    pub fn rects(&self) -> impl Iterator<Item = PatchRect> + '_ {
        let (rows, cols) = self.level.grid();
        let (ph, pw) = (self.patch_h(), self.patch_w());
        (0..rows * cols).map(move |j| PatchRect {
            y: (j / cols) * ph,
            x: (j % cols) * pw,
            h: ph,
            w: pw,
        })
    }

    /// Patch index and raster position of pixel `(y, x)`.
    pub fn locate(&self, y: usize, x: usize) -> (usize, usize) {
        let (_, cols) = self.level.grid();
        let (ph, pw) = (self.patch_h(), self.patch_w());
        let patch = (y / ph) * cols + x / pw;
        (patch, (y % ph) * pw + x % pw)
    }
}

/// The `k` patches of a split, in row-major grid order.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet<T> {
    pub patches: Vec<FeatureMap<T>>,
    pub spec: PartitionSpec,
    pub parent: Shape,
}

/// Partitions `x` into `level.k()` equal rectangles.
pub fn split<T: Real>(x: &FeatureMap<T>, level: SplitLevel) -> Result<PatchSet<T>> {
    let s = x.shape();
    let spec = PartitionSpec::new(level, s.h, s.w)?;
    if level == SplitLevel::Full {
        return Ok(PatchSet {
            patches: vec![x.clone()],
            spec,
            parent: s,
        });
    }
    let patches = spec
        .rects()
        .map(|r| {
            let mut data = Vec::with_capacity(s.b * s.c * r.h * r.w);
            for plane in x.data().chunks(s.plane()) {
                for y in r.y..r.y + r.h {
                    data.extend_from_slice(&plane[y * s.w + r.x..y * s.w + r.x + r.w]);
                }
            }
            FeatureMap::from_vec(s.with_hw(r.h, r.w), data).expect("patch extents")
        })
        .collect();
    Ok(PatchSet {
        patches,
        spec,
        parent: s,
    })
}

/// Reassembles the full map from its patches.
pub fn merge<T: Real>(ps: &PatchSet<T>) -> Result<FeatureMap<T>> {
    let s = ps.parent;
    if ps.patches.len() != ps.spec.k() || (ps.spec.h, ps.spec.w) != (s.h, s.w) {
        return Err(Error::Invalid(format!(
            "patch set holds {} patches for a level with k = {}",
            ps.patches.len(),
            ps.spec.k()
        )));
    }
    let want = s.with_hw(ps.spec.patch_h(), ps.spec.patch_w());
    for p in &ps.patches {
        if p.shape() != want {
            return Err(shape_err("merge patch", &p.shape().dims(), &want.dims()));
        }
    }
    if ps.spec.level == SplitLevel::Full {
        return Ok(ps.patches[0].clone());
    }
    let mut out = FeatureMap::zeros(s);
    let plane = s.plane();
    for (r, p) in ps.spec.rects().zip(&ps.patches) {
        for (pi, src) in p.data().chunks(r.h * r.w).enumerate() {
            let dst = &mut out.data_mut()[pi * plane..(pi + 1) * plane];
            for y in 0..r.h {
                dst[(r.y + y) * s.w + r.x..(r.y + y) * s.w + r.x + r.w]
                    .copy_from_slice(&src[y * r.w..(y + 1) * r.w]);
            }
        }
    }
    Ok(out)
}

/// Row-major raster of a patch into a `(B, C, H*W)` sequence.
pub fn unfold<T: Real>(patch: &FeatureMap<T>) -> TokenSequence<T> {
    let s = patch.shape();
    let mut seq = TokenSequence::new(s.b, s.c, s.plane(), patch.data().to_vec()).expect("non-empty patch");
    seq.origin = Some((s.h, s.w));
    seq
}

/// Inverse of [`unfold`].
pub fn fold<T: Real>(seq: &TokenSequence<T>, h: usize, w: usize) -> Result<FeatureMap<T>> {
    if seq.len != h * w {
        return Err(shape_err("fold sequence length vs patch", &[seq.len], &[h, w]));
    }
    FeatureMap::from_vec(Shape::new(seq.batch, seq.channels, h, w), seq.values.clone())
}

/// Sequence-distance statistics for 4-connected neighbour pairs under one partition.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyStats {
    pub level: SplitLevel,
    pub pairs: usize,
    pub in_patch_pairs: usize,
    pub mean_dist: f64,
    pub max_dist: usize,
    pub severed_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyReport {
    pub h: usize,
    pub w: usize,
    pub level: AdjacencyStats,
    pub baseline: AdjacencyStats,
}

fn adjacency_stats(spec: &PartitionSpec) -> AdjacencyStats {
    let (h, w) = (spec.h, spec.w);
    let mut pairs = 0usize;
    let mut inside = 0usize;
    let mut sum = 0usize;
    let mut max = 0usize;
    for y in 0..h {
        for x in 0..w {
            let here = spec.locate(y, x);
            let neighbours = [(y, x + 1), (y + 1, x)];
            for (ny, nx) in neighbours {
                if ny >= h || nx >= w {
                    continue;
                }
                pairs += 1;
                let there = spec.locate(ny, nx);
                if here.0 == there.0 {
                    let d = here.1.abs_diff(there.1);
                    inside += 1;
                    sum += d;
                    max = max.max(d);
                }
            }
        }
    }
    AdjacencyStats {
        level: spec.level,
        pairs,
        in_patch_pairs: inside,
        mean_dist: if inside == 0 { 0.0 } else { sum as f64 / inside as f64 },
        max_dist: max,
        severed_fraction: if pairs == 0 { 0.0 } else { (pairs - inside) as f64 / pairs as f64 },
    }
}

/// Distribution of raster distance between spatial neighbours, with the full
/// raster as baseline. Pairs straddling a patch boundary are counted as severed.
pub fn adjacency_distortion(h: usize, w: usize, level: SplitLevel) -> Result<AdjacencyReport> {
    let spec = PartitionSpec::new(level, h, w)?;
    let full = PartitionSpec::new(SplitLevel::Full, h, w)?;
    Ok(AdjacencyReport {
        h,
        w,
        level: adjacency_stats(&spec),
        baseline: adjacency_stats(&full),
    })
}

impl AdjacencyStats {
    pub fn tsv_row(&self) -> String {
        format!(
            "{}\t{}\t{:.6}\t{}\t{:.6}",
            self.level,
            self.level.k(),
            self.mean_dist,
            self.max_dist,
            self.severed_fraction
        )
    }
}

pub const ADJACENCY_HEADER: &str = "level\tk\tmean_dist\tmax_dist\tsevered_fraction";
