//! Region geometry: boxes, overlap, the distance kernel that weights
//! pairwise spatial edges, and cell-coverage fractions used when patches
//! are blended back into a memory grid.
//!
//! Everything here is plain `f64` math with no autodiff involvement; the
//! tensor ops that consume boxes treat them as constants.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("degenerate box ({x1}, {y1}, {x2}, {y2}): corners must satisfy x1 < x2 and y1 < y2")]
    DegenerateBox { x1: f64, y1: f64, x2: f64, y2: f64 },
    #[error("non-finite box coordinate ({x1}, {y1}, {x2}, {y2})")]
    NonFiniteBox { x1: f64, y1: f64, x2: f64, y2: f64 },
    #[error("kernel bandwidth must be positive, got {0}")]
    BadBandwidth(f64),
    #[error("distance kernel expects a non-negative distance, got {0}")]
    NegativeDistance(f64),
    #[error("grid dimensions must be nonzero, got {h}x{w}")]
    EmptyGrid { h: usize, w: usize },
    #[error("scene dimensions must be positive, got {h}x{w}")]
    BadScene { h: f64, w: f64 },
}

/// Axis-aligned box in continuous pixel coordinates, `(x1, y1)` top-left,
/// `(x2, y2)` bottom-right, y growing downward. Strictly positive area.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl PixelBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, GeometryError> {
        if !(x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite()) {
            return Err(GeometryError::NonFiniteBox { x1, y1, x2, y2 });
        }
        if x2 <= x1 || y2 <= y1 {
            return Err(GeometryError::DegenerateBox { x1, y1, x2, y2 });
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    /// Overlap area with another box; zero when disjoint.
    pub fn intersection_area(&self, other: &PixelBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    /// Clamp the box to `[0, w] x [0, h]`. Returns `None` when nothing
    /// with positive area remains inside.
    pub fn clipped_to(&self, w: f64, h: f64) -> Option<PixelBox> {
        let x1 = self.x1.max(0.0);
        let y1 = self.y1.max(0.0);
        let x2 = self.x2.min(w);
        let y2 = self.y2.min(h);
        if x2 <= x1 || y2 <= y1 {
            None
        } else {
            Some(PixelBox { x1, y1, x2, y2 })
        }
    }

    /// Rescale from one coordinate frame to another, e.g. scene pixels to
    /// memory-grid pixels.
    pub fn scaled(&self, sx: f64, sy: f64) -> PixelBox {
        PixelBox {
            x1: self.x1 * sx,
            y1: self.y1 * sy,
            x2: self.x2 * sx,
            y2: self.y2 * sy,
        }
    }
}

/// Intersection over union, in `[0, 1]`, 1 only for identical boxes.
pub fn iou(a: &PixelBox, b: &PixelBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    inter / union
}

/// Bandwidth for the exponential distance kernel.
#[derive(Debug, Clone, Copy)]
pub struct KernelConfig {
    pub bandwidth: f64,
}

impl KernelConfig {
    pub fn new(bandwidth: f64) -> Result<Self, GeometryError> {
        if !(bandwidth.is_finite() && bandwidth > 0.0) {
            return Err(GeometryError::BadBandwidth(bandwidth));
        }
        Ok(Self { bandwidth })
    }

    /// Default bandwidth: one twelfth of the scene width.
    pub fn for_scene_width(w: f64) -> Result<Self, GeometryError> {
        Self::new(w / 12.0)
    }
}

/// `exp(-x / bandwidth)`: 1 at distance zero, decaying toward 0.
pub fn distance_kernel(x: f64, cfg: &KernelConfig) -> Result<f64, GeometryError> {
    if x < 0.0 || !x.is_finite() {
        return Err(GeometryError::NegativeDistance(x));
    }
    Ok((-x / cfg.bandwidth).exp())
}

/// The five pairwise spatial relations tracked between regions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SpatialEdge {
    LeftOf,
    RightOf,
    Above,
    Below,
    Iou,
}

impl SpatialEdge {
    pub const ALL: [SpatialEdge; 5] = [
        SpatialEdge::LeftOf,
        SpatialEdge::RightOf,
        SpatialEdge::Above,
        SpatialEdge::Below,
        SpatialEdge::Iou,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            SpatialEdge::LeftOf => "left-of",
            SpatialEdge::RightOf => "right-of",
            SpatialEdge::Above => "above",
            SpatialEdge::Below => "below",
            SpatialEdge::Iou => "iou",
        }
    }

    fn index(&self) -> usize {
        match self {
            SpatialEdge::LeftOf => 0,
            SpatialEdge::RightOf => 1,
            SpatialEdge::Above => 2,
            SpatialEdge::Below => 3,
            SpatialEdge::Iou => 4,
        }
    }
}

/// One R x R matrix per spatial relation. `mat(RightOf)[i * n + j]` is
/// nonzero iff region j lies to the right of region i; directional weights
/// are `distance_kernel` of the center distance, the iou matrix holds raw
/// overlap values with a zero diagonal.
#[derive(Debug, Clone)]
pub struct SpatialAdjacency {
    pub n: usize,
    mats: [Vec<f64>; 5],
}

impl SpatialAdjacency {
    pub fn mat(&self, e: SpatialEdge) -> &[f64] {
        &self.mats[e.index()]
    }

    pub fn at(&self, e: SpatialEdge, i: usize, j: usize) -> f64 {
        self.mats[e.index()][i * self.n + j]
    }
}

/// Classify every unordered pair once and fill both ordered slots, so
/// `left-of[j][i] == right-of[i][j]` (and the above/below mirror) holds by
/// construction. Ties `|dx| == |dy|` go to the horizontal pair; coincident
/// centers count the higher-indexed region as right of the lower-indexed
/// one, with weight 1.
pub fn build_spatial_adjacency(
    boxes: &[PixelBox],
    cfg: &KernelConfig,
) -> Result<SpatialAdjacency, GeometryError> {
    let n = boxes.len();
    let mut mats: [Vec<f64>; 5] = std::array::from_fn(|_| vec![0.0; n * n]);
    for i in 0..n {
        for j in (i + 1)..n {
            let (cxi, cyi) = boxes[i].center();
            let (cxj, cyj) = boxes[j].center();
            let dx = cxj - cxi;
            let dy = cyj - cyi;
            let w = distance_kernel((dx * dx + dy * dy).sqrt(), cfg)?;
            // (forward, backward) as seen from region i.
            let (fwd, bwd) = if dx == 0.0 && dy == 0.0 {
                (SpatialEdge::RightOf, SpatialEdge::LeftOf)
            } else if dx.abs() >= dy.abs() {
                if dx > 0.0 {
                    (SpatialEdge::RightOf, SpatialEdge::LeftOf)
                } else {
                    (SpatialEdge::LeftOf, SpatialEdge::RightOf)
                }
            } else if dy > 0.0 {
                (SpatialEdge::Below, SpatialEdge::Above)
            } else {
                (SpatialEdge::Above, SpatialEdge::Below)
            };
            mats[fwd.index()][i * n + j] = w;
            mats[bwd.index()][j * n + i] = w;
            let ov = iou(&boxes[i], &boxes[j]);
            mats[SpatialEdge::Iou.index()][i * n + j] = ov;
            mats[SpatialEdge::Iou.index()][j * n + i] = ov;
        }
    }
    Ok(SpatialAdjacency { n, mats })
}

/// Fraction of each grid cell covered by each region. Cell `(gy, gx)` of an
/// `H x W` grid over an `h x w` scene spans the pixel rectangle
/// `[gx*w/W, (gx+1)*w/W] x [gy*h/H, (gy+1)*h/H]`.
#[derive(Debug, Clone)]
pub struct CoverageWeights {
    pub grid_h: usize,
    pub grid_w: usize,
    /// One dense `grid_h * grid_w` row per region, row-major over cells.
    pub weights: Vec<Vec<f64>>,
}

impl CoverageWeights {
    pub fn regions(&self) -> usize {
        self.weights.len()
    }
}

pub fn coverage_weights(
    boxes: &[PixelBox],
    grid: (usize, usize),
    scene: (f64, f64),
) -> Result<CoverageWeights, GeometryError> {
    let (gh, gw) = grid;
    let (sh, sw) = scene;
    if gh == 0 || gw == 0 {
        return Err(GeometryError::EmptyGrid { h: gh, w: gw });
    }
    if !(sh > 0.0 && sw > 0.0) {
        return Err(GeometryError::BadScene { h: sh, w: sw });
    }
    let cell_w = sw / gw as f64;
    let cell_h = sh / gh as f64;
    let cell_area = cell_w * cell_h;
    let mut weights = Vec::with_capacity(boxes.len());
    for b in boxes {
        let mut row = vec![0.0; gh * gw];
        // Only cells whose rectangle can intersect the box.
        let gx0 = ((b.x1 / cell_w).floor().max(0.0)) as usize;
        let gy0 = ((b.y1 / cell_h).floor().max(0.0)) as usize;
        let gx1 = ((b.x2 / cell_w).ceil() as isize).clamp(0, gw as isize) as usize;
        let gy1 = ((b.y2 / cell_h).ceil() as isize).clamp(0, gh as isize) as usize;
        for gy in gy0.min(gh)..gy1 {
            for gx in gx0.min(gw)..gx1 {
                let cell = PixelBox {
                    x1: gx as f64 * cell_w,
                    y1: gy as f64 * cell_h,
                    x2: (gx + 1) as f64 * cell_w,
                    y2: (gy + 1) as f64 * cell_h,
                };
                let inter = b.intersection_area(&cell);
                if inter > 0.0 {
                    row[gy * gw + gx] = inter / cell_area;
                }
            }
        }
        weights.push(row);
    }
    Ok(CoverageWeights {
        grid_h: gh,
        grid_w: gw,
        weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> PixelBox {
        PixelBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn degenerate_box_rejected() {
        assert!(PixelBox::new(3.0, 0.0, 3.0, 5.0).is_err());
        assert!(PixelBox::new(0.0, 5.0, 4.0, 2.0).is_err());
        assert!(PixelBox::new(0.0, f64::NAN, 4.0, 2.0).is_err());
    }

    #[test]
    fn iou_hand_case() {
        // Overlap 5x10 = 50, union 100 + 100 - 50 = 150.
        let a = bx(0.0, 0.0, 10.0, 10.0);
        let b = bx(5.0, 0.0, 15.0, 10.0);
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn iou_identity_and_disjoint() {
        let a = bx(1.0, 2.0, 4.0, 6.0);
        assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
        let far = bx(100.0, 100.0, 101.0, 101.0);
        assert_eq!(iou(&a, &far), 0.0);
    }

    #[test]
    fn kernel_values() {
        let cfg = KernelConfig::new(50.0).unwrap();
        assert_eq!(distance_kernel(0.0, &cfg).unwrap(), 1.0);
        let at_bw = distance_kernel(50.0, &cfg).unwrap();
        assert!((at_bw - (-1.0f64).exp()).abs() < 1e-15);
        assert!(distance_kernel(-1.0, &cfg).is_err());
        assert!(KernelConfig::new(0.0).is_err());
    }

    #[test]
    fn adjacency_horizontal_pair() {
        // Centers (10, 50) and (40, 50): the second box is right of the first
        // at distance 30.
        let cfg = KernelConfig::new(50.0).unwrap();
        let a = bx(5.0, 45.0, 15.0, 55.0);
        let b = bx(35.0, 45.0, 45.0, 55.0);
        let adj = build_spatial_adjacency(&[a, b], &cfg).unwrap();
        let w = distance_kernel(30.0, &cfg).unwrap();
        assert!((adj.at(SpatialEdge::RightOf, 0, 1) - w).abs() < 1e-15);
        assert!((adj.at(SpatialEdge::LeftOf, 1, 0) - w).abs() < 1e-15);
        assert_eq!(adj.at(SpatialEdge::LeftOf, 0, 1), 0.0);
        assert_eq!(adj.at(SpatialEdge::Above, 0, 1), 0.0);
        assert_eq!(adj.at(SpatialEdge::Below, 0, 1), 0.0);
    }

    #[test]
    fn adjacency_diagonal_tie_is_horizontal() {
        let cfg = KernelConfig::new(10.0).unwrap();
        // Center offset (10, 10): |dx| == |dy| goes to the horizontal pair.
        let a = bx(0.0, 0.0, 2.0, 2.0);
        let b = bx(10.0, 10.0, 12.0, 12.0);
        let adj = build_spatial_adjacency(&[a, b], &cfg).unwrap();
        assert!(adj.at(SpatialEdge::RightOf, 0, 1) > 0.0);
        assert_eq!(adj.at(SpatialEdge::Below, 0, 1), 0.0);
    }

    #[test]
    fn adjacency_coincident_centers() {
        let cfg = KernelConfig::new(10.0).unwrap();
        let a = bx(0.0, 0.0, 4.0, 4.0);
        let b = bx(1.0, 1.0, 3.0, 3.0); // same center (2, 2)
        let adj = build_spatial_adjacency(&[a, b], &cfg).unwrap();
        assert_eq!(adj.at(SpatialEdge::RightOf, 0, 1), 1.0);
        assert_eq!(adj.at(SpatialEdge::LeftOf, 1, 0), 1.0);
    }

    #[test]
    fn adjacency_iou_symmetric_zero_diag() {
        let cfg = KernelConfig::new(10.0).unwrap();
        let a = bx(0.0, 0.0, 10.0, 10.0);
        let b = bx(5.0, 0.0, 15.0, 10.0);
        let adj = build_spatial_adjacency(&[a, b], &cfg).unwrap();
        assert!((adj.at(SpatialEdge::Iou, 0, 1) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(adj.at(SpatialEdge::Iou, 0, 1), adj.at(SpatialEdge::Iou, 1, 0));
        assert_eq!(adj.at(SpatialEdge::Iou, 0, 0), 0.0);
    }

    #[test]
    fn coverage_half_cell() {
        // 2x2 grid over a 20x20 scene; a box covering the left half of cell
        // (0, 0) has coverage 0.5 there and 0 elsewhere.
        let b = bx(0.0, 0.0, 5.0, 10.0);
        let cov = coverage_weights(&[b], (2, 2), (20.0, 20.0)).unwrap();
        let row = &cov.weights[0];
        assert!((row[0] - 0.5).abs() < 1e-12);
        assert_eq!(row[1], 0.0);
        assert_eq!(row[2], 0.0);
        assert_eq!(row[3], 0.0);
    }

    #[test]
    fn coverage_total_equals_area_ratio() {
        let b = bx(3.0, 4.5, 17.25, 12.0);
        let cov = coverage_weights(&[b], (8, 8), (20.0, 20.0)).unwrap();
        let total: f64 = cov.weights[0].iter().sum();
        let cell_area = (20.0 / 8.0) * (20.0 / 8.0);
        assert!((total - b.area() / cell_area).abs() < 1e-9);
    }

    #[test]
    fn clipping_and_scaling() {
        let b = bx(-5.0, 2.0, 30.0, 8.0);
        let c = b.clipped_to(20.0, 20.0).unwrap();
        assert_eq!(c, bx(0.0, 2.0, 20.0, 8.0));
        assert!(bx(25.0, 25.0, 30.0, 30.0).clipped_to(20.0, 20.0).is_none());
        let s = bx(2.0, 4.0, 6.0, 8.0).scaled(0.5, 0.25);
        assert_eq!(s, bx(1.0, 1.0, 3.0, 2.0));
    }
}
