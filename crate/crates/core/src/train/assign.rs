use crate::metrics::Annotation;

/// Positive-cell target; distances are in stride units from the cell center.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellTarget {
    pub class_id: usize,
    /// (left, top, right, bottom), clamped to `[0.01, reg_max − 1.01]`.
    pub dist: [f64; 4],
    /// Index of the ground truth in the input list.
    pub gt: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScaleTargets {
    pub stride: usize,
    pub h: usize,
    pub w: usize,
    /// Row-major cells.
    pub cells: Vec<Option<CellTarget>>,
}

impl ScaleTargets {
    pub fn empty(stride: usize, h: usize, w: usize) -> Self {
        ScaleTargets { stride, h, w, cells: vec![None; h * w] }
    }

    pub fn get(&self, row: usize, col: usize) -> Option<&CellTarget> {
        self.cells[row * self.w + col].as_ref()
    }
}

/// Targets of one image over the three scales.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetAssignment {
    pub scales: Vec<ScaleTargets>,
}

impl TargetAssignment {
    pub fn num_positive(&self) -> usize {
        self.scales.iter().map(|s| s.cells.iter().flatten().count()).sum()
    }

    /// `(scale, row, col, target)` for every positive cell.
    pub fn positives(&self) -> impl Iterator<Item = (usize, usize, usize, &CellTarget)> {
        self.scales.iter().enumerate().flat_map(|(si, s)| {
            s.cells.iter().enumerate().filter_map(move |(i, c)| c.as_ref().map(|t| (si, i / s.w, i % s.w, t)))
        })
    }
}

/// Scale index for a box: stride 8 below 64 px, 16 below 128 px, else 32.
pub fn scale_for(max_side: f64) -> usize {
    if max_side < 64.0 {
        0
    } else if max_side < 128.0 {
        1
    } else {
        2
    }
}

/// Center-cell assignment. `gts` are in input-tensor pixels for an input of
/// `h×w`; on a shared cell the larger box wins (earlier on equal area).
pub fn assign_targets(gts: &[Annotation], h: usize, w: usize, strides: [usize; 3], reg_max: usize) -> TargetAssignment {
    let mut scales: Vec<ScaleTargets> = strides.iter().map(|&s| ScaleTargets::empty(s, h / s, w / s)).collect();
    let mut areas: Vec<Vec<f64>> = scales.iter().map(|s| vec![f64::NEG_INFINITY; s.cells.len()]).collect();
    let hi = reg_max as f64 - 1.01;
    for (gi, g) in gts.iter().enumerate() {
        let b = g.bbox;
        let si = scale_for(b.width().max(b.height()));
        let sc = &mut scales[si];
        if sc.h == 0 || sc.w == 0 {
            continue;
        }
        let s = sc.stride as f64;
        let (cx, cy) = b.center();
        let col = ((cx / s).floor().max(0.0) as usize).min(sc.w - 1);
        let row = ((cy / s).floor().max(0.0) as usize).min(sc.h - 1);
        let (ax, ay) = ((col as f64 + 0.5) * s, (row as f64 + 0.5) * s);
        let dist = [(ax - b.x1) / s, (ay - b.y1) / s, (b.x2 - ax) / s, (b.y2 - ay) / s].map(|d| d.clamp(0.01, hi));
        let idx = row * sc.w + col;
        let area = b.area();
        if area > areas[si][idx] {
            areas[si][idx] = area;
            sc.cells[idx] = Some(CellTarget { class_id: g.class_id, dist, gt: gi });
        }
    }
    TargetAssignment { scales }
}
