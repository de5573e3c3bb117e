//! Completion metrics: binary occupancy IoU, per-class IoU / mIoU, and the
//! same numbers split by visibility class.
//!
//! Everything derives from integer confusion counts, so strata add up
//! exactly and multi-scene aggregation is a plain sum.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{contract, Result};
use crate::grid::{VoxelGrid, EMPTY, IGNORE};
use crate::visibility::{VisClass, VisibilityMask};

/// `(K+1) x (K+1)` confusion counts, rows = ground truth, columns = prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Confusion {
    pub num_classes: usize,
    pub counts: Vec<u64>,
}

impl Confusion {
    pub fn new(num_classes: usize) -> Self {
        let k = num_classes + 1;
        Self { num_classes, counts: vec![0; k * k] }
    }

    #[inline]
    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * (self.num_classes + 1) + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn add(&mut self, other: &Confusion) -> Result<()> {
        if other.num_classes != self.num_classes {
            return contract("cannot add confusions over different class counts");
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// Occupied (any non-empty class) vs empty IoU; 1.0 on an empty union.
    pub fn iou(&self) -> f64 {
        let k = self.num_classes + 1;
        let (mut inter, mut union) = (0u64, 0u64);
        for g in 0..k {
            for p in 0..k {
                let c = self.get(g, p);
                if g != 0 && p != 0 {
                    inter += c;
                }
                if g != 0 || p != 0 {
                    union += c;
                }
            }
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// IoU of every semantic class present in ground truth or prediction.
    pub fn per_class(&self) -> BTreeMap<u8, f64> {
        let k = self.num_classes + 1;
        let mut out = BTreeMap::new();
        for c in 1..k {
            let tp = self.get(c, c);
            let gt: u64 = (0..k).map(|p| self.get(c, p)).sum();
            let pred: u64 = (0..k).map(|g| self.get(g, c)).sum();
            let union = gt + pred - tp;
            if union > 0 {
                out.insert(c as u8, tp as f64 / union as f64);
            }
        }
        out
    }

    /// Mean of [`Confusion::per_class`]; 1.0 when no class is present.
    pub fn miou(&self) -> f64 {
        let pc = self.per_class();
        if pc.is_empty() {
            1.0
        } else {
            pc.values().sum::<f64>() / pc.len() as f64
        }
    }
}

fn check_pair(pred: &VoxelGrid, gt: &VoxelGrid, num_classes: usize) -> Result<()> {
    if pred.meta != gt.meta {
        return contract("prediction and ground truth grids differ in geometry");
    }
    if let Some(l) = pred.labels.iter().find(|&&l| l as usize > num_classes) {
        return contract(format!("prediction holds label {l} outside 0..={num_classes}"));
    }
    if let Some(l) = gt.labels.iter().find(|&&l| l != IGNORE && l as usize > num_classes) {
        return contract(format!("ground truth holds label {l} outside 0..={num_classes}"));
    }
    Ok(())
}

/// Confusion over voxels accepted by `keep`, skipping ignored ground truth.
pub fn confusion(pred: &VoxelGrid, gt: &VoxelGrid, num_classes: usize, keep: impl Fn(usize) -> bool) -> Result<Confusion> {
    check_pair(pred, gt, num_classes)?;
    let mut cm = Confusion::new(num_classes);
    let k = num_classes + 1;
    for (i, (&p, &g)) in pred.labels.iter().zip(&gt.labels).enumerate() {
        if g != IGNORE && keep(i) {
            cm.counts[g as usize * k + p as usize] += 1;
        }
    }
    Ok(cm)
}

/// Binary completion IoU over valid voxels (occupied = label != empty).
pub fn compute_iou(pred: &VoxelGrid, gt: &VoxelGrid) -> Result<f64> {
    if pred.meta != gt.meta {
        return contract("prediction and ground truth grids differ in geometry");
    }
    let (mut inter, mut union) = (0u64, 0u64);
    for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
        if g == IGNORE {
            continue;
        }
        let (po, go) = (p != EMPTY, g != EMPTY);
        inter += (po && go) as u64;
        union += (po || go) as u64;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Mean IoU over the semantic classes present in ground truth or prediction.
pub fn compute_miou(pred: &VoxelGrid, gt: &VoxelGrid, num_classes: usize) -> Result<(f64, BTreeMap<u8, f64>)> {
    let cm = confusion(pred, gt, num_classes, |_| true)?;
    Ok((cm.miou(), cm.per_class()))
}

/// IoU and mIoU of one visibility stratum.
#[derive(Debug, Clone, PartialEq)]
pub struct StratumScore {
    pub class: VisClass,
    pub iou: f64,
    pub miou: f64,
    pub counts: Confusion,
}

/// Full report for one scene or an aggregate of scenes.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub iou: f64,
    pub miou: f64,
    pub per_class: BTreeMap<u8, f64>,
    /// Present when a visibility mask was supplied.
    pub per_visibility: Vec<StratumScore>,
    pub counts: Confusion,
}

impl EvalReport {
    fn from_parts(counts: Confusion, strata: Vec<(VisClass, Confusion)>) -> Self {
        Self {
            iou: counts.iou(),
            miou: counts.miou(),
            per_class: counts.per_class(),
            per_visibility: strata
                .into_iter()
                .map(|(class, c)| StratumScore { class, iou: c.iou(), miou: c.miou(), counts: c })
                .collect(),
            counts,
        }
    }

    pub fn stratum(&self, class: VisClass) -> Option<&StratumScore> {
        self.per_visibility.iter().find(|s| s.class == class)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "voxels evaluated: {}", self.counts.total());
        let _ = writeln!(s, "IoU   {:.4}", self.iou);
        let _ = writeln!(s, "mIoU  {:.4}", self.miou);
        for (c, v) in &self.per_class {
            let _ = writeln!(s, "  class {c:>3}  IoU {v:.4}");
        }
        for st in &self.per_visibility {
            let _ = writeln!(
                s,
                "  {:<11} voxels {:>8}  IoU {:.4}  mIoU {:.4}",
                st.class.name(),
                st.counts.total(),
                st.iou,
                st.miou
            );
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("scope,voxels,iou,miou\n");
        let _ = writeln!(s, "all,{},{:.6},{:.6}", self.counts.total(), self.iou, self.miou);
        for st in &self.per_visibility {
            let _ = writeln!(s, "{},{},{:.6},{:.6}", st.class.name(), st.counts.total(), st.iou, st.miou);
        }
        for (c, v) in &self.per_class {
            let _ = writeln!(s, "class_{c},,{v:.6},");
        }
        s
    }
}

/// Accumulates confusions over scenes; the report is computed from the sums.
#[derive(Debug, Clone)]
pub struct Evaluator {
    num_classes: usize,
    all: Confusion,
    strata: [Confusion; 3],
    with_mask: bool,
}

impl Evaluator {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            all: Confusion::new(num_classes),
            strata: std::array::from_fn(|_| Confusion::new(num_classes)),
            with_mask: false,
        }
    }

    pub fn add(&mut self, pred: &VoxelGrid, gt: &VoxelGrid, mask: Option<&VisibilityMask>) -> Result<()> {
        let cm = confusion(pred, gt, self.num_classes, |_| true)?;
        if let Some(mask) = mask {
            if mask.meta != gt.meta {
                return contract("visibility mask and grid differ in geometry");
            }
            self.with_mask = true;
            for class in VisClass::ALL {
                let c = confusion(pred, gt, self.num_classes, |i| mask.classes[i] == class)?;
                self.strata[class as usize].add(&c)?;
            }
        }
        self.all.add(&cm)
    }

    pub fn report(&self) -> EvalReport {
        let strata = if self.with_mask {
            VisClass::ALL.iter().map(|&c| (c, self.strata[c as usize].clone())).collect()
        } else {
            Vec::new()
        };
        EvalReport::from_parts(self.all.clone(), strata)
    }
}

/// Single-scene report.
pub fn evaluate(pred: &VoxelGrid, gt: &VoxelGrid, mask: Option<&VisibilityMask>, num_classes: usize) -> Result<EvalReport> {
    let mut ev = Evaluator::new(num_classes);
    ev.add(pred, gt, mask)?;
    Ok(ev.report())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridMeta;

    fn grid(labels: Vec<u8>) -> VoxelGrid {
        let meta = GridMeta::new([0.0; 3], 1.0, [2, 2, 2]).unwrap();
        VoxelGrid::new(meta, labels).unwrap()
    }

    #[test]
    fn iou_fixture_two_of_six() {
        let pred = grid(vec![1, 1, 1, 1, 0, 0, 0, 0]);
        let gt = grid(vec![0, 0, 2, 2, 2, 2, 0, 0]);
        assert_eq!(compute_iou(&pred, &gt).unwrap(), 2.0 / 6.0);
        assert_eq!(compute_iou(&gt, &pred).unwrap(), 2.0 / 6.0);
    }

    #[test]
    fn iou_edge_cases() {
        let gt = grid(vec![0, 3, 3, 0, 1, 0, 0, 0]);
        assert_eq!(compute_iou(&gt, &gt).unwrap(), 1.0);
        assert_eq!(compute_iou(&grid(vec![0; 8]), &gt).unwrap(), 0.0);
        assert_eq!(compute_iou(&grid(vec![0; 8]), &grid(vec![0; 8])).unwrap(), 1.0);
        // ignored voxels do not count
        let gt_ign = grid(vec![255, 3, 3, 0, 1, 0, 0, 0]);
        let pred = grid(vec![1, 3, 3, 0, 1, 0, 0, 0]);
        assert_eq!(compute_iou(&pred, &gt_ign).unwrap(), 1.0);
        let other = VoxelGrid::empty(GridMeta::new([0.0; 3], 1.0, [2, 2, 1]).unwrap());
        assert!(compute_iou(&other, &gt).is_err());
    }

    #[test]
    fn miou_cases() {
        let gt = grid(vec![1, 1, 2, 2, 3, 3, 0, 0]);
        assert_eq!(compute_miou(&gt, &gt, 3).unwrap().0, 1.0);
        // class 1 fully right, class 2 fully wrong (predicted as empty)
        let gt = grid(vec![1, 1, 2, 2, 0, 0, 0, 0]);
        let pred = grid(vec![1, 1, 0, 0, 0, 0, 0, 0]);
        let (m, pc) = compute_miou(&pred, &gt, 3).unwrap();
        assert_eq!(m, 0.5);
        assert_eq!(pc.len(), 2);
        // partial overlaps: class 1 tp 1 / union 3, class 2 tp 1 / union 2
        let gt = grid(vec![1, 1, 2, 2, 0, 0, 0, 0]);
        let pred = grid(vec![1, 2, 2, 0, 1, 0, 0, 0]);
        let (m, pc) = compute_miou(&pred, &gt, 2).unwrap();
        assert_eq!(pc[&1], 1.0 / 3.0);
        assert_eq!(pc[&2], 1.0 / 3.0);
        assert!((m - 1.0 / 3.0).abs() < 1e-15);
        assert!(compute_miou(&grid(vec![9; 8]), &gt, 3).is_err());
    }

    #[test]
    fn strata_partition_counts() {
        let meta = GridMeta::new([0.0; 3], 1.0, [2, 2, 2]).unwrap();
        let gt = grid(vec![1, 1, 2, 2, 0, 0, 3, 0]);
        let pred = grid(vec![1, 0, 2, 1, 0, 3, 3, 0]);
        use VisClass::*;
        let mask = VisibilityMask::new(meta, vec![Visible, Visible, Occluded, OutOfView, Visible, Occluded, OutOfView, Visible]).unwrap();
        let r = evaluate(&pred, &gt, Some(&mask), 3).unwrap();
        let mut sum = Confusion::new(3);
        for s in &r.per_visibility {
            sum.add(&s.counts).unwrap();
        }
        assert_eq!(sum, r.counts);
        assert_eq!(r.counts.total(), 8);
        assert!(r.to_text().contains("mIoU"));
        assert!(r.to_csv().starts_with("scope,"));
    }
}
