//! Training objectives. Every loss returns its value together with the
//! gradient with respect to its direct input (logits or probabilities).

use crate::error::{contract, Result};
use crate::grid::{DepthMap, IGNORE};
use crate::lifting::DepthProbVolume;
use crate::tensor::Tensor;

/// Floor applied inside logarithms.
const LOG_FLOOR: f64 = 1e-7;

/// Inverse-frequency class weights, normalized so that a uniform class
/// distribution gives weight 1, clipped to `[0.1, 10]`.
pub fn class_weights_from_counts(counts: &[usize]) -> Vec<f32> {
    let total: usize = counts.iter().sum();
    let k = counts.len() as f64;
    counts
        .iter()
        .map(|&c| {
            if c == 0 {
                10.0
            } else {
                (total as f64 / (k * c as f64)).clamp(0.1, 10.0) as f32
            }
        })
        .collect()
}

fn check_logits(logits: &Tensor, labels: &[u8]) -> Result<(usize, usize)> {
    if logits.rank() != 2 {
        return contract(format!("expected [classes, voxels] logits, got {:?}", logits.shape));
    }
    let (k, n) = (logits.shape[0], logits.shape[1]);
    if labels.len() != n {
        return contract(format!("{} labels for {n} logit columns", labels.len()));
    }
    Ok((k, n))
}

/// Frequency-weighted cross-entropy, averaged over non-ignored voxels.
/// Returns the loss and its gradient with respect to `logits` (`[K, N]`).
pub fn weighted_ce_loss(logits: &Tensor, labels: &[u8], class_weights: &[f32]) -> Result<(f64, Tensor)> {
    let (k, n) = check_logits(logits, labels)?;
    if class_weights.len() != k {
        return contract(format!("{} class weights for {k} classes", class_weights.len()));
    }
    if class_weights.iter().any(|&w| !(w > 0.0)) {
        return contract("class weights must be positive");
    }
    let valid = labels.iter().filter(|&&l| l != IGNORE).count();
    if valid == 0 {
        return contract("every voxel is ignored");
    }
    if let Some(&bad) = labels.iter().find(|&&l| l != IGNORE && l as usize >= k) {
        return contract(format!("label {bad} outside {k} classes"));
    }
    let mut grad = Tensor::zeros(&logits.shape);
    let mut total = 0.0f64;
    let inv = 1.0 / valid as f64;
    for i in 0..n {
        let l = labels[i];
        if l == IGNORE {
            continue;
        }
        let m = (0..k).map(|c| logits.data[c * n + i]).fold(f32::NEG_INFINITY, f32::max) as f64;
        let z: f64 = (0..k).map(|c| (logits.data[c * n + i] as f64 - m).exp()).sum();
        let log_z = m + z.ln();
        let w = class_weights[l as usize] as f64;
        total += w * (log_z - logits.data[l as usize * n + i] as f64);
        for c in 0..k {
            let p = (logits.data[c * n + i] as f64 - log_z).exp();
            let onehot = if c == l as usize { 1.0 } else { 0.0 };
            grad.data[c * n + i] = (w * (p - onehot) * inv) as f32;
        }
    }
    Ok((total * inv, grad))
}

/// Which partition the scene-class affinity loss scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AffinityMode {
    /// Occupied vs. empty, with occupancy probability `1 - p(empty)`.
    Geometry,
    /// Every class present in the ground truth.
    Semantics,
}

/// Soft precision / recall / specificity of one binary split, with the
/// gradient of `-(ln P + ln R + ln S)` with respect to the soft prediction.
/// Terms whose denominator vanishes are dropped.
fn prs_terms(q: &[f64], y: &[bool]) -> (f64, Vec<f64>) {
    let sum_q: f64 = q.iter().sum();
    let sum_y = y.iter().filter(|&&b| b).count() as f64;
    let sum_not_y = y.len() as f64 - sum_y;
    let inter: f64 = q.iter().zip(y).filter(|(_, &b)| b).map(|(v, _)| v).sum();
    let spec_num: f64 = q.iter().zip(y).filter(|(_, &b)| !b).map(|(v, _)| 1.0 - v).sum();

    let mut loss = 0.0;
    let mut grad = vec![0.0; q.len()];
    if sum_q > 0.0 {
        let p = inter / sum_q;
        let pc = p.max(LOG_FLOOR);
        loss -= pc.ln();
        for i in 0..q.len() {
            let dp = ((if y[i] { 1.0 } else { 0.0 }) * sum_q - inter) / (sum_q * sum_q);
            grad[i] -= dp / pc;
        }
    }
    if sum_y > 0.0 {
        let r = inter / sum_y;
        let rc = r.max(LOG_FLOOR);
        loss -= rc.ln();
        for i in 0..q.len() {
            if y[i] {
                grad[i] -= 1.0 / (sum_y * rc);
            }
        }
    }
    if sum_not_y > 0.0 {
        let s = spec_num / sum_not_y;
        let sc = s.max(LOG_FLOOR);
        loss -= sc.ln();
        for i in 0..q.len() {
            if !y[i] {
                grad[i] += 1.0 / (sum_not_y * sc);
            }
        }
    }
    (loss, grad)
}

/// Scene-class affinity loss over per-voxel class probabilities `[K, N]`.
/// Returns the loss and its gradient with respect to `probs`.
pub fn affinity_loss(probs: &Tensor, labels: &[u8], mode: AffinityMode) -> Result<(f64, Tensor)> {
    let (k, n) = check_logits(probs, labels)?;
    let valid: Vec<usize> = (0..n).filter(|&i| labels[i] != IGNORE).collect();
    let mut grad = Tensor::zeros(&probs.shape);
    if valid.is_empty() {
        return Ok((0.0, grad));
    }
    match mode {
        AffinityMode::Geometry => {
            let q: Vec<f64> = valid.iter().map(|&i| 1.0 - probs.data[i] as f64).collect();
            let y: Vec<bool> = valid.iter().map(|&i| labels[i] != 0).collect();
            let (loss, g) = prs_terms(&q, &y);
            for (j, &i) in valid.iter().enumerate() {
                grad.data[i] = -g[j] as f32;
            }
            Ok((loss, grad))
        }
        AffinityMode::Semantics => {
            let mut total = 0.0;
            let mut present = 0usize;
            let mut grads: Vec<(usize, Vec<f64>)> = Vec::new();
            for c in 0..k {
                let y: Vec<bool> = valid.iter().map(|&i| labels[i] as usize == c).collect();
                if !y.iter().any(|&b| b) {
                    continue;
                }
                present += 1;
                let q: Vec<f64> = valid.iter().map(|&i| probs.data[c * n + i] as f64).collect();
                let (loss, g) = prs_terms(&q, &y);
                total += loss;
                grads.push((c, g));
            }
            if present == 0 {
                return Ok((0.0, grad));
            }
            let inv = 1.0 / present as f64;
            for (c, g) in grads {
                for (j, &i) in valid.iter().enumerate() {
                    grad.data[c * n + i] = (g[j] * inv) as f32;
                }
            }
            Ok((total * inv, grad))
        }
    }
}

/// Depth-bin index of every depth-probability pixel: the full-resolution
/// depth is sampled at the center of the pixel's footprint and clamped into
/// the bin range. `None` for pixels without a return.
pub fn depth_bin_targets(dp: &DepthProbVolume, depth: &DepthMap) -> Result<Vec<Option<usize>>> {
    if depth.width % dp.width != 0 || depth.height % dp.height != 0 || depth.width / dp.width != depth.height / dp.height {
        return contract(format!(
            "depth map {}x{} is not an integer upsampling of {}x{}",
            depth.width, depth.height, dp.width, dp.height
        ));
    }
    let s = depth.width / dp.width;
    let mut out = Vec::with_capacity(dp.width * dp.height);
    for v in 0..dp.height {
        for u in 0..dp.width {
            let d = depth.at(u * s + s / 2, v * s + s / 2);
            out.push(d.is_finite().then(|| dp.bin_of(d as f64)));
        }
    }
    Ok(out)
}

/// Cross-entropy between the one-hot bin of the true depth and the
/// predicted per-pixel distribution, averaged over pixels with a return.
/// Returns the loss and its gradient with respect to `dp.probs`.
pub fn depth_loss(dp: &DepthProbVolume, depth: &DepthMap) -> Result<(f64, Tensor)> {
    let targets = depth_bin_targets(dp, depth)?;
    let count = targets.iter().filter(|t| t.is_some()).count();
    if count == 0 {
        return contract("no pixel has a finite depth");
    }
    let nb = dp.nbins;
    let mut grad = Tensor::zeros(&dp.probs.shape);
    let mut total = 0.0;
    for (pix, t) in targets.iter().enumerate() {
        if let Some(b) = *t {
            let p = (dp.probs.data[pix * nb + b] as f64).max(LOG_FLOOR);
            total -= p.ln();
            grad.data[pix * nb + b] = (-1.0 / (p * count as f64)) as f32;
        }
    }
    Ok((total / count as f64, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ce_perfect_and_uniform() {
        let mut logits = Tensor::zeros(&[7, 3]);
        let (l, _) = weighted_ce_loss(&logits, &[0, 3, 6], &[1.0; 7]).unwrap();
        assert!((l - 7f64.ln()).abs() < 1e-6);
        for (i, &c) in [0usize, 3, 6].iter().enumerate() {
            logits.data[c * 3 + i] = 60.0;
        }
        let (l, _) = weighted_ce_loss(&logits, &[0, 3, 6], &[1.0; 7]).unwrap();
        assert!(l < 1e-12);
    }

    #[test]
    fn ce_three_voxel_hand_computation() {
        // 3 classes, weights [1, 2, 4]; columns are voxels.
        let logits = Tensor::from_vec(&[3, 3], vec![1.0, 0.0, 0.5, 2.0, 0.0, -1.0, 0.5, 1.0, 2.0]).unwrap();
        let labels = [0u8, 1, 2];
        let (l, _) = weighted_ce_loss(&logits, &labels, &[1.0, 2.0, 4.0]).unwrap();
        let nll = |col: [f64; 3], y: usize| -> f64 {
            let z: f64 = col.iter().map(|v| v.exp()).sum();
            z.ln() - col[y]
        };
        let want = (1.0 * nll([1.0, 2.0, 0.5], 0) + 2.0 * nll([0.0, 0.0, 1.0], 1) + 4.0 * nll([0.5, -1.0, 2.0], 2)) / 3.0;
        assert!((l - want).abs() < 1e-6, "{l} vs {want}");
    }

    #[test]
    fn ce_ignores_and_rejects() {
        let logits = Tensor::zeros(&[3, 2]);
        let (l, g) = weighted_ce_loss(&logits, &[IGNORE, 1], &[1.0; 3]).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-6);
        assert!((0..3).all(|c| g.data[c * 2] == 0.0));
        assert!(weighted_ce_loss(&logits, &[IGNORE, IGNORE], &[1.0; 3]).is_err());
        assert!(weighted_ce_loss(&logits, &[0, 1], &[1.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn class_weights_clip() {
        let w = class_weights_from_counts(&[900, 90, 10, 0]);
        assert!((w[0] - 0.2777778).abs() < 1e-5);
        assert_eq!(w[2], 10.0);
        assert_eq!(w[3], 10.0);
        assert_eq!(class_weights_from_counts(&[5, 5]), vec![1.0, 1.0]);
    }

    #[test]
    fn affinity_perfect_is_zero() {
        let labels = [0u8, 1, 2, 1];
        let mut probs = Tensor::zeros(&[3, 4]);
        for (i, &l) in labels.iter().enumerate() {
            probs.data[l as usize * 4 + i] = 1.0;
        }
        for mode in [AffinityMode::Geometry, AffinityMode::Semantics] {
            let (l, _) = affinity_loss(&probs, &labels, mode).unwrap();
            assert!(l.abs() < 1e-12);
        }
    }

    #[test]
    fn affinity_all_empty_geometry() {
        let mut probs = Tensor::zeros(&[2, 5]);
        probs.data[..5].fill(1.0);
        let (l, _) = affinity_loss(&probs, &[0; 5], AffinityMode::Geometry).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn affinity_eight_voxel_fixture() {
        // two classes (0 = empty, 1 = occupied); gt occupied at voxels 0..3
        let p1 = [0.9, 0.8, 0.3, 0.1, 0.2, 0.6, 0.05, 0.0];
        let labels = [1u8, 1, 1, 0, 0, 0, 0, 0];
        let mut probs = Tensor::zeros(&[2, 8]);
        for i in 0..8 {
            probs.data[i] = (1.0 - p1[i]) as f32;
            probs.data[8 + i] = p1[i] as f32;
        }
        // hand computation: intersection 2.0, sum of predictions 2.95,
        // 3 positives, 5 negatives with (1-p) summing to 0.9+0.8+0.4+0.95+1.0 = 4.05
        let (p, r, s) = (2.0 / 2.95, 2.0 / 3.0, 4.05 / 5.0);
        let geo = -(f64::ln(p) + f64::ln(r) + f64::ln(s));
        let (l, _) = affinity_loss(&probs, &labels, AffinityMode::Geometry).unwrap();
        assert!((l - geo).abs() < 1e-6, "{l} vs {geo}");
        // class 0: intersection of (1-p1) with negatives = 4.05, sum = 8 - 2.95 = 5.05,
        // positives 5; specificity over the three class-1 voxels = (0.9+0.8+0.3)/3
        let (p0, r0, s0) = (4.05 / 5.05, 4.05 / 5.0, 2.0 / 3.0);
        let sem = (-(f64::ln(p0) + f64::ln(r0) + f64::ln(s0)) + geo) / 2.0;
        let (l, _) = affinity_loss(&probs, &labels, AffinityMode::Semantics).unwrap();
        assert!((l - sem).abs() < 1e-6, "{l} vs {sem}");
    }

    fn dp_fixture(probs: Vec<f32>) -> DepthProbVolume {
        DepthProbVolume::new(2, 2, vec![1.0, 2.0, 3.0, 4.0], Tensor::from_vec(&[2, 2, 3], probs).unwrap()).unwrap()
    }

    #[test]
    fn depth_loss_cases() {
        let depth = DepthMap::new(2, 2, vec![1.5, 2.5, 3.5, f32::INFINITY]).unwrap();
        let onehot = dp_fixture(vec![1., 0., 0., 0., 1., 0., 0., 0., 1., 0.2, 0.3, 0.5]);
        assert!(depth_loss(&onehot, &depth).unwrap().0.abs() < 1e-12);
        let uniform = dp_fixture(vec![1.0 / 3.0; 12]);
        assert!((depth_loss(&uniform, &depth).unwrap().0 - 3f64.ln()).abs() < 1e-6);
        // mixed: targets bins 0, 1, 2 with probabilities 0.5, 0.25, 0.7
        let mixed = dp_fixture(vec![0.5, 0.25, 0.25, 0.5, 0.25, 0.25, 0.1, 0.2, 0.7, 1., 0., 0.]);
        let want = -(0.5f64.ln() + 0.25f64.ln() + 0.7f64.ln()) / 3.0;
        assert!((depth_loss(&mixed, &depth).unwrap().0 - want).abs() < 1e-6);
        let sky = DepthMap::filled(2, 2, f32::INFINITY);
        assert!(depth_loss(&uniform, &sky).is_err());
    }
}
