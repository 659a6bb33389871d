//! Independent reference implementations shared by the integration tests
//! and the acceptance suite.

#![allow(dead_code)]

use detnum::geometry::BBox;
use detnum::metrics::{Detection, GroundTruth};
use rand::Rng;

/// IoU from per-axis overlap `min((la + lb) / 2 - |ca - cb|, la, lb)`.
pub fn naive_iou(a: BBox<f64>, b: BBox<f64>) -> f64 {
    let axis = |ca: f64, la: f64, cb: f64, lb: f64| {
        let reach = (la + lb) / 2.0 - (ca - cb).abs();
        let mut len = reach;
        if la < len {
            len = la;
        }
        if lb < len {
            len = lb;
        }
        if len < 0.0 {
            0.0
        } else {
            len
        }
    };
    let inter = axis(a.cx, a.w, b.cx, b.w) * axis(a.cy, a.h, b.cy, b.h);
    let union = a.w * a.h + b.w * b.h - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Per-category AP by brute force: match one category at a time, then take
/// the precision envelope with a quadratic scan.
pub fn naive_category_ap(dets: &[Detection<f64>], gts: &[GroundTruth<f64>], category: u32, thr: f64) -> f64 {
    let cat_gts: Vec<&GroundTruth<f64>> = gts.iter().filter(|g| g.category_id == category).collect();
    let n_gt = cat_gts.len();
    if n_gt == 0 {
        return 0.0;
    }
    let mut cat_dets: Vec<&Detection<f64>> = dets.iter().filter(|d| d.category_id == category).collect();
    // insertion sort, descending confidence, stable
    for i in 1..cat_dets.len() {
        let mut j = i;
        while j > 0 && cat_dets[j - 1].confidence < cat_dets[j].confidence {
            cat_dets.swap(j - 1, j);
            j -= 1;
        }
    }
    let mut used = vec![false; n_gt];
    let mut flags = Vec::new();
    for d in &cat_dets {
        let mut best = -1.0;
        let mut best_g = None;
        for (g, gt) in cat_gts.iter().enumerate() {
            if used[g] || gt.image_id != d.image_id {
                continue;
            }
            let v = naive_iou(d.bbox, gt.bbox);
            if v > best {
                best = v;
                best_g = Some(g);
            }
        }
        match best_g {
            Some(g) if best >= thr => {
                used[g] = true;
                flags.push(true);
            }
            _ => flags.push(false),
        }
    }
    let mut precision = Vec::new();
    let mut tp_at = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for &f in &flags {
        if f {
            tp += 1;
        } else {
            fp += 1;
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        tp_at.push(f);
    }
    let mut area = 0.0;
    for i in 0..flags.len() {
        if tp_at[i] {
            let mut env = 0.0f64;
            for &p in &precision[i..] {
                env = env.max(p);
            }
            area += env;
        }
    }
    area / n_gt as f64
}

/// `(map50, map5095)` with categories and thresholds visited in ascending order.
pub fn naive_maps(dets: &[Detection<f64>], gts: &[GroundTruth<f64>]) -> (f64, f64, Vec<f64>) {
    let mut cats: Vec<u32> = gts.iter().map(|g| g.category_id).collect();
    cats.sort();
    cats.dedup();
    let mut maps = Vec::new();
    for pct in (50..=95).step_by(5) {
        let thr = pct as f64 / 100.0;
        let mut sum = 0.0;
        for &c in &cats {
            sum += naive_category_ap(dets, gts, c, thr);
        }
        maps.push(sum / cats.len() as f64);
    }
    let mut total = 0.0;
    for &m in &maps {
        total += m;
    }
    (maps[0], total / maps.len() as f64, maps)
}

/// Small random evaluation instance: at most 5 images, 3 categories, 3 ground
/// truths and 4 detections per image. Detections are jittered copies of
/// ground truth plus spurious boxes; coarse confidences make ties common.
pub fn random_instance<R: Rng>(rng: &mut R) -> (Vec<Detection<f64>>, Vec<GroundTruth<f64>>) {
    let n_images = rng.gen_range(1..=5);
    let n_cats = rng.gen_range(1..=3u32);
    let mut gts = Vec::new();
    let mut dets = Vec::new();
    let conf = |rng: &mut R| rng.gen_range(1..=10) as f64 / 10.0;
    for i in 0..n_images {
        let image_id = format!("im{i}");
        let mut image_dets = Vec::new();
        for _ in 0..rng.gen_range(0..=3) {
            let category_id = rng.gen_range(0..n_cats);
            let w = rng.gen_range(0.05..0.4);
            let h = rng.gen_range(0.05..0.4);
            let bbox = BBox::new(rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), w, h);
            gts.push(GroundTruth {
                image_id: image_id.clone(),
                category_id,
                bbox,
            });
            for _ in 0..rng.gen_range(0..=2) {
                let j = |rng: &mut R, s: f64| rng.gen_range(-0.3..0.3) * s;
                let jittered = BBox::new(
                    bbox.cx + j(rng, w),
                    bbox.cy + j(rng, h),
                    w * (1.0 + j(rng, 1.0)),
                    h * (1.0 + j(rng, 1.0)),
                );
                let category_id = if rng.gen_bool(0.9) { category_id } else { rng.gen_range(0..n_cats) };
                image_dets.push(Detection {
                    image_id: image_id.clone(),
                    category_id,
                    confidence: conf(rng),
                    bbox: jittered,
                });
            }
        }
        for _ in 0..rng.gen_range(0..=2) {
            image_dets.push(Detection {
                image_id: image_id.clone(),
                category_id: rng.gen_range(0..n_cats),
                confidence: conf(rng),
                bbox: BBox::new(rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), 0.1, 0.1),
            });
        }
        image_dets.truncate(rng.gen_range(0..=4));
        dets.extend(image_dets);
    }
    if gts.is_empty() {
        gts.push(GroundTruth {
            image_id: "im0".into(),
            category_id: 0,
            bbox: BBox::new(0.5, 0.5, 0.2, 0.2),
        });
    }
    (dets, gts)
}

/// Dense multi-head attention over all `H*W` tokens of an `[H, W, C]` map
/// given as a flat row-major slice, with projections `x W`.
pub fn dense_attention(
    x: &[f64],
    hw: usize,
    c: usize,
    heads: usize,
    scale: f64,
    w: [&[f64]; 4],
) -> Vec<f64> {
    let proj = |m: &[f64]| {
        let mut out = vec![0.0; hw * c];
        for t in 0..hw {
            for j in 0..c {
                let mut s = 0.0;
                for p in 0..c {
                    s += x[t * c + p] * m[p * c + j];
                }
                out[t * c + j] = s;
            }
        }
        out
    };
    let (q, k, v) = (proj(w[0]), proj(w[1]), proj(w[2]));
    let dh = c / heads;
    let mut concat = vec![0.0; hw * c];
    for h in 0..heads {
        for i in 0..hw {
            let logits: Vec<f64> = (0..hw)
                .map(|j| (0..dh).map(|d| q[i * c + h * dh + d] * k[j * c + h * dh + d]).sum::<f64>() * scale)
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for d in 0..dh {
                concat[i * c + h * dh + d] = (0..hw).map(|j| e[j] / z * v[j * c + h * dh + d]).sum();
            }
        }
    }
    let mut out = vec![0.0; hw * c];
    for t in 0..hw {
        for j in 0..c {
            out[t * c + j] = (0..c).map(|p| concat[t * c + p] * w[3][p * c + j]).sum();
        }
    }
    out
}

/// Indices of the `k` largest values, by descending value then ascending index.
pub fn sort_topk(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
    idx.truncate(k);
    idx
}
