//! Independent reference implementations and random generators shared by
//! integration tests. The references work on plain arrays and never call
//! into the library; `grad` drives the library's loss functions.

#![allow(dead_code)]

pub mod grad;

use rand::Rng;

pub type Coords = [f64; 4];

pub fn area(b: Coords) -> f64 {
    (b[2] - b[0]) * (b[3] - b[1])
}

pub fn overlap(a: Coords, b: Coords) -> f64 {
    let w = a[2].min(b[2]) - a[0].max(b[0]);
    let h = a[3].min(b[3]) - a[1].max(b[1]);
    if w > 0.0 && h > 0.0 {
        w * h
    } else {
        0.0
    }
}

pub fn ref_iou(a: Coords, b: Coords) -> f64 {
    let i = overlap(a, b);
    if i == 0.0 {
        0.0
    } else {
        i / (area(a) + area(b) - i)
    }
}

/// Box mining written out step by step on raw coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct RefMining {
    pub clusters: Vec<Vec<usize>>,
    pub created: Vec<Coords>,
    pub eliminated: Vec<usize>,
    pub top_index: usize,
    pub fell_back: bool,
    pub final_box: Coords,
}

pub fn ref_mine(scores: &[f64], boxes: &[Coords], gamma1: f64, q: usize, area_weights: bool) -> RefMining {
    let n = boxes.len();
    let mut taken = vec![false; n];
    let mut clusters = Vec::new();
    let mut created = Vec::new();
    while clusters.len() < q {
        // highest remaining score, first index on ties
        let mut seed = None;
        for i in 0..n {
            if taken[i] {
                continue;
            }
            match seed {
                None => seed = Some(i),
                Some(s) if scores[i] > scores[s] => seed = Some(i),
                _ => {}
            }
        }
        let Some(seed) = seed else { break };
        taken[seed] = true;
        let mut members = vec![seed];
        for j in 0..n {
            if !taken[j] && ref_iou(boxes[j], boxes[seed]) > gamma1 {
                taken[j] = true;
                members.push(j);
            }
        }
        let mut mean = [0.0; 4];
        for &m in &members {
            for k in 0..4 {
                mean[k] += boxes[m][k];
            }
        }
        for v in &mut mean {
            *v /= members.len() as f64;
        }
        clusters.push(members);
        created.push(mean);
    }
    let top_index = clusters[0][0];
    let top = boxes[top_index];
    let mut eliminated = Vec::new();
    let mut kept = Vec::new();
    for (i, c) in created.iter().enumerate() {
        if overlap(*c, top) > 0.0 {
            kept.push(*c);
        } else {
            eliminated.push(i);
        }
    }
    if kept.is_empty() {
        return RefMining {
            clusters,
            created,
            eliminated,
            top_index,
            fell_back: true,
            final_box: top,
        };
    }
    let mut acc = [0.0; 4];
    let mut total = 0.0;
    for c in &kept {
        let w = if area_weights { area(*c) } else { 1.0 };
        total += w;
        for k in 0..4 {
            acc[k] += w * c[k];
        }
    }
    let mut final_box = [0.0; 4];
    for k in 0..4 {
        final_box[k] = (acc[k] / total + top[k]) / 2.0;
    }
    RefMining {
        clusters,
        created,
        eliminated,
        top_index,
        fell_back: false,
        final_box,
    }
}

/// MTR weight of stage `i` (1-based) when supervising stage `k`.
pub fn ref_mtr_weight(k: usize, i: usize, delta: f64) -> f64 {
    let (k, i) = (k as f64, i as f64);
    let alpha = if i == k - 1.0 {
        1.0 + (k - 1.0) * (k - 2.0) * delta / 2.0
    } else {
        1.0 - (k - i - 1.0) * delta
    };
    alpha / (k - 1.0)
}

/// One detection for the AP oracle: (image, score, box).
pub type RefDet = (usize, f64, Coords);

/// 11-point interpolated AP by sweeping every score threshold and running
/// greedy matching from scratch on the kept set.
pub fn ref_ap_sweep(dets: &[RefDet], gt: &[Vec<Coords>], iou_pos: f64) -> f64 {
    let npos: usize = gt.iter().map(Vec::len).sum();
    assert!(npos > 0);
    let mut thresholds: Vec<f64> = dets.iter().map(|d| d.1).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut points = Vec::new();
    for &t in &thresholds {
        let mut kept: Vec<&RefDet> = dets.iter().filter(|d| d.1 >= t).collect();
        kept.sort_by(|a, b| b.1.total_cmp(&a.1));
        let mut used: Vec<Vec<bool>> = gt.iter().map(|g| vec![false; g.len()]).collect();
        let mut tp = 0usize;
        for d in &kept {
            let mut best = (0.0, None);
            for (j, g) in gt[d.0].iter().enumerate() {
                let o = ref_iou(d.2, *g);
                if o > best.0 {
                    best = (o, Some(j));
                }
            }
            if let (o, Some(j)) = best {
                if o > iou_pos && !used[d.0][j] {
                    used[d.0][j] = true;
                    tp += 1;
                }
            }
        }
        points.push((tp as f64 / npos as f64, tp as f64 / kept.len() as f64));
    }
    (0..=10)
        .map(|r| {
            let r = r as f64 / 10.0;
            points
                .iter()
                .filter(|p| p.0 >= r)
                .map(|p| p.1)
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 11.0
}

pub fn random_box<R: Rng>(rng: &mut R, extent: f64) -> Coords {
    let w = rng.gen_range(0.05..0.6) * extent;
    let h = rng.gen_range(0.05..0.6) * extent;
    let x = rng.gen_range(0.0..extent - w);
    let y = rng.gen_range(0.0..extent - h);
    [x, y, x + w, y + h]
}

/// Boxes around a few centers so that clusters actually form.
pub fn random_mining_instance<R: Rng>(rng: &mut R, max_n: usize) -> (Vec<f64>, Vec<Coords>) {
    let n = rng.gen_range(1..=max_n);
    let centers: Vec<Coords> = (0..rng.gen_range(1..=4)).map(|_| random_box(rng, 100.0)).collect();
    let boxes = (0..n)
        .map(|_| {
            if rng.gen_bool(0.2) {
                return random_box(rng, 100.0);
            }
            let c = centers[rng.gen_range(0..centers.len())];
            let s = 0.25 * (c[2] - c[0]).min(c[3] - c[1]);
            let mut b = c.map(|v| v + rng.gen_range(-s..s));
            if b[2] - b[0] < 1.0 {
                b[2] = b[0] + 1.0;
            }
            if b[3] - b[1] < 1.0 {
                b[3] = b[1] + 1.0;
            }
            b
        })
        .collect();
    let scores = (0..n)
        .map(|_| if rng.gen_bool(0.1) { 0.5 } else { rng.gen::<f64>() })
        .collect();
    (scores, boxes)
}

/// A small detection problem over `images` images with distinct scores.
pub fn random_detection_set<R: Rng>(rng: &mut R, images: usize) -> (Vec<RefDet>, Vec<Vec<Coords>>) {
    let gt: Vec<Vec<Coords>> = (0..images)
        .map(|_| (0..rng.gen_range(0..=3)).map(|_| random_box(rng, 100.0)).collect())
        .collect();
    let mut gt = gt;
    if gt.iter().all(Vec::is_empty) {
        gt[0].push(random_box(rng, 100.0));
    }
    let count = rng.gen_range(1..=12);
    let mut dets = Vec::with_capacity(count);
    for k in 0..count {
        let img = rng.gen_range(0..images);
        let b = match gt[img].get(rng.gen_range(0..3)) {
            Some(g) if rng.gen_bool(0.7) => {
                let s = 0.15 * (g[2] - g[0]).min(g[3] - g[1]);
                let mut b = g.map(|v| v + rng.gen_range(-s..s));
                b[2] = b[2].max(b[0] + 1.0);
                b[3] = b[3].max(b[1] + 1.0);
                b
            }
            _ => random_box(rng, 100.0),
        };
        // distinct scores keep every ranking unambiguous
        let score = rng.gen::<f64>() * 0.9 + k as f64 * 1e-6;
        dets.push((img, score, b));
    }
    (dets, gt)
}
