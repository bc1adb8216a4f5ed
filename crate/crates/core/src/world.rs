//! Synthetic colored-shape scenes and COCO-style average precision.

use std::collections::BTreeMap;

use conceptdet_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::{iou, BBox};
use crate::error::{Error, Result};

pub const COLORS: [(&str, [f32; 3]); 3] = [("red", [0.9, 0.15, 0.1]), ("green", [0.1, 0.75, 0.2]), ("blue", [0.15, 0.25, 0.95])];
pub const SHAPES: [&str; 3] = ["circle", "square", "triangle"];
pub const BACKGROUND: [f32; 3] = [0.45, 0.45, 0.45];
pub const NUM_CATEGORIES: usize = COLORS.len() * SHAPES.len();

/// (color, shape) pairs withheld from training scenes: every color and
/// every shape is still seen twice in training.
pub const HELD_OUT: [usize; 3] = [2, 3, 7];

pub fn category(color: usize, shape: usize) -> usize {
    color * SHAPES.len() + shape
}

pub fn color_of(class: usize) -> usize {
    class / SHAPES.len()
}

pub fn shape_of(class: usize) -> usize {
    class % SHAPES.len()
}

pub fn training_categories() -> Vec<usize> {
    (0..NUM_CATEGORIES).filter(|c| !HELD_OUT.contains(c)).collect()
}

/// `"<color> <shape>"` for every category id.
pub fn default_phrases() -> Vec<String> {
    (0..NUM_CATEGORIES).map(|c| format!("{} {}", COLORS[color_of(c)].0, SHAPES[shape_of(c)])).collect()
}

/// Phrases with shape names replaced: circle -> blob, square -> tile,
/// triangle -> wedge.
pub fn shifted_phrases() -> Vec<String> {
    const RENAMED: [&str; 3] = ["blob", "tile", "wedge"];
    (0..NUM_CATEGORIES).map(|c| format!("{} {}", COLORS[color_of(c)].0, RENAMED[shape_of(c)])).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Half-extent range in pixels.
    pub min_radius: f64,
    pub max_radius: f64,
    pub categories: Vec<usize>,
    pub max_pair_iou: f64,
    pub attempts: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self { size: 64, min_objects: 1, max_objects: 3, min_radius: 6.0, max_radius: 13.0, categories: training_categories(), max_pair_iou: 0.3, attempts: 200 }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || !self.size.is_multiple_of(64) {
            return Err(Error::input(format!("scene size {} must be a positive multiple of 64", self.size)));
        }
        if self.min_objects > self.max_objects || self.min_radius < 2.0 || self.min_radius > self.max_radius || 2.0 * self.max_radius > self.size as f64 {
            return Err(Error::input("inconsistent object count or radius range"));
        }
        if self.max_objects > 0 && (self.categories.is_empty() || self.categories.iter().any(|&c| c >= NUM_CATEGORIES)) {
            return Err(Error::input("scene spec needs valid categories"));
        }
        Ok(())
    }
}

/// Pixel-space object: center and half-extent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapeObject {
    pub class: usize,
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
}

impl ShapeObject {
    /// Tight pixel box; every shape spans `[c - r, c + r]` on both axes.
    pub fn pixel_box(&self) -> BBox {
        BBox::new(self.cx, self.cy, 2.0 * self.r, 2.0 * self.r)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        match shape_of(self.class) {
            0 => dx * dx + dy * dy <= self.r * self.r,
            1 => dx.abs() <= self.r && dy.abs() <= self.r,
            _ => {
                // apex (cx, cy - r), base corners (cx +- r, cy + r)
                let t = (dy + self.r) / (2.0 * self.r);
                (0.0..=1.0).contains(&t) && dx.abs() <= t * self.r
            }
        }
    }
}

const SUBSAMPLES: usize = 4;

/// Fraction of each pixel covered by the object, `size * size` row-major.
pub fn coverage(obj: &ShapeObject, size: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; size * size];
    let [x0, y0, x1, y1] = obj.pixel_box().corners();
    let (c0, c1) = ((x0.floor().max(0.0)) as usize, (x1.ceil() as usize).min(size));
    let (r0, r1) = ((y0.floor().max(0.0)) as usize, (y1.ceil() as usize).min(size));
    let step = 1.0 / SUBSAMPLES as f64;
    for i in r0..r1 {
        for j in c0..c1 {
            let mut hit = 0;
            for a in 0..SUBSAMPLES {
                for b in 0..SUBSAMPLES {
                    if obj.contains(j as f64 + (b as f64 + 0.5) * step, i as f64 + (a as f64 + 0.5) * step) {
                        hit += 1;
                    }
                }
            }
            out[i * size + j] = hit as f32 / (SUBSAMPLES * SUBSAMPLES) as f32;
        }
    }
    out
}

/// Pixel box `[x0, y0, x1, y1]` of the covered pixels, None when empty.
pub fn mask_box(mask: &[f32], size: usize) -> Option<[f64; 4]> {
    let mut b: Option<[usize; 4]> = None;
    for i in 0..size {
        for j in 0..size {
            if mask[i * size + j] > 0.0 {
                let e = b.get_or_insert([j, i, j, i]);
                e[0] = e[0].min(j);
                e[1] = e[1].min(i);
                e[2] = e[2].max(j);
                e[3] = e[3].max(i);
            }
        }
    }
    b.map(|[x0, y0, x1, y1]| [x0 as f64, y0 as f64, x1 as f64 + 1.0, y1 as f64 + 1.0])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub seed: u64,
    pub size: usize,
    pub objects: Vec<ShapeObject>,
    /// Normalized cxcywh, one per object.
    pub boxes: Vec<BBox>,
    pub class_ids: Vec<usize>,
    #[serde(skip)]
    pub image: Option<Tensor<f32>>,
}

impl SyntheticScene {
    pub fn from_objects(seed: u64, size: usize, objects: Vec<ShapeObject>) -> Self {
        let boxes = objects.iter().map(|o| o.pixel_box().scaled(1.0 / size as f64)).collect();
        let class_ids = objects.iter().map(|o| o.class).collect();
        let image = Some(render(&objects, size));
        Self { seed, size, objects, boxes, class_ids, image }
    }

    pub fn image(&self) -> Tensor<f32> {
        self.image.clone().unwrap_or_else(|| render(&self.objects, self.size))
    }

    pub fn phrases(&self, names: &[String]) -> Vec<String> {
        self.class_ids.iter().map(|&c| names[c].clone()).collect()
    }

    /// Distinct classes present, ascending.
    pub fn present_classes(&self) -> Vec<usize> {
        let mut c = self.class_ids.clone();
        c.sort_unstable();
        c.dedup();
        c
    }
}

/// `[3, size, size]` image, later objects drawn over earlier ones.
pub fn render(objects: &[ShapeObject], size: usize) -> Tensor<f32> {
    let plane = size * size;
    let mut data = Vec::with_capacity(3 * plane);
    for bg in BACKGROUND {
        data.extend(std::iter::repeat_n(bg, plane));
    }
    for o in objects {
        let cov = coverage(o, size);
        let rgb = COLORS[color_of(o.class)].1;
        for (p, &a) in cov.iter().enumerate() {
            if a > 0.0 {
                for (ch, &col) in rgb.iter().enumerate() {
                    let v = &mut data[ch * plane + p];
                    *v = *v * (1.0 - a) + col * a;
                }
            }
        }
    }
    Tensor::new(vec![3, size, size], data).expect("3 planes")
}

/// Deterministic in `seed`; boxes pairwise IoU at most `max_pair_iou`.
pub fn generate_scene(seed: u64, spec: &SceneSpec) -> Result<SyntheticScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(spec.min_objects..=spec.max_objects);
    let size = spec.size as f64;
    let mut objects: Vec<ShapeObject> = Vec::with_capacity(n);
    for k in 0..n {
        let mut placed = false;
        for _ in 0..spec.attempts {
            let class = spec.categories[rng.random_range(0..spec.categories.len())];
            let r = rng.random_range(spec.min_radius..=spec.max_radius);
            let cx = rng.random_range(r..=size - r);
            let cy = rng.random_range(r..=size - r);
            let cand = ShapeObject { class, cx, cy, r };
            if objects.iter().all(|o| iou(&o.pixel_box(), &cand.pixel_box()) <= spec.max_pair_iou) {
                objects.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Generation(format!("could not place object {} of {n} within {} attempts", k + 1, spec.attempts)));
        }
    }
    Ok(SyntheticScene::from_objects(seed, spec.size, objects))
}

/// Scenes plus the phrase for every category id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSplit {
    pub name: String,
    pub scenes: Vec<SyntheticScene>,
    /// Categories evaluated (and prompted) on this split.
    pub categories: Vec<usize>,
    /// Phrase per category id.
    pub phrases: Vec<String>,
    pub held_out: Vec<usize>,
}

impl BenchmarkSplit {
    pub fn generate(name: &str, first_seed: u64, count: usize, spec: &SceneSpec, categories: Vec<usize>) -> Result<Self> {
        let scenes = (0..count as u64).map(|i| generate_scene(first_seed + i, spec)).collect::<Result<_>>()?;
        Ok(Self { name: name.into(), scenes, categories, phrases: default_phrases(), held_out: HELD_OUT.to_vec() })
    }

    /// Training scenes over the six non-held-out categories.
    pub fn overfit(count: usize, first_seed: u64) -> Result<Self> {
        Self::generate("overfit", first_seed, count, &SceneSpec::default(), training_categories())
    }

    /// Scenes where every image contains at least one held-out object.
    pub fn held_out_probe(count: usize, first_seed: u64) -> Result<Self> {
        let spec = SceneSpec { categories: (0..NUM_CATEGORIES).collect(), ..SceneSpec::default() };
        let mut scenes = Vec::with_capacity(count);
        let mut seed = first_seed;
        while scenes.len() < count {
            let s = generate_scene(seed, &spec)?;
            if s.class_ids.iter().any(|c| HELD_OUT.contains(c)) {
                scenes.push(s);
            }
            seed += 1;
        }
        Ok(Self { name: "held-out".into(), scenes, categories: (0..NUM_CATEGORIES).collect(), phrases: default_phrases(), held_out: HELD_OUT.to_vec() })
    }

    /// Same scenes, shape words renamed.
    pub fn label_shifted(&self) -> Self {
        Self { name: format!("{}-shifted", self.name), phrases: shifted_phrases(), ..self.clone() }
    }

    pub fn ground_truth(&self) -> Vec<GroundTruth> {
        let mut out = Vec::new();
        for (i, s) in self.scenes.iter().enumerate() {
            for (b, &c) in s.boxes.iter().zip(&s.class_ids) {
                out.push(GroundTruth { image: i, bbox: *b, class_id: c });
            }
        }
        out
    }

    /// No scene contains a held-out category.
    pub fn respects_held_out(&self) -> bool {
        self.scenes.iter().all(|s| s.class_ids.iter().all(|c| !self.held_out.contains(c)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub image: usize,
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image: usize,
    pub bbox: BBox,
    pub class_id: usize,
}

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    /// AP averaged over thresholds, per class that has ground truth.
    pub per_class: BTreeMap<usize, f64>,
    pub mean: f64,
}

/// All-point interpolated AP of one class at one threshold. `preds` must
/// already be in descending score order.
fn class_ap(preds: &[&Prediction], gts: &[&GroundTruth], thr: f64) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let mut used = vec![false; gts.len()];
    let mut tp = Vec::with_capacity(preds.len());
    for p in preds {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if used[g] || gt.image != p.image {
                continue;
            }
            let v = iou(&p.bbox, &gt.bbox);
            if v >= thr && best.is_none_or(|b| v > b.1) {
                best = Some((g, v));
            }
        }
        match best {
            Some((g, _)) => {
                used[g] = true;
                tp.push(true);
            }
            None => tp.push(false),
        }
    }
    let n_gt = gts.len() as f64;
    let (mut ctp, mut cfp) = (0.0, 0.0);
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    for &t in &tp {
        if t {
            ctp += 1.0;
        } else {
            cfp += 1.0;
        }
        recall.push(ctp / n_gt);
        precision.push(ctp / (ctp + cfp));
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev) * p;
        prev = *r;
    }
    ap
}

/// Greedy matching per IoU threshold, all-point interpolation, averaged
/// over thresholds and over classes that have ground truth.
pub fn evaluate_ap(preds: &[Prediction], gts: &[GroundTruth], thresholds: &[f64]) -> ApReport {
    let mut order: Vec<&Prediction> = preds.iter().collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut classes: Vec<usize> = gts.iter().map(|g| g.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut per_class = BTreeMap::new();
    for &c in &classes {
        let p: Vec<&Prediction> = order.iter().copied().filter(|p| p.class_id == c).collect();
        let g: Vec<&GroundTruth> = gts.iter().filter(|g| g.class_id == c).collect();
        let ap = thresholds.iter().map(|&t| class_ap(&p, &g, t)).sum::<f64>() / thresholds.len().max(1) as f64;
        per_class.insert(c, ap);
    }
    let mean = if per_class.is_empty() { 0.0 } else { per_class.values().sum::<f64>() / per_class.len() as f64 };
    ApReport { per_class, mean }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triangle_contains_apex_and_base() {
        let t = ShapeObject { class: category(0, 2), cx: 20.0, cy: 20.0, r: 8.0 };
        assert!(t.contains(20.0, 12.5));
        assert!(t.contains(27.5, 27.5));
        assert!(!t.contains(27.5, 13.0));
    }

    #[test]
    fn single_gt_with_spurious_low_score() {
        let gt = GroundTruth { image: 0, bbox: BBox::new(0.5, 0.5, 0.2, 0.2), class_id: 1 };
        let good = Prediction { image: 0, bbox: gt.bbox, class_id: 1, score: 0.9 };
        let bad = Prediction { image: 0, bbox: BBox::new(0.1, 0.1, 0.1, 0.1), class_id: 1, score: 0.3 };
        let r = evaluate_ap(&[bad, good], &[gt], &[0.5]);
        assert_eq!(r.mean, 1.0);
    }
}
