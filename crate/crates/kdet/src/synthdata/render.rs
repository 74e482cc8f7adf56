//! Scene rasterization.

use super::{Image, SceneConfig, ShapeKind};
use crate::geometry::{iou, BBox};
use crate::rng::Rng64;
use rand::Rng;

/// Palette shared by all classes, so color carries no class information and
/// the detectors must key on shape. Colors are deliberately muted toward the
/// background band to keep the discrimination non-trivial at 64px.
const PALETTE: [[f32; 3]; 6] = [
    [0.78, 0.22, 0.22],
    [0.20, 0.66, 0.24],
    [0.22, 0.30, 0.80],
    [0.78, 0.72, 0.18],
    [0.74, 0.24, 0.70],
    [0.20, 0.70, 0.74],
];

const MAX_PLACEMENT_ATTEMPTS: usize = 100;
const MAX_PAIRWISE_IOU: f64 = 0.3;

struct Placed {
    bbox: BBox,
    shape: ShapeKind,
    color: [f32; 3],
}

fn point_in_shape(shape: ShapeKind, b: &BBox, px: f64, py: f64) -> bool {
    let dx = px - b.cx;
    let dy = py - b.cy;
    let (hw, hh) = (b.w / 2.0, b.h / 2.0);
    match shape {
        ShapeKind::Circle => (dx / hw).powi(2) + (dy / hh).powi(2) <= 1.0,
        ShapeKind::Square => dx.abs() <= hw && dy.abs() <= hh,
        ShapeKind::Triangle => {
            // Apex at the top edge midpoint, base along the bottom edge.
            let down = py - (b.cy - hh);
            down >= 0.0 && down <= b.h && dx.abs() <= hw * (down / b.h)
        }
    }
}

pub(super) fn render_scene(cfg: &SceneConfig, rng: &mut Rng64) -> (Image, Vec<BBox>) {
    let s = cfg.image_size;
    let mut image = Image::new(s);

    // Muted background; scene-wide noise is added after drawing.
    let base = [
        rng.gen_range(0.30..0.60) as f32,
        rng.gen_range(0.30..0.60) as f32,
        rng.gen_range(0.30..0.60) as f32,
    ];
    for c in 0..3 {
        image.data[c * s * s..(c + 1) * s * s].fill(base[c]);
    }

    // Rejection-sample non-overlapping placements; an object that cannot be
    // placed within the attempt budget is dropped.
    let want = rng.gen_range(cfg.objects_min..=cfg.objects_max);
    let mut placed: Vec<Placed> = Vec::new();
    for _ in 0..want {
        let class_id = rng.gen_range(0..cfg.shapes.len());
        let mut accepted = None;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let side = rng.gen_range(cfg.size_min..=cfg.size_max);
            let cx = rng.gen_range(side / 2.0..=1.0 - side / 2.0);
            let cy = rng.gen_range(side / 2.0..=1.0 - side / 2.0);
            let bbox = BBox::new(cx, cy, side, side, class_id, 1.0);
            if placed.iter().all(|p| iou(&p.bbox, &bbox) <= MAX_PAIRWISE_IOU) {
                accepted = Some(bbox);
                break;
            }
        }
        let Some(bbox) = accepted else { continue };
        let color = PALETTE[rng.gen_range(0..PALETTE.len())];
        placed.push(Placed {
            bbox,
            shape: cfg.shapes[class_id],
            color,
        });
    }

    // Rasterize in placement order at pixel centers.
    let plane = s * s;
    for p in &placed {
        let (x0, y0, x1, y1) = p.bbox.corners();
        let px0 = ((x0 * s as f64).floor().max(0.0)) as usize;
        let py0 = ((y0 * s as f64).floor().max(0.0)) as usize;
        let px1 = ((x1 * s as f64).ceil() as usize).min(s);
        let py1 = ((y1 * s as f64).ceil() as usize).min(s);
        for y in py0..py1 {
            let py = (y as f64 + 0.5) / s as f64;
            for x in px0..px1 {
                let px = (x as f64 + 0.5) / s as f64;
                if point_in_shape(p.shape, &p.bbox, px, py) {
                    for c in 0..3 {
                        image.data[c * plane + y * s + x] = p.color[c];
                    }
                }
            }
        }
    }

    // Uniform noise over the whole scene blurs shape boundaries at small
    // object sizes; this is the difficulty knob.
    for v in &mut image.data {
        let noise = rng.gen_range(-cfg.noise..=cfg.noise) as f32;
        *v = (*v + noise).clamp(0.0, 1.0);
    }

    let boxes = placed.into_iter().map(|p| p.bbox).collect();
    (image, boxes)
}

/// Tight bounding box of the pixels whose color differs from their scene
/// background, restricted to the annotation's neighborhood. Test support for
/// the rendering/label agreement check (single-object scenes).
#[cfg(test)]
pub fn tight_pixel_bbox(image: &Image, annotation: &BBox) -> Option<BBox> {
    let s = image.size;
    let plane = s * s;
    // Background is noisy but channel-wise stays within the noise band of
    // its base color; shape colors are saturated. Classify a pixel as
    // foreground if any channel sits far from the local background median.
    let mut channel_median = [0f32; 3];
    for c in 0..3 {
        let mut vals: Vec<f32> = image.data[c * plane..(c + 1) * plane].to_vec();
        vals.sort_by(f32::total_cmp);
        channel_median[c] = vals[plane / 2];
    }
    let (mut minx, mut miny, mut maxx, mut maxy) = (usize::MAX, usize::MAX, 0usize, 0usize);
    // Search a margin around the annotation to catch spill-over.
    let margin = 3.0 / s as f64;
    let (ax0, ay0, ax1, ay1) = annotation.corners();
    for y in 0..s {
        let py = (y as f64 + 0.5) / s as f64;
        if py < ay0 - margin || py > ay1 + margin {
            continue;
        }
        for x in 0..s {
            let px = (x as f64 + 0.5) / s as f64;
            if px < ax0 - margin || px > ax1 + margin {
                continue;
            }
            let fg = (0..3).any(|c| {
                (image.data[c * plane + y * s + x] - channel_median[c]).abs() > 0.15
            });
            if fg {
                minx = minx.min(x);
                miny = miny.min(y);
                maxx = maxx.max(x);
                maxy = maxy.max(y);
            }
        }
    }
    if minx == usize::MAX {
        return None;
    }
    let x0 = minx as f64 / s as f64;
    let y0 = miny as f64 / s as f64;
    let x1 = (maxx + 1) as f64 / s as f64;
    let y1 = (maxy + 1) as f64 / s as f64;
    Some(BBox::new(
        (x0 + x1) / 2.0,
        (y0 + y1) / 2.0,
        x1 - x0,
        y1 - y0,
        annotation.class_id,
        1.0,
    ))
}
