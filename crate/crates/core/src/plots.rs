//! Text-free raster plots: ablation heatmaps, ROC curves, IoU bar groups and
//! class-map overlays.

use image::{Rgb, RgbImage};
use ndarray::Array2;

use crate::datasets::class_color;
use crate::evaluation::{AblationGrid, IouReport};

const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([40, 40, 40]);
const MISSING: Rgb<u8> = Rgb([200, 200, 200]);

/// Piecewise-linear blue → teal → yellow ramp over `[0, 1]`.
pub fn ramp(v: f64) -> Rgb<u8> {
    const STOPS: [[f64; 3]; 4] = [[48.0, 18.0, 120.0], [33.0, 145.0, 140.0], [120.0, 200.0, 80.0], [253.0, 231.0, 37.0]];
    let v = v.clamp(0.0, 1.0) * (STOPS.len() - 1) as f64;
    let i = (v.floor() as usize).min(STOPS.len() - 2);
    let f = v - i as f64;
    Rgb(std::array::from_fn(|c| (STOPS[i][c] * (1.0 - f) + STOPS[i + 1][c] * f).round() as u8))
}

/// One `cell × cell` square per (block, timestep); rows are blocks top to bottom.
/// Colour scale spans `[lo, hi]`; missing cells are grey.
pub fn heatmap(grid: &AblationGrid, cell: u32, lo: f64, hi: f64) -> RgbImage {
    let rows = grid.blocks.len() as u32;
    let cols = grid.timesteps.len() as u32;
    let mut img = RgbImage::from_pixel(cols * cell + 1, rows * cell + 1, AXIS);
    let span = (hi - lo).max(1e-12);
    for (r, row) in grid.accuracy.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            let color = v.map_or(MISSING, |v| ramp((v - lo) / span));
            for y in 1..cell {
                for x in 1..cell {
                    img.put_pixel(c as u32 * cell + x, r as u32 * cell + y, color);
                }
            }
        }
    }
    img
}

fn line(img: &mut RgbImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), color: Rgb<u8>) {
    let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let (x, y) = (x0 + (x1 - x0) * t, y0 + (y1 - y0) * t);
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
    }
}

/// ROC curve(s) on a unit square with the chance diagonal.
pub fn roc_plot(curves: &[(&[(f64, f64)], Rgb<u8>)], size: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(size, size, WHITE);
    let m = 8.0;
    let s = size as f64 - 2.0 * m;
    let map = |(fx, ty): (f64, f64)| (m + fx * s, m + (1.0 - ty) * s);
    line(&mut img, map((0.0, 0.0)), map((1.0, 0.0)), AXIS);
    line(&mut img, map((0.0, 0.0)), map((0.0, 1.0)), AXIS);
    line(&mut img, map((0.0, 0.0)), map((1.0, 1.0)), MISSING);
    for (curve, color) in curves {
        for w in curve.windows(2) {
            line(&mut img, map(w[0]), map(w[1]), *color);
        }
    }
    img
}

pub const GROUP_COLORS: [Rgb<u8>; 4] = [Rgb([90, 90, 90]), Rgb([230, 180, 140]), Rgb([180, 120, 70]), Rgb([100, 60, 35])];

/// Bars grouped by class (background … ruler); within a group one bar per report.
pub fn iou_bars(reports: &[Option<IouReport>], height: u32) -> RgbImage {
    let bar = 10u32;
    let gap = 12u32;
    let groups = crate::probes::NUM_CLASSES as u32;
    let per = reports.len().max(1) as u32;
    let width = groups * (per * bar + gap) + gap;
    let mut img = RgbImage::from_pixel(width, height + 2, WHITE);
    for x in 0..width {
        img.put_pixel(x, height, AXIS);
    }
    for k in 0..groups {
        let x0 = gap + k * (per * bar + gap);
        for (i, rep) in reports.iter().enumerate() {
            let Some(v) = rep.and_then(|r| r.per_class[k as usize]) else {
                continue;
            };
            let h = (v.clamp(0.0, 1.0) * height as f64).round() as u32;
            let color = GROUP_COLORS[i % GROUP_COLORS.len()];
            for x in 0..bar - 1 {
                for y in 0..h {
                    img.put_pixel(x0 + i as u32 * bar + x, height - 1 - y, color);
                }
            }
        }
    }
    img
}

/// Class map painted with the mask palette (background black).
pub fn class_map_image(map: &Array2<u8>) -> RgbImage {
    let (h, w) = map.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let c = class_color(map[[y as usize, x as usize]]);
        Rgb([c[0], c[1], c[2]])
    })
}

/// Cluster map with a fixed colour per cluster index, scaled up by `scale`.
pub fn cluster_image(map: &Array2<usize>, scale: u32) -> RgbImage {
    const COLORS: [[u8; 3]; 6] = [[230, 25, 75], [60, 180, 75], [0, 130, 200], [245, 130, 48], [145, 30, 180], [70, 240, 240]];
    let (h, w) = map.dim();
    let s = scale.max(1);
    RgbImage::from_fn(w as u32 * s, h as u32 * s, |x, y| {
        Rgb(COLORS[map[[(y / s) as usize, (x / s) as usize]] % COLORS.len()])
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::Subset;

    #[test]
    fn heatmap_geometry_and_missing() {
        let g = AblationGrid {
            subset: Subset::P5,
            blocks: vec![1, 2],
            timesteps: (0..=1000).step_by(50).collect(),
            accuracy: vec![vec![Some(1.0); 21], vec![None; 21]],
            auc: vec![vec![None; 21]; 2],
            seed: 0,
            weights_fingerprint: String::new(),
        };
        let img = heatmap(&g, 8, 0.0, 1.0);
        assert_eq!(img.dimensions(), (21 * 8 + 1, 2 * 8 + 1));
        assert_eq!(*img.get_pixel(4, 4), ramp(1.0));
        assert_eq!(*img.get_pixel(4, 12), MISSING);
    }

    #[test]
    fn ramp_endpoints() {
        assert_eq!(ramp(0.0), Rgb([48, 18, 120]));
        assert_eq!(ramp(1.0), Rgb([253, 231, 37]));
        assert_eq!(ramp(7.0), ramp(1.0));
    }

    #[test]
    fn roc_diagonal_is_drawn() {
        let curve = [(0.0, 0.0), (0.0, 1.0), (1.0, 1.0)];
        let img = roc_plot(&[(&curve, Rgb([255, 0, 0]))], 100);
        assert_eq!(*img.get_pixel(8, 50), Rgb([255, 0, 0]));
        assert_eq!(*img.get_pixel(50, 50), MISSING);
    }
}
