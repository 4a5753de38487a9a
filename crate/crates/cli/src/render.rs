//! PNG previews: scene rasters and colour-wheel flow fields.

use fpt_core::infer::DenseFlowField;
use fpt_core::synth::{SceneRaster, MAX_PARTS};

const PALETTE: [[f32; 3]; MAX_PARTS] = [
    [0.90, 0.35, 0.25],
    [0.25, 0.55, 0.90],
    [0.30, 0.75, 0.35],
    [0.90, 0.75, 0.20],
    [0.65, 0.35, 0.80],
];

fn encode(size: usize, rgb: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    let mut enc = png::Encoder::new(&mut out, size as u32, size as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header().expect("in-memory png header");
    w.write_image_data(rgb).expect("in-memory png data");
    w.finish().expect("in-memory png");
    out
}

/// Texture channel as a grey backdrop, part coverage blended in palette colours.
pub fn raster_png(r: &SceneRaster) -> Vec<u8> {
    let n = r.size;
    let mut rgb = Vec::with_capacity(3 * n * n);
    for y in 0..n {
        for x in 0..n {
            let tex = if r.channels > MAX_PARTS {
                r.at(MAX_PARTS, y, x)
            } else {
                0.5
            };
            let mut c = [0.75 + 0.2 * (tex - 0.5); 3];
            for (p, col) in PALETTE.iter().enumerate().take(r.channels.min(MAX_PARTS)) {
                let a = r.at(p, y, x).clamp(0.0, 1.0);
                for i in 0..3 {
                    c[i] = c[i] * (1.0 - a) + col[i] * a;
                }
            }
            rgb.extend(c.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        }
    }
    encode(n, &rgb)
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Hue encodes direction, saturation magnitude relative to the largest vector.
pub fn flow_png(f: &DenseFlowField) -> Vec<u8> {
    let max = f
        .flows
        .iter()
        .map(|v| v[0].hypot(v[1]))
        .fold(1e-9, f64::max);
    let rgb: Vec<u8> = f
        .flows
        .iter()
        .flat_map(|v| {
            let h = v[1].atan2(v[0]) / std::f64::consts::TAU;
            hsv(h, v[0].hypot(v[1]) / max, 1.0).map(|c| (c * 255.0).round() as u8)
        })
        .collect();
    encode(f.grid, &rgb)
}
