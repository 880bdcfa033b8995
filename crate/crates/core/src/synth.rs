//! Deterministic synthetic datasets for tests and demos: a parametric
//! face-toy generator and a digit corpus written in the canonical IDX
//! layout with the canonical per-class counts.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::dataio::{IdxTensor, IDX_MAGIC_IMAGES, IDX_MAGIC_LABELS};
use crate::image::ImageTensor;
use crate::nn::seeded_rng;

// ---------------------------------------------------------------------------
// Face toy set
// ---------------------------------------------------------------------------

struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    rot: f64,
    color: [f64; 3],
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let (s, c) = self.rot.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.rx).powi(2) + (v / self.ry).powi(2) <= 1.0
    }
}

/// One procedural face: gradient background, head ellipse, hair, eyes with
/// glints, brows, nose shadow, mouth. Coordinates are normalized so the same
/// parameters render at any resolution; drawing uses 2x supersampling.
pub fn face<R: Rng + ?Sized>(rng: &mut R, size: usize) -> ImageTensor {
    // palette draws
    let bg_top = [
        0.25 + 0.5 * rng.gen::<f64>(),
        0.25 + 0.5 * rng.gen::<f64>(),
        0.35 + 0.55 * rng.gen::<f64>(),
    ];
    let bg_bot = [
        bg_top[0] * (0.5 + 0.3 * rng.gen::<f64>()),
        bg_top[1] * (0.5 + 0.3 * rng.gen::<f64>()),
        bg_top[2] * (0.5 + 0.3 * rng.gen::<f64>()),
    ];
    let skin_base = 0.45 + 0.45 * rng.gen::<f64>();
    let skin = [
        skin_base,
        skin_base * (0.72 + 0.1 * rng.gen::<f64>()),
        skin_base * (0.55 + 0.12 * rng.gen::<f64>()),
    ];
    let hair_v = 0.06 + 0.3 * rng.gen::<f64>();
    let hair = [hair_v, hair_v * (0.7 + 0.3 * rng.gen::<f64>()), hair_v * 0.6];
    let mouth_col = [0.55 + 0.3 * rng.gen::<f64>(), 0.15 + 0.12 * rng.gen::<f64>(), 0.18];

    // geometry draws (normalized units)
    let cx = 0.5 + 0.06 * (rng.gen::<f64>() - 0.5);
    let cy = 0.52 + 0.06 * (rng.gen::<f64>() - 0.5);
    let head_rx = 0.26 + 0.06 * rng.gen::<f64>();
    let head_ry = 0.33 + 0.06 * rng.gen::<f64>();
    let tilt = 0.12 * (rng.gen::<f64>() - 0.5);
    let eye_dx = 0.105 + 0.03 * rng.gen::<f64>();
    let eye_y = cy - 0.07 - 0.02 * rng.gen::<f64>();
    let eye_r = 0.030 + 0.012 * rng.gen::<f64>();
    let mouth_y = cy + 0.16 + 0.03 * rng.gen::<f64>();
    let mouth_rx = 0.07 + 0.04 * rng.gen::<f64>();
    let mouth_ry = 0.018 + 0.015 * rng.gen::<f64>();
    let brow_lift = 0.035 + 0.015 * rng.gen::<f64>();

    let head = Ellipse { cx, cy, rx: head_rx, ry: head_ry, rot: tilt, color: skin };
    let hair_cap = Ellipse {
        cx,
        cy: cy - head_ry * 0.62,
        rx: head_rx * 1.06,
        ry: head_ry * 0.52,
        rot: tilt,
        color: hair,
    };
    let eye_l = Ellipse { cx: cx - eye_dx, cy: eye_y, rx: eye_r, ry: eye_r * 0.75, rot: 0.0, color: [0.05, 0.05, 0.08] };
    let eye_r_e = Ellipse { cx: cx + eye_dx, cy: eye_y, rx: eye_r, ry: eye_r * 0.75, rot: 0.0, color: [0.05, 0.05, 0.08] };
    let glint_l = Ellipse { cx: cx - eye_dx + eye_r * 0.3, cy: eye_y - eye_r * 0.25, rx: eye_r * 0.25, ry: eye_r * 0.25, rot: 0.0, color: [0.95, 0.95, 0.97] };
    let glint_r = Ellipse { cx: cx + eye_dx + eye_r * 0.3, cy: eye_y - eye_r * 0.25, rx: eye_r * 0.25, ry: eye_r * 0.25, rot: 0.0, color: [0.95, 0.95, 0.97] };
    let brow_l = Ellipse { cx: cx - eye_dx, cy: eye_y - brow_lift, rx: eye_r * 1.5, ry: eye_r * 0.3, rot: -0.15 + tilt, color: hair };
    let brow_r = Ellipse { cx: cx + eye_dx, cy: eye_y - brow_lift, rx: eye_r * 1.5, ry: eye_r * 0.3, rot: 0.15 + tilt, color: hair };
    let nose = Ellipse { cx, cy: cy + 0.05, rx: 0.016, ry: 0.045, rot: 0.0, color: [skin[0] * 0.82, skin[1] * 0.8, skin[2] * 0.8] };
    let mouth = Ellipse { cx, cy: mouth_y, rx: mouth_rx, ry: mouth_ry, rot: tilt * 0.5, color: mouth_col };

    // paint order: later shapes overdraw earlier ones
    let shapes = [&head, &hair_cap, &brow_l, &brow_r, &eye_l, &eye_r_e, &glint_l, &glint_r, &nose, &mouth];

    let ss = 2 * size;
    let mut hi = vec![0.0f64; 3 * ss * ss];
    for py in 0..ss {
        for px in 0..ss {
            let x = (px as f64 + 0.5) / ss as f64;
            let y = (py as f64 + 0.5) / ss as f64;
            let mut col = [
                bg_top[0] + (bg_bot[0] - bg_top[0]) * y,
                bg_top[1] + (bg_bot[1] - bg_top[1]) * y,
                bg_top[2] + (bg_bot[2] - bg_top[2]) * y,
            ];
            for s in shapes {
                if s.contains(x, y) {
                    col = s.color;
                }
            }
            for c in 0..3 {
                hi[(c * ss + py) * ss + px] = col[c];
            }
        }
    }

    // 2x box downsample into model range
    let mut img = ImageTensor::zeros(3, size, size);
    for c in 0..3 {
        for y in 0..size {
            for x in 0..size {
                let base = (c * ss + 2 * y) * ss + 2 * x;
                let v = 0.25 * (hi[base] + hi[base + 1] + hi[base + ss] + hi[base + ss + 1]);
                img.set(c, y, x, (2.0 * v - 1.0).clamp(-1.0, 1.0));
            }
        }
    }
    img
}

/// Deterministic set of faces.
pub fn face_set(n: usize, size: usize, seed: u64) -> Vec<ImageTensor> {
    let mut rng = seeded_rng(seed);
    (0..n).map(|_| face(&mut rng, size)).collect()
}

// ---------------------------------------------------------------------------
// Digit corpus
// ---------------------------------------------------------------------------

/// Per-class counts of the canonical 60k training label file.
pub const DIGIT_TRAIN_COUNTS: [usize; 10] = [5923, 6742, 5958, 6131, 5842, 5421, 5918, 6265, 5851, 5949];
/// Per-class counts of the canonical 10k test label file.
pub const DIGIT_TEST_COUNTS: [usize; 10] = [980, 1135, 1032, 1010, 982, 892, 958, 1028, 974, 1009];

const GLYPHS: [[&str; 7]; 10] = [
    ["01110", "10001", "10011", "10101", "11001", "10001", "01110"],
    ["00100", "01100", "00100", "00100", "00100", "00100", "01110"],
    ["01110", "10001", "00001", "00010", "00100", "01000", "11111"],
    ["11111", "00010", "00100", "00010", "00001", "10001", "01110"],
    ["00010", "00110", "01010", "10010", "11111", "00010", "00010"],
    ["11111", "10000", "11110", "00001", "00001", "10001", "01110"],
    ["00110", "01000", "10000", "11110", "10001", "10001", "01110"],
    ["11111", "00001", "00010", "00100", "01000", "01000", "01000"],
    ["01110", "10001", "10001", "01110", "10001", "10001", "01110"],
    ["01110", "10001", "10001", "01111", "00001", "00010", "01100"],
];

fn glyph_sample(label: u8, u: f64, v: f64) -> f64 {
    // bilinear sample of the 5x7 bitmap over [0,1]^2
    if !(0.0..1.0).contains(&u) || !(0.0..1.0).contains(&v) {
        return 0.0;
    }
    let gx = u * 5.0 - 0.5;
    let gy = v * 7.0 - 0.5;
    let x0 = gx.floor();
    let y0 = gy.floor();
    let fx = gx - x0;
    let fy = gy - y0;
    let at = |xi: isize, yi: isize| -> f64 {
        if !(0..5).contains(&xi) || !(0..7).contains(&yi) {
            return 0.0;
        }
        let row = GLYPHS[label as usize][yi as usize].as_bytes();
        if row[xi as usize] == b'1' {
            1.0
        } else {
            0.0
        }
    };
    let (x0i, y0i) = (x0 as isize, y0 as isize);
    let top = at(x0i, y0i) * (1.0 - fx) + at(x0i + 1, y0i) * fx;
    let bot = at(x0i, y0i + 1) * (1.0 - fx) + at(x0i + 1, y0i + 1) * fx;
    top * (1.0 - fy) + bot * fy
}

/// Render one 28x28 digit: glyph under a small random affine map, light
/// smoothing from the bilinear sampling, intensity jitter, faint noise.
pub fn render_digit<R: Rng + ?Sized>(label: u8, rng: &mut R) -> Vec<u8> {
    assert!(label < 10);
    let scale = 0.85 + 0.25 * rng.gen::<f64>();
    let rot = 0.22 * (rng.gen::<f64>() - 0.5);
    let shear = 0.2 * (rng.gen::<f64>() - 0.5);
    let tx = 2.4 * (rng.gen::<f64>() - 0.5);
    let ty = 2.4 * (rng.gen::<f64>() - 0.5);
    let gain = 0.78 + 0.22 * rng.gen::<f64>();
    let noise_std = 3.0;

    // glyph box ~ 16x20 centered in the 28x28 field
    let (bw, bh) = (16.0 * scale, 20.0 * scale);
    let (s, c) = rot.sin_cos();
    let mut out = Vec::with_capacity(784);
    for py in 0..28 {
        for px in 0..28 {
            let x = px as f64 - 13.5 - tx;
            let y = py as f64 - 13.5 - ty;
            // inverse rotation and shear into glyph space
            let xr = c * x + s * y;
            let yr = -s * x + c * y;
            let xs = xr - shear * yr;
            let u = xs / bw + 0.5;
            let v = yr / bh + 0.5;
            let ink = glyph_sample(label, u, v);
            let noisy = 255.0 * gain * ink + noise_std * rng.sample::<f64, _>(StandardNormal);
            out.push(noisy.clamp(0.0, 255.0).round() as u8);
        }
    }
    out
}

/// Build an image/label IDX pair with the given per-class counts, shuffled
/// deterministically.
pub fn digit_corpus<R: Rng + ?Sized>(counts: &[usize; 10], rng: &mut R) -> (IdxTensor, IdxTensor) {
    let total: usize = counts.iter().sum();
    let mut labels = Vec::with_capacity(total);
    for (label, &n) in counts.iter().enumerate() {
        labels.extend(std::iter::repeat(label as u8).take(n));
    }
    // Fisher-Yates with the provided rng
    for i in (1..labels.len()).rev() {
        let j = rng.gen_range(0..=i);
        labels.swap(i, j);
    }
    let mut payload = Vec::with_capacity(total * 784);
    for &label in &labels {
        payload.extend(render_digit(label, rng));
    }
    (
        IdxTensor { magic: IDX_MAGIC_IMAGES, dims: vec![total, 28, 28], payload },
        IdxTensor { magic: IDX_MAGIC_LABELS, dims: vec![total], payload: labels },
    )
}

/// Write train/test corpora under `dir` with the canonical file names.
/// Returns `(train_images, train_labels, test_images, test_labels)` paths.
pub fn write_digit_corpus(dir: &std::path::Path, seed: u64) -> crate::Result<[std::path::PathBuf; 4]> {
    let mut rng = seeded_rng(seed);
    let (train_imgs, train_labels) = digit_corpus(&DIGIT_TRAIN_COUNTS, &mut rng);
    let (test_imgs, test_labels) = digit_corpus(&DIGIT_TEST_COUNTS, &mut rng);
    let paths = [
        dir.join("train-images-idx3-ubyte"),
        dir.join("train-labels-idx1-ubyte"),
        dir.join("t10k-images-idx3-ubyte"),
        dir.join("t10k-labels-idx1-ubyte"),
    ];
    crate::dataio::write_idx(&train_imgs, &paths[0])?;
    crate::dataio::write_idx(&train_labels, &paths[1])?;
    crate::dataio::write_idx(&test_imgs, &paths[2])?;
    crate::dataio::write_idx(&test_labels, &paths[3])?;
    Ok(paths)
}

/// Convert one item of an image IDX tensor to a model-space image.
pub fn idx_image(t: &IdxTensor, index: usize) -> ImageTensor {
    let h = t.dims[1];
    let w = t.dims[2];
    let plane = h * w;
    ImageTensor::from_storage_u8(1, h, w, &t.payload[index * plane..(index + 1) * plane])
        .expect("in-range idx item")
}
