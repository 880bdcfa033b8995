//! Image carrier type and resampling.
//!
//! Images live in *model space*: real values in `[-1, 1]`, channel-major
//! (CHW) layout. Storage space is 8-bit `[0, 255]`; the two conversions are
//! exact inverses up to quantization.

use crate::{Error, Result};

/// H×W×C real-valued image in model range `[-1, 1]` (CHW layout).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    /// Zero-filled image (mid-gray in storage terms is -1 + 128/127.5; zero
    /// here is model-space zero).
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        assert!(
            channels == 1 || channels == 3,
            "channels must be 1 or 3, got {channels}"
        );
        assert!(height > 0 && width > 0, "degenerate image shape");
        ImageTensor {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    /// Build from raw CHW data already in model range.
    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::invalid(format!("channels must be 1 or 3, got {channels}")));
        }
        if data.len() != channels * height * width {
            return Err(Error::shape(
                format!("{}x{}x{} = {}", channels, height, width, channels * height * width),
                format!("{} values", data.len()),
            ));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("non-finite image values"));
        }
        Ok(ImageTensor { channels, height, width, data })
    }

    /// Convert 8-bit storage bytes (CHW order) to model space.
    pub fn from_storage_u8(channels: usize, height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        let data = bytes.iter().map(|&b| b as f64 / 127.5 - 1.0).collect();
        ImageTensor::from_vec(channels, height, width, data)
    }

    /// Quantize to 8-bit storage bytes (CHW order). Values are clamped first.
    pub fn to_storage_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| {
                let s = (v.clamp(-1.0, 1.0) + 1.0) * 127.5;
                s.round().clamp(0.0, 255.0) as u8
            })
            .collect()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Total number of scalar elements.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// One channel plane, row-major.
    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub(crate) fn same_shape(&self, other: &ImageTensor) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    pub(crate) fn shape_string(&self) -> String {
        format!("{}x{}x{}", self.channels, self.height, self.width)
    }

    pub(crate) fn require_same_shape(&self, other: &ImageTensor) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::shape(self.shape_string(), other.shape_string()))
        }
    }

    /// Elementwise `a*self + b*other`.
    pub fn scale_add(&self, a: f64, other: &ImageTensor, b: f64) -> Result<ImageTensor> {
        self.require_same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&x, &y)| a * x + b * y)
            .collect();
        Ok(ImageTensor { channels: self.channels, height: self.height, width: self.width, data })
    }

    /// Elementwise map.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> ImageTensor {
        ImageTensor {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Clamp all values into `[lo, hi]`.
    pub fn clamp(&self, lo: f64, hi: f64) -> ImageTensor {
        self.map(|v| v.clamp(lo, hi))
    }

    /// Sum of squared differences against `other`.
    pub fn sq_distance(&self, other: &ImageTensor) -> Result<f64> {
        self.require_same_shape(other)?;
        Ok(pairwise_sum(
            &self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| (a - b) * (a - b))
                .collect::<Vec<_>>(),
        ))
    }

    /// Sum of squared values.
    pub fn sq_norm(&self) -> f64 {
        pairwise_sum(&self.data.iter().map(|&v| v * v).collect::<Vec<_>>())
    }

    /// Horizontal mirror.
    pub fn hflip(&self) -> ImageTensor {
        let mut out = self.clone();
        for c in 0..self.channels {
            for y in 0..self.height {
                for x in 0..self.width {
                    out.set(c, y, x, self.get(c, y, self.width - 1 - x));
                }
            }
        }
        out
    }

    /// Replicate the Rec.601 luma across all channels (identity for grayscale).
    pub fn to_grayscale(&self) -> ImageTensor {
        if self.channels == 1 {
            return self.clone();
        }
        let mut out = ImageTensor::zeros(3, self.height, self.width);
        let n = self.height * self.width;
        for i in 0..n {
            let y = 0.299 * self.data[i] + 0.587 * self.data[n + i] + 0.114 * self.data[2 * n + i];
            out.data[i] = y;
            out.data[n + i] = y;
            out.data[2 * n + i] = y;
        }
        out
    }

    /// Single-channel luma plane (Rec.601 for RGB, the plane itself for gray).
    pub fn luma(&self) -> Vec<f64> {
        let n = self.height * self.width;
        if self.channels == 1 {
            return self.data.clone();
        }
        (0..n)
            .map(|i| 0.299 * self.data[i] + 0.587 * self.data[n + i] + 0.114 * self.data[2 * n + i])
            .collect()
    }

    /// Bilinear resample to `out_h` x `out_w` (half-pixel centers, edges clamped).
    pub fn resize_bilinear(&self, out_h: usize, out_w: usize) -> Result<ImageTensor> {
        if out_h == 0 || out_w == 0 {
            return Err(Error::invalid("resize target has a zero dimension"));
        }
        let mut out = ImageTensor::zeros(self.channels, out_h, out_w);
        let sy = self.height as f64 / out_h as f64;
        let sx = self.width as f64 / out_w as f64;
        for c in 0..self.channels {
            let src = self.plane(c);
            for oy in 0..out_h {
                let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
                let y0 = fy.floor() as usize;
                let y1 = (y0 + 1).min(self.height - 1);
                let wy = fy - y0 as f64;
                for ox in 0..out_w {
                    let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                    let x0 = fx.floor() as usize;
                    let x1 = (x0 + 1).min(self.width - 1);
                    let wx = fx - x0 as f64;
                    let v00 = src[y0 * self.width + x0];
                    let v01 = src[y0 * self.width + x1];
                    let v10 = src[y1 * self.width + x0];
                    let v11 = src[y1 * self.width + x1];
                    let top = v00 + (v01 - v00) * wx;
                    let bot = v10 + (v11 - v10) * wx;
                    out.set(c, oy, ox, top + (bot - top) * wy);
                }
            }
        }
        Ok(out)
    }
}

/// Pairwise (cascade) summation to bound rounding error on long reductions.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        2 => values[0] + values[1],
        n if n <= 32 => values.iter().sum(),
        n => {
            let mid = n / 2;
            pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn storage_round_trip_is_identity_on_bytes() {
        let bytes: Vec<u8> = (0..=255u16).map(|v| v as u8).collect();
        let img = ImageTensor::from_storage_u8(1, 16, 16, &bytes).unwrap();
        assert_eq!(img.to_storage_u8(), bytes);
    }

    #[test]
    fn resize_identity_when_same_size() {
        let img = ImageTensor::from_vec(1, 3, 3, (0..9).map(|v| v as f64 / 10.0).collect()).unwrap();
        let same = img.resize_bilinear(3, 3).unwrap();
        for (a, b) in img.data().iter().zip(same.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn resize_preserves_constant_images() {
        let img = ImageTensor::from_vec(3, 8, 8, vec![0.25; 3 * 64]).unwrap();
        let up = img.resize_bilinear(32, 32).unwrap();
        assert!(up.data().iter().all(|&v| (v - 0.25).abs() < 1e-12));
        let down = img.resize_bilinear(3, 5).unwrap();
        assert!(down.data().iter().all(|&v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn hflip_is_involution() {
        let img = ImageTensor::from_vec(1, 2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(img.hflip().hflip(), img);
        assert_eq!(img.hflip().get(0, 0, 0), 3.0);
    }

    #[test]
    fn grayscale_channels_match() {
        let img = ImageTensor::from_vec(3, 1, 2, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let g = img.to_grayscale();
        for i in 0..2 {
            assert_eq!(g.plane(0)[i], g.plane(1)[i]);
            assert_eq!(g.plane(0)[i], g.plane(2)[i]);
        }
    }

    #[test]
    fn from_vec_rejects_bad_shapes() {
        assert!(ImageTensor::from_vec(2, 2, 2, vec![0.0; 8]).is_err());
        assert!(ImageTensor::from_vec(1, 2, 2, vec![0.0; 5]).is_err());
        assert!(ImageTensor::from_vec(1, 1, 2, vec![f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn pairwise_sum_matches_naive_on_ramp() {
        let v: Vec<f64> = (0..1000).map(|i| (i as f64).sin()).collect();
        let naive: f64 = v.iter().sum();
        assert!((pairwise_sum(&v) - naive).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn storage_round_trip_prop(bytes in proptest::collection::vec(any::<u8>(), 12)) {
            let img = ImageTensor::from_storage_u8(3, 2, 2, &bytes).unwrap();
            prop_assert_eq!(img.to_storage_u8(), bytes);
        }

        #[test]
        fn quantization_error_bounded(vals in proptest::collection::vec(-1.0f64..1.0, 12)) {
            let img = ImageTensor::from_vec(3, 2, 2, vals.clone()).unwrap();
            let back = ImageTensor::from_storage_u8(3, 2, 2, &img.to_storage_u8()).unwrap();
            for (a, b) in vals.iter().zip(back.data()) {
                // one storage level is 1/127.5 in model units
                prop_assert!((a - b).abs() <= 0.5 / 127.5 + 1e-12);
            }
        }
    }
}
