//! Point annotations to density maps.
//!
//! A head at sub-pixel `(x, y)` lands on pixel `(row, col) = (⌊y + ½⌋, ⌊x + ½⌋)`
//! (clamped to the last row/column for coordinates in the final half pixel).
//! Smoothing stamps a truncated Gaussian per occupied pixel and renormalizes
//! the stamp after boundary clipping, so mass equals head count.

use serde::{Deserialize, Serialize};

use crate::error::{validation, Result};

/// Sub-pixel head location; `x` is the column axis, `y` the row axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

impl From<[f64; 2]> for Point {
    fn from([x, y]: [f64; 2]) -> Self {
        Self { x, y }
    }
}

impl From<Point> for [f64; 2] {
    fn from(p: Point) -> Self {
        [p.x, p.y]
    }
}

/// Non-negative field of persons per cell, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMap {
    height: usize,
    width: usize,
    stride: usize,
    data: Vec<f64>,
}

impl DensityMap {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            stride: 1,
            data: vec![0.0; height * width],
        }
    }

    /// Wraps a row-major buffer. Entries must be finite and non-negative.
    pub fn from_vec(height: usize, width: usize, stride: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || stride == 0 {
            return Err(validation!(
                "density map needs positive shape and stride, got {height}x{width} stride {stride}"
            ));
        }
        if data.len() != height * width {
            return Err(validation!(
                "density buffer has {} entries, expected {}x{}",
                data.len(),
                height,
                width
            ));
        }
        if let Some(i) = data.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(validation!(
                "density entry {} at ({}, {}) is not a non-negative finite value",
                data[i],
                i / width,
                i % width
            ));
        }
        Ok(Self {
            height,
            width,
            stride,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    /// Total mass, i.e. the count this map represents.
    pub fn mass(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Elementwise sum of two equally shaped maps.
    pub fn add(&self, other: &DensityMap) -> Result<DensityMap> {
        if self.shape() != other.shape() {
            return Err(validation!(
                "cannot add {:?} and {:?} density maps",
                self.shape(),
                other.shape()
            ));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Self { data, ..*self })
    }

    /// Mirror along the column axis.
    pub fn flip_horizontal(&self) -> DensityMap {
        let mut data = Vec::with_capacity(self.data.len());
        for row in self.data.chunks(self.width) {
            data.extend(row.iter().rev());
        }
        Self { data, ..*self }
    }

    /// Rectangular window `[top, top+h) x [left, left+w)`.
    pub fn window(&self, top: usize, left: usize, h: usize, w: usize) -> Result<DensityMap> {
        if top + h > self.height || left + w > self.width || h == 0 || w == 0 {
            return Err(validation!(
                "window {h}x{w} at ({top}, {left}) exceeds {}x{} map",
                self.height,
                self.width
            ));
        }
        let mut data = Vec::with_capacity(h * w);
        for r in top..top + h {
            let start = r * self.width + left;
            data.extend_from_slice(&self.data[start..start + w]);
        }
        Ok(Self {
            height: h,
            width: w,
            stride: self.stride,
            data,
        })
    }

    /// Formats the grid as comma-separated rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in self.data.chunks(self.width) {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }
}

/// Pixel that a head at `p` falls on, or an error if `p` is outside the grid.
pub fn head_pixel(p: Point, height: usize, width: usize) -> Result<(usize, usize)> {
    let inside = |v: f64, n: usize| v.is_finite() && v >= 0.0 && v < n as f64;
    if !inside(p.x, width) || !inside(p.y, height) {
        return Err(validation!(
            "head ({}, {}) lies outside the {}x{} image",
            p.x,
            p.y,
            height,
            width
        ));
    }
    let round = |v: f64, n: usize| ((v + 0.5).floor() as usize).min(n - 1);
    Ok((round(p.y, height), round(p.x, width)))
}

/// Binary head-center field: each head adds one at its pixel.
pub fn build_binary_map(heads: &[Point], shape: (usize, usize)) -> Result<DensityMap> {
    let (height, width) = shape;
    if height == 0 || width == 0 {
        return Err(validation!(
            "binary map needs a positive shape, got {height}x{width}"
        ));
    }
    let mut map = DensityMap::zeros(height, width);
    for &p in heads {
        let (r, c) = head_pixel(p, height, width)?;
        map.data[r * width + c] += 1.0;
    }
    Ok(map)
}

/// Half-width of the truncated kernel, `⌈3σ⌉`.
pub fn kernel_radius(sigma: f64) -> usize {
    (3.0 * sigma).ceil() as usize
}

/// Gaussian smoothing with per-stamp renormalization after clipping.
pub fn gaussian_density(binary: &DensityMap, sigma: f64) -> Result<DensityMap> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(validation!(
            "sigma must be a positive finite width, got {sigma}"
        ));
    }
    let (h, w) = binary.shape();
    let radius = kernel_radius(sigma) as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();

    let mut out = DensityMap {
        stride: binary.stride,
        ..DensityMap::zeros(h, w)
    };
    for (idx, &m) in binary.data.iter().enumerate() {
        if m == 0.0 {
            continue;
        }
        let (r, c) = ((idx / w) as isize, (idx % w) as isize);
        let r0 = (r - radius).max(0);
        let r1 = (r + radius).min(h as isize - 1);
        let c0 = (c - radius).max(0);
        let c1 = (c + radius).min(w as isize - 1);
        let tap = |d: isize| taps[(d + radius) as usize];
        let row_sum: f64 = (r0..=r1).map(|rr| tap(rr - r)).sum();
        let col_sum: f64 = (c0..=c1).map(|cc| tap(cc - c)).sum();
        let scale = m / (row_sum * col_sum);
        for rr in r0..=r1 {
            let wr = tap(rr - r) * scale;
            let base = rr as usize * w;
            for cc in c0..=c1 {
                out.data[base + cc as usize] += wr * tap(cc - c);
            }
        }
    }
    Ok(out)
}

/// Ground-truth density for a set of heads in one call.
pub fn render_density(heads: &[Point], shape: (usize, usize), sigma: f64) -> Result<DensityMap> {
    gaussian_density(&build_binary_map(heads, shape)?, sigma)
}

/// Non-overlapping `factor x factor` sum pooling.
pub fn downsample_density(d: &DensityMap, factor: usize) -> Result<DensityMap> {
    if factor == 0 {
        return Err(validation!("downsample factor must be positive"));
    }
    let (h, w) = d.shape();
    if h % factor != 0 || w % factor != 0 {
        return Err(validation!(
            "{h}x{w} density map is not divisible by factor {factor}"
        ));
    }
    let (oh, ow) = (h / factor, w / factor);
    let mut data = vec![0.0; oh * ow];
    for r in 0..h {
        let orow = (r / factor) * ow;
        for c in 0..w {
            data[orow + c / factor] += d.data[r * w + c];
        }
    }
    Ok(DensityMap {
        height: oh,
        width: ow,
        stride: d.stride * factor,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_annotations_give_zero_map() {
        let b = build_binary_map(&[], (8, 8)).unwrap();
        assert!(b.as_slice().iter().all(|&v| v == 0.0));
        let g = gaussian_density(&b, 2.0).unwrap();
        assert_eq!(g.mass(), 0.0);
    }

    #[test]
    fn rounding_puts_head_on_nearest_pixel() {
        let b = build_binary_map(&[Point::new(2.4, 3.6)], (8, 8)).unwrap();
        assert_eq!(b.get(4, 2), 1.0);
        assert_eq!(b.mass(), 1.0);
    }

    #[test]
    fn half_coordinates_round_up() {
        let b = build_binary_map(&[Point::new(2.5, 0.5)], (8, 8)).unwrap();
        assert_eq!(b.get(1, 3), 1.0);
    }

    #[test]
    fn last_half_pixel_clamps_inside() {
        let b = build_binary_map(&[Point::new(7.8, 7.6)], (8, 8)).unwrap();
        assert_eq!(b.get(7, 7), 1.0);
    }

    #[test]
    fn coincident_heads_accumulate() {
        let b = build_binary_map(&[Point::new(2.0, 3.0), Point::new(2.2, 3.1)], (8, 8)).unwrap();
        assert_eq!(b.get(3, 2), 2.0);
    }

    #[test]
    fn out_of_bounds_head_is_rejected() {
        for p in [
            Point::new(8.0, 1.0),
            Point::new(-0.1, 1.0),
            Point::new(1.0, f64::NAN),
        ] {
            let err = build_binary_map(&[p], (8, 8)).unwrap_err();
            assert!(matches!(err, crate::Error::Validation(_)), "{err}");
        }
    }

    #[test]
    fn centered_head_has_unit_mass() {
        let d = render_density(&[Point::new(32.0, 32.0)], (64, 64), 2.0).unwrap();
        assert!((d.mass() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn center_to_neighbor_ratio_matches_kernel() {
        let d = render_density(&[Point::new(10.0, 10.0)], (21, 21), 1.0).unwrap();
        // Independent evaluation of exp(-r^2 / 2σ^2) at r = 0 and r = 1.
        let expected = (0.0f64).exp() / (-0.5f64).exp();
        let center = d.get(10, 10);
        for (r, c) in [(9, 10), (11, 10), (10, 9), (10, 11)] {
            assert!((center / d.get(r, c) - expected).abs() < 1e-12);
        }
        assert!((expected - 1.6487).abs() < 1e-4);
    }

    #[test]
    fn corner_head_keeps_full_mass() {
        let d = render_density(&[Point::new(0.0, 0.0)], (16, 16), 3.0).unwrap();
        assert!((d.mass() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nonpositive_sigma_is_rejected() {
        let b = DensityMap::zeros(4, 4);
        assert!(gaussian_density(&b, 0.0).is_err());
        assert!(gaussian_density(&b, -1.0).is_err());
    }

    #[test]
    fn sum_pooling_of_ones() {
        let d = DensityMap::from_vec(4, 4, 1, vec![1.0; 16]).unwrap();
        let p = downsample_density(&d, 2).unwrap();
        assert_eq!(p.shape(), (2, 2));
        assert_eq!(p.stride(), 2);
        assert!(p.as_slice().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn full_reduction_gives_total() {
        let d = render_density(&[Point::new(3.0, 5.0), Point::new(6.2, 1.0)], (8, 8), 1.5).unwrap();
        let p = downsample_density(&d, 8).unwrap();
        assert_eq!(p.shape(), (1, 1));
        assert!((p.get(0, 0) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn indivisible_downsample_is_rejected() {
        let d = DensityMap::zeros(6, 8);
        assert!(downsample_density(&d, 4).is_err());
    }

    #[test]
    fn flip_twice_is_identity() {
        let d = render_density(&[Point::new(1.0, 2.0)], (6, 9), 1.0).unwrap();
        assert_eq!(d.flip_horizontal().flip_horizontal(), d);
    }

    #[test]
    fn from_vec_rejects_negative_entries() {
        assert!(DensityMap::from_vec(1, 2, 1, vec![0.5, -0.1]).is_err());
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        fn heads(h: usize, w: usize) -> impl Strategy<Value = Vec<Point>> {
            prop::collection::vec(
                (0.0..w as f64, 0.0..h as f64).prop_map(|(x, y)| Point::new(x, y)),
                0..40,
            )
        }

        proptest! {
            #[test]
            fn mass_is_conserved(hs in heads(32, 24), sigma in 0.5f64..4.0) {
                let d = render_density(&hs, (32, 24), sigma).unwrap();
                prop_assert!((d.mass() - hs.len() as f64).abs() <= 1e-4);
                let p = downsample_density(&d, 4).unwrap();
                prop_assert!((p.mass() - hs.len() as f64).abs() <= 1e-4);
            }

            #[test]
            fn smoothing_is_linear(a in heads(20, 20), b in heads(20, 20), sigma in 0.5f64..3.0) {
                let ba = build_binary_map(&a, (20, 20)).unwrap();
                let bb = build_binary_map(&b, (20, 20)).unwrap();
                let joint = gaussian_density(&ba.add(&bb).unwrap(), sigma).unwrap();
                let split = gaussian_density(&ba, sigma).unwrap()
                    .add(&gaussian_density(&bb, sigma).unwrap()).unwrap();
                for (x, y) in joint.as_slice().iter().zip(split.as_slice()) {
                    prop_assert!((x - y).abs() <= 1e-9);
                }
            }

            #[test]
            fn interior_shift_is_equivariant(dx in -4i32..=4, dy in -4i32..=4, sigma in 0.5f64..2.0) {
                let (h, w) = (40usize, 40usize);
                let base = Point::new(20.0, 20.0);
                let moved = Point::new(20.0 + dx as f64, 20.0 + dy as f64);
                let a = render_density(&[base], (h, w), sigma).unwrap();
                let b = render_density(&[moved], (h, w), sigma).unwrap();
                for r in 0..h as i32 {
                    for c in 0..w as i32 {
                        let (sr, sc) = (r - dy, c - dx);
                        let src = if (0..h as i32).contains(&sr) && (0..w as i32).contains(&sc) {
                            a.get(sr as usize, sc as usize)
                        } else {
                            0.0
                        };
                        prop_assert_eq!(b.get(r as usize, c as usize), src);
                    }
                }
            }
        }
    }
}
