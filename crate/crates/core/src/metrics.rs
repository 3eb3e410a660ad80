//! Objective fusion-quality metrics: average gradient, entropy, mutual
//! information, gray-level difference, spatial frequency, plus SSIM reuse.
//!
//! Range conventions: AG, EN, MI, and GLD are computed on the [0,255] byte
//! range; SF and SSIM on the [0,1] unit range. `GrayImage` carries a range
//! tag and each metric converts automatically.

use crate::error::{Error, Result};
use crate::loss::{ssim, LossConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Range {
    Unit,
    Byte,
}

#[derive(Debug, Clone)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub range: Range,
    /// Row-major, `height * width` values.
    pub data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, range: Range, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::dimension("pixel count", width * height, data.len()));
        }
        Ok(GrayImage {
            width,
            height,
            range,
            data,
        })
    }

    pub fn constant(width: usize, height: usize, range: Range, value: f64) -> Self {
        GrayImage {
            width,
            height,
            range,
            data: vec![value; width * height],
        }
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    /// Pixel value scaled to the byte range (no rounding).
    #[inline]
    pub fn byte_at(&self, row: usize, col: usize) -> f64 {
        match self.range {
            Range::Byte => self.at(row, col),
            Range::Unit => self.at(row, col) * 255.0,
        }
    }

    /// Pixel value scaled to the unit range.
    #[inline]
    pub fn unit_at(&self, row: usize, col: usize) -> f64 {
        match self.range {
            Range::Unit => self.at(row, col),
            Range::Byte => self.at(row, col) / 255.0,
        }
    }

    /// 256-bin index: round to nearest integer on the byte range, clamped.
    #[inline]
    pub fn bin_at(&self, row: usize, col: usize) -> usize {
        let v = self.byte_at(row, col).round();
        v.clamp(0.0, 255.0) as usize
    }

    /// Unit-range tensor view (1×1×H×W) for SSIM evaluation.
    pub fn to_unit_tensor(&self) -> Tensor {
        let mut t = Tensor::zeros(1, 1, self.height, self.width);
        for r in 0..self.height {
            for c in 0..self.width {
                t.set(0, 0, r, c, self.unit_at(r, c));
            }
        }
        t
    }

    fn require_grid(&self, what: &'static str) -> Result<()> {
        if self.width < 2 || self.height < 2 {
            return Err(Error::Parameter {
                name: what,
                message: format!(
                    "needs at least 2x2 pixels, got {}x{}",
                    self.width, self.height
                ),
            });
        }
        Ok(())
    }

    fn same_size(&self, other: &GrayImage) -> Result<()> {
        if self.width != other.width {
            return Err(Error::dimension("width", self.width, other.width));
        }
        if self.height != other.height {
            return Err(Error::dimension("height", self.height, other.height));
        }
        Ok(())
    }
}

/// Mean over the (M−1)(N−1) interior grid of sqrt((Δ_h² + Δ_v²)/2) with
/// forward differences, on the byte range.
pub fn average_gradient(img: &GrayImage) -> Result<f64> {
    img.require_grid("average_gradient")?;
    let mut sum = 0.0;
    for r in 0..img.height - 1 {
        for c in 0..img.width - 1 {
            let dh = img.byte_at(r, c + 1) - img.byte_at(r, c);
            let dv = img.byte_at(r + 1, c) - img.byte_at(r, c);
            sum += ((dh * dh + dv * dv) / 2.0).sqrt();
        }
    }
    Ok(sum / ((img.height - 1) * (img.width - 1)) as f64)
}

fn histogram(img: &GrayImage) -> [u64; 256] {
    let mut h = [0u64; 256];
    for r in 0..img.height {
        for c in 0..img.width {
            h[img.bin_at(r, c)] += 1;
        }
    }
    h
}

fn entropy_of_counts(counts: &[u64], total: u64) -> f64 {
    let total = total as f64;
    let mut e = 0.0;
    for &n in counts {
        if n > 0 {
            let p = n as f64 / total;
            e -= p * p.log2();
        }
    }
    e
}

/// Shannon entropy of the 256-bin byte-range histogram, in bits.
pub fn entropy(img: &GrayImage) -> f64 {
    let h = histogram(img);
    entropy_of_counts(&h, (img.width * img.height) as u64)
}

fn joint_entropy(a: &GrayImage, b: &GrayImage) -> f64 {
    let mut h = vec![0u64; 256 * 256];
    for r in 0..a.height {
        for c in 0..a.width {
            h[a.bin_at(r, c) * 256 + b.bin_at(r, c)] += 1;
        }
    }
    entropy_of_counts(&h, (a.width * a.height) as u64)
}

/// MI = [E(I_1)+E(I_f)−E(I_1,I_f)] + [E(I_2)+E(I_f)−E(I_2,I_f)], joint
/// entropies from 256×256 histograms.
pub fn mutual_information(i1: &GrayImage, i2: &GrayImage, fused: &GrayImage) -> Result<f64> {
    i1.same_size(fused)?;
    i2.same_size(fused)?;
    let ef = entropy(fused);
    let term1 = entropy(i1) + ef - joint_entropy(i1, fused);
    let term2 = entropy(i2) + ef - joint_entropy(i2, fused);
    Ok(term1 + term2)
}

/// Mean over the (M−1)(N−1) interior grid of |Δ_v| + |Δ_h|, byte range.
/// The last row and column are dropped symmetrically.
pub fn gray_level_difference(img: &GrayImage) -> Result<f64> {
    img.require_grid("gray_level_difference")?;
    let mut sum = 0.0;
    for r in 0..img.height - 1 {
        for c in 0..img.width - 1 {
            let dh = img.byte_at(r, c + 1) - img.byte_at(r, c);
            let dv = img.byte_at(r + 1, c) - img.byte_at(r, c);
            sum += dh.abs() + dv.abs();
        }
    }
    Ok(sum / ((img.height - 1) * (img.width - 1)) as f64)
}

/// SF = sqrt(H² + V²) with H, V the first-difference sums normalized by
/// 1/(MN), on the unit range.
pub fn spatial_frequency(img: &GrayImage) -> Result<f64> {
    img.require_grid("spatial_frequency")?;
    let mn = (img.width * img.height) as f64;
    let mut h = 0.0;
    for r in 0..img.height {
        for c in 0..img.width - 1 {
            let d = img.unit_at(r, c + 1) - img.unit_at(r, c);
            h += d * d;
        }
    }
    let mut v = 0.0;
    for r in 0..img.height - 1 {
        for c in 0..img.width {
            let d = img.unit_at(r + 1, c) - img.unit_at(r, c);
            v += d * d;
        }
    }
    Ok((h / mn + v / mn).sqrt())
}

#[derive(Debug, Clone)]
pub struct MetricRow {
    pub image: String,
    pub ag: f64,
    pub en: f64,
    pub mi: f64,
    pub gld: f64,
    pub sf: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, Default)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    pub fn push(&mut self, row: MetricRow) {
        self.rows.push(row);
    }

    pub fn mean_row(&self) -> Option<MetricRow> {
        if self.rows.is_empty() {
            return None;
        }
        let n = self.rows.len() as f64;
        let mut m = MetricRow {
            image: "mean".to_string(),
            ag: 0.0,
            en: 0.0,
            mi: 0.0,
            gld: 0.0,
            sf: 0.0,
            ssim: 0.0,
        };
        for r in &self.rows {
            m.ag += r.ag;
            m.en += r.en;
            m.mi += r.mi;
            m.gld += r.gld;
            m.sf += r.sf;
            m.ssim += r.ssim;
        }
        m.ag /= n;
        m.en /= n;
        m.mi /= n;
        m.gld /= n;
        m.sf /= n;
        m.ssim /= n;
        Some(m)
    }

    /// CSV with header, one row per image, and a trailing mean row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("image,AG,EN,MI,GLD,SF,SSIM\n");
        let fmt = |r: &MetricRow| {
            format!(
                "{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}\n",
                r.image, r.ag, r.en, r.mi, r.gld, r.sf, r.ssim
            )
        };
        for r in &self.rows {
            out.push_str(&fmt(r));
        }
        if let Some(m) = self.mean_row() {
            out.push_str(&fmt(&m));
        }
        out
    }
}

/// All five metrics of the fused image plus SSIM against each source
/// (reported as the mean of the two), with range conversions applied per
/// metric convention.
pub fn evaluate_pair(
    identifier: &str,
    i1: &GrayImage,
    i2: &GrayImage,
    fused: &GrayImage,
) -> Result<MetricRow> {
    i1.same_size(fused)?;
    i2.same_size(fused)?;
    let cfg = LossConfig::default();
    let tf = fused.to_unit_tensor();
    let (s1, _, _) = ssim(&tf, &i1.to_unit_tensor(), &cfg)?;
    let (s2, _, _) = ssim(&tf, &i2.to_unit_tensor(), &cfg)?;
    Ok(MetricRow {
        image: identifier.to_string(),
        ag: average_gradient(fused)?,
        en: entropy(fused),
        mi: mutual_information(i1, i2, fused)?,
        gld: gray_level_difference(fused)?,
        sf: spatial_frequency(fused)?,
        ssim: (s1 + s2) / 2.0,
    })
}
