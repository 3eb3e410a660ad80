//! The four-term training objective: MSE/MAE reconstruction, windowed
//! SSIM against a constructed contrast/structure target, and the weight-map
//! sum constraint. Every term carries its analytic gradient.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReconLoss {
    Mse,
    Mae,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Weight-map sum target.
    pub tau: f64,
    /// Contrast gain of the constructed target.
    pub xi: f64,
    /// SSIM stability constant.
    pub ssim_const: f64,
    /// Side of the non-overlapping statistics windows; 0 means a single
    /// window spanning the whole image.
    pub window: usize,
    pub recon: ReconLoss,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: 1.0,
            xi: 1.7,
            ssim_const: 9e-4,
            window: 16,
            recon: ReconLoss::Mse,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau <= 0.0 {
            return Err(Error::Parameter {
                name: "tau",
                message: format!("must be positive, got {}", self.tau),
            });
        }
        if self.xi <= 0.0 {
            return Err(Error::Parameter {
                name: "xi",
                message: format!("must be positive, got {}", self.xi),
            });
        }
        if self.ssim_const <= 0.0 {
            return Err(Error::Parameter {
                name: "ssim_const",
                message: format!("must be positive, got {}", self.ssim_const),
            });
        }
        Ok(())
    }
}

/// Scalar loss values plus gradients with respect to the network outputs.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub l_i: f64,
    pub l_v: f64,
    pub l_f: f64,
    pub l_m: f64,
    pub total: f64,
    pub grad_ir1: Tensor,
    pub grad_ir2: Tensor,
    pub grad_if: Tensor,
    pub grad_w1: Tensor,
    pub grad_w2: Tensor,
}

fn check_shapes(a: &Tensor, b: &Tensor, context: &'static str) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::dimension_ctx("shape", a.len(), b.len(), context));
    }
    Ok(())
}

/// Mean squared error over all elements, with gradient 2(x - target)/N.
pub fn mse_loss(x: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    check_shapes(x, target, "mse_loss")?;
    let n = x.len() as f64;
    let mut grad = Tensor::zeros(x.batch, x.channels, x.height, x.width);
    let mut sum = 0.0;
    for i in 0..x.len() {
        let d = x.data[i] - target.data[i];
        sum += d * d;
        grad.data[i] = 2.0 * d / n;
    }
    Ok((sum / n, grad))
}

/// Mean absolute error; subgradient 0 at the kink.
pub fn mae_loss(x: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    check_shapes(x, target, "mae_loss")?;
    let n = x.len() as f64;
    let mut grad = Tensor::zeros(x.batch, x.channels, x.height, x.width);
    let mut sum = 0.0;
    for i in 0..x.len() {
        let d = x.data[i] - target.data[i];
        sum += d.abs();
        grad.data[i] = if d > 0.0 {
            1.0 / n
        } else if d < 0.0 {
            -1.0 / n
        } else {
            0.0
        };
    }
    Ok((sum / n, grad))
}

/// Non-overlapping window over one (batch, channel) plane. Windows at the
/// right/bottom edge may be smaller when the side does not divide the image.
struct Window {
    base: usize, // index of the top-left pixel within the tensor data
    rows: usize,
    cols: usize,
    stride: usize, // row stride (image width)
}

impl Window {
    fn pixels(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.rows).flat_map(move |r| (0..self.cols).map(move |c| self.base + r * self.stride + c))
    }

    fn count(&self) -> usize {
        self.rows * self.cols
    }
}

fn windows(t: &Tensor, side: usize) -> Vec<Window> {
    let (h, w) = (t.height, t.width);
    let side = if side == 0 { h.max(w) } else { side };
    let mut out = Vec::new();
    for b in 0..t.batch {
        for c in 0..t.channels {
            let plane = ((b * t.channels) + c) * h * w;
            let mut y = 0;
            while y < h {
                let rows = side.min(h - y);
                let mut x = 0;
                while x < w {
                    let cols = side.min(w - x);
                    out.push(Window {
                        base: plane + y * w + x,
                        rows,
                        cols,
                        stride: w,
                    });
                    x += side;
                }
                y += side;
            }
        }
    }
    out
}

const FLAT_EPS: f64 = 1e-12;

/// Builds the expected fusion result from the two sources: per window, the
/// larger contrast magnitude paired with the normalized summed structure,
/// scaled by xi. Flat windows in both sources yield zero.
pub fn build_ssim_target(i1: &Tensor, i2: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    check_shapes(i1, i2, "build_ssim_target")?;
    let mut out = Tensor::zeros(i1.batch, i1.channels, i1.height, i1.width);
    for win in windows(i1, cfg.window) {
        let n = win.count() as f64;
        let mut mu1 = 0.0;
        let mut mu2 = 0.0;
        for p in win.pixels() {
            mu1 += i1.data[p];
            mu2 += i2.data[p];
        }
        mu1 /= n;
        mu2 /= n;

        let mut c1sq = 0.0;
        let mut c2sq = 0.0;
        for p in win.pixels() {
            let d1 = i1.data[p] - mu1;
            let d2 = i2.data[p] - mu2;
            c1sq += d1 * d1;
            c2sq += d2 * d2;
        }
        let c1 = c1sq.sqrt();
        let c2 = c2sq.sqrt();
        let c_bar = c1.max(c2);
        if c_bar <= FLAT_EPS {
            continue; // both flat: target stays zero in this window
        }

        // S_n = (I_n - mu_n) / C_n, zero for a flat source.
        // sum = S_1 + S_2; S_bar = sum / ||sum||.
        let mut sum_norm_sq = 0.0;
        let mut sums = Vec::with_capacity(win.count());
        for p in win.pixels() {
            let s1 = if c1 > FLAT_EPS {
                (i1.data[p] - mu1) / c1
            } else {
                0.0
            };
            let s2 = if c2 > FLAT_EPS {
                (i2.data[p] - mu2) / c2
            } else {
                0.0
            };
            let s = s1 + s2;
            sum_norm_sq += s * s;
            sums.push(s);
        }
        let sum_norm = sum_norm_sq.sqrt();
        if sum_norm <= FLAT_EPS {
            continue; // exact structure cancellation
        }
        for (k, p) in win.pixels().enumerate() {
            out.data[p] = cfg.xi * c_bar * sums[k] / sum_norm;
        }
    }
    Ok(out)
}

/// Windowed SSIM in contrast/structure form: per window
/// (2*cov + C)/(var_a + var_b + C) with population statistics, averaged
/// over windows. Returns the value and analytic gradients for both inputs.
pub fn ssim(a: &Tensor, b: &Tensor, cfg: &LossConfig) -> Result<(f64, Tensor, Tensor)> {
    check_shapes(a, b, "ssim")?;
    let c = cfg.ssim_const;
    let wins = windows(a, cfg.window);
    let n_wins = wins.len() as f64;
    let mut total = 0.0;
    let mut grad_a = Tensor::zeros(a.batch, a.channels, a.height, a.width);
    let mut grad_b = Tensor::zeros(a.batch, a.channels, a.height, a.width);

    for win in &wins {
        let n = win.count() as f64;
        let mut mu_a = 0.0;
        let mut mu_b = 0.0;
        for p in win.pixels() {
            mu_a += a.data[p];
            mu_b += b.data[p];
        }
        mu_a /= n;
        mu_b /= n;

        let mut var_a = 0.0;
        let mut var_b = 0.0;
        let mut cov = 0.0;
        for p in win.pixels() {
            let da = a.data[p] - mu_a;
            let db = b.data[p] - mu_b;
            var_a += da * da;
            var_b += db * db;
            cov += da * db;
        }
        var_a /= n;
        var_b /= n;
        cov /= n;

        let num = 2.0 * cov + c;
        let den = var_a + var_b + c;
        let s = num / den;
        total += s;

        // d s / d a_p = [2 (b_p - mu_b)/n * den - num * 2 (a_p - mu_a)/n] / den^2
        let scale = 1.0 / (n_wins * den * den);
        for p in win.pixels() {
            let da = a.data[p] - mu_a;
            let db = b.data[p] - mu_b;
            grad_a.data[p] += scale * (2.0 * db / n * den - num * 2.0 * da / n);
            grad_b.data[p] += scale * (2.0 * da / n * den - num * 2.0 * db / n);
        }
    }
    Ok((total / n_wins, grad_a, grad_b))
}

/// 1 - SSIM(target, fused); the target is rebuilt from the sources and is
/// a constant during differentiation.
pub fn fusion_loss(
    i_f: &Tensor,
    i1: &Tensor,
    i2: &Tensor,
    cfg: &LossConfig,
) -> Result<(f64, Tensor)> {
    check_shapes(i_f, i1, "fusion_loss")?;
    let target = build_ssim_target(i1, i2, cfg)?;
    let (s, _, mut grad_f) = ssim(&target, i_f, cfg)?;
    for g in &mut grad_f.data {
        *g = -*g;
    }
    Ok((1.0 - s, grad_f))
}

/// Mean over pixels of |tau - W1 - W2|, subgradient 0 at the kink.
pub fn weight_map_loss(
    w1: &Tensor,
    w2: &Tensor,
    cfg: &LossConfig,
) -> Result<(f64, Tensor, Tensor)> {
    check_shapes(w1, w2, "weight_map_loss")?;
    let n = w1.len() as f64;
    let mut sum = 0.0;
    let mut grad = Tensor::zeros(w1.batch, w1.channels, w1.height, w1.width);
    for i in 0..w1.len() {
        let r = cfg.tau - w1.data[i] - w2.data[i];
        sum += r.abs();
        // d|r|/dW = -sign(r)
        grad.data[i] = if r > 0.0 {
            -1.0 / n
        } else if r < 0.0 {
            1.0 / n
        } else {
            0.0
        };
    }
    // identical gradient for both maps
    Ok((sum / n, grad.clone(), grad))
}

/// Unweighted sum of the four terms; reconstruction penalty selectable
/// between MSE and MAE.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    i_r1: &Tensor,
    i_r2: &Tensor,
    i_f: &Tensor,
    w1: &Tensor,
    w2: &Tensor,
    i1: &Tensor,
    i2: &Tensor,
    cfg: &LossConfig,
) -> Result<LossTerms> {
    let recon = match cfg.recon {
        ReconLoss::Mse => mse_loss,
        ReconLoss::Mae => mae_loss,
    };
    let (l_i, grad_ir1) = recon(i_r1, i1)?;
    let (l_v, grad_ir2) = recon(i_r2, i2)?;
    let (l_f, grad_if) = fusion_loss(i_f, i1, i2, cfg)?;
    let (l_m, grad_w1, grad_w2) = weight_map_loss(w1, w2, cfg)?;
    Ok(LossTerms {
        l_i,
        l_v,
        l_f,
        l_m,
        total: l_i + l_v + l_f + l_m,
        grad_ir1,
        grad_ir2,
        grad_if,
        grad_w1,
        grad_w2,
    })
}

impl LossTerms {
    /// Names the first non-finite term, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        for (name, value) in [
            ("L_I", self.l_i),
            ("L_V", self.l_v),
            ("L_F", self.l_f),
            ("L_M", self.l_m),
        ] {
            if !value.is_finite() {
                return Some(name);
            }
        }
        None
    }
}
