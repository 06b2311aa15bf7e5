//! Two small segmentation models with hand-written gradients.
//!
//! Both map an `h × w × 3` image to `h × w × 3` class scores and train with
//! per-pixel softmax cross-entropy, averaged over every pixel of every sample
//! in the batch.
//!
//! * [`ModelKind::LinearPixel`]: an independent affine map from the pixel's
//!   RGB value to 3 scores at every position (`weight[h][w][class][channel]`,
//!   `bias[h][w][class]`). The weight gradient at a position is the outer
//!   product of the residual and the input pixel.
//! * [`ModelKind::MicroDualBranch`]: a local branch (depthwise 3×3
//!   convolution, zero padded) and a global branch (4×4 average pool,
//!   per-cell affine 3→3, nearest upsample) summed, followed by a per-pixel
//!   affine 3→3 to class scores. Height and width must be multiples of 4.

use serde::{Deserialize, Serialize};

use super::dataset::Sample;
use super::{LearnError, NUM_CLASSES};
use crate::params::{LayoutSpec, ParamVector};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    LinearPixel,
    MicroDualBranch,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::LinearPixel => "linear_pixel",
            ModelKind::MicroDualBranch => "micro_dual_branch",
        }
    }

    /// Half-width of the uniform weight initialization.
    pub fn init_bound(self) -> f64 {
        match self {
            ModelKind::LinearPixel => 0.1,
            ModelKind::MicroDualBranch => 0.5,
        }
    }
}

const POOL: usize = 4;

// Offsets into the micro_dual_branch parameter vector.
const LW: usize = 0; // local.weight [3][3][3]
const LB: usize = 27; // local.bias [3]
const GW: usize = 30; // global.weight [3][3]
const GB: usize = 39; // global.bias [3]
const FW: usize = 42; // fuse.weight [3][3]
const FB: usize = 51; // fuse.bias [3]
const MICRO_LEN: usize = 54;

/// Model shape: kind plus image size, and the parameter layout they imply.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    kind: ModelKind,
    h: usize,
    w: usize,
    layout: LayoutSpec,
}

/// Architecture plus parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub arch: Architecture,
    pub params: ParamVector,
}

impl Model {
    pub fn new(arch: Architecture, params: ParamVector) -> Result<Self, LearnError> {
        arch.layout.check(&params)?;
        Ok(Self { arch, params })
    }
}

impl Architecture {
    pub fn new(kind: ModelKind, h: usize, w: usize) -> Result<Self, LearnError> {
        if h == 0 || w == 0 {
            return Err(LearnError::InvalidArgument("empty image size".into()));
        }
        let layout = match kind {
            ModelKind::LinearPixel => LayoutSpec::new([
                ("weight", vec![h, w, NUM_CLASSES, 3]),
                ("bias", vec![h, w, NUM_CLASSES]),
            ]),
            ModelKind::MicroDualBranch => {
                if !h.is_multiple_of(POOL) || !w.is_multiple_of(POOL) {
                    return Err(LearnError::ShapeMismatch(format!(
                        "micro_dual_branch needs sides divisible by {POOL}, got {h}x{w}"
                    )));
                }
                let layout = LayoutSpec::new([
                    ("local.weight", vec![3, 3, 3]),
                    ("local.bias", vec![3]),
                    ("global.weight", vec![NUM_CLASSES, 3]),
                    ("global.bias", vec![NUM_CLASSES]),
                    ("fuse.weight", vec![NUM_CLASSES, 3]),
                    ("fuse.bias", vec![NUM_CLASSES]),
                ]);
                debug_assert_eq!(layout.len(), MICRO_LEN);
                layout
            }
        };
        Ok(Self { kind, h, w, layout })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn pixels(&self) -> usize {
        self.h * self.w
    }

    pub fn layout(&self) -> &LayoutSpec {
        &self.layout
    }

    /// Zero biases, weights uniform in `±init_bound`.
    pub fn init(&self, seed: u64) -> ParamVector {
        let mut rng = seed::derived_stream(seed, seed::Role::Init, 0, 0);
        let bound = self.kind.init_bound();
        let mut values = vec![0.0; self.layout.len()];
        for layer in self.layout.layers() {
            if layer.name.ends_with("bias") {
                continue;
            }
            for v in &mut values[layer.range()] {
                *v = bound * (2.0 * seed::uniform(&mut rng) - 1.0);
            }
        }
        self.layout.vector(values).expect("init is finite")
    }

    pub fn with_params(&self, params: ParamVector) -> Result<Model, LearnError> {
        Model::new(self.clone(), params)
    }

    fn check_image(&self, image: &[f64]) -> Result<(), LearnError> {
        if image.len() != self.pixels() * 3 {
            return Err(LearnError::ShapeMismatch(format!(
                "image has {} values, model expects {}x{}x3",
                image.len(),
                self.h,
                self.w
            )));
        }
        Ok(())
    }

    fn check_sample(&self, s: &Sample<'_>) -> Result<(), LearnError> {
        self.check_image(s.image)?;
        if s.mask.len() != self.pixels() {
            return Err(LearnError::ShapeMismatch(format!(
                "mask has {} labels, model expects {}",
                s.mask.len(),
                self.pixels()
            )));
        }
        if let Some(&label) = s.mask.iter().find(|&&c| c as usize >= NUM_CLASSES) {
            return Err(LearnError::LabelOutOfRange(label));
        }
        Ok(())
    }

    /// Per-pixel class scores, `[h][w][3]`.
    pub fn logits(&self, params: &ParamVector, image: &[f64]) -> Result<Vec<f64>, LearnError> {
        self.layout.check(params)?;
        self.check_image(image)?;
        Ok(match self.kind {
            ModelKind::LinearPixel => self.linear_logits(params.values(), image),
            ModelKind::MicroDualBranch => self.micro_forward(params.values(), image).logits,
        })
    }

    /// Scores from the global branch alone (`fuse(global)`); only defined for
    /// `micro_dual_branch`.
    pub fn global_branch_logits(
        &self,
        params: &ParamVector,
        image: &[f64],
    ) -> Result<Vec<f64>, LearnError> {
        if self.kind != ModelKind::MicroDualBranch {
            return Err(LearnError::InvalidArgument(
                "global branch exists only in micro_dual_branch".into(),
            ));
        }
        self.layout.check(params)?;
        self.check_image(image)?;
        let p = params.values();
        let fwd = self.micro_forward(p, image);
        let mut out = vec![0.0; self.pixels() * 3];
        for (pix, o) in out.chunks_exact_mut(3).enumerate() {
            let q = self.cell_of(pix);
            let g = &fwd.glob[q * 3..q * 3 + 3];
            for k in 0..3 {
                o[k] = p[FB + k] + (0..3).fold(0.0, |acc, j| acc + p[FW + k * 3 + j] * g[j]);
            }
        }
        Ok(out)
    }

    pub fn predict(&self, params: &ParamVector, image: &[f64]) -> Result<Vec<u8>, LearnError> {
        Ok(argmax_classes(&self.logits(params, image)?))
    }

    /// Mean cross-entropy over all pixels of all samples.
    pub fn loss(&self, params: &ParamVector, batch: &[Sample<'_>]) -> Result<f64, LearnError> {
        self.layout.check(params)?;
        if batch.is_empty() {
            return Err(LearnError::InvalidArgument("empty batch".into()));
        }
        let mut total = 0.0;
        for s in batch {
            self.check_sample(s)?;
            let logits = match self.kind {
                ModelKind::LinearPixel => self.linear_logits(params.values(), s.image),
                ModelKind::MicroDualBranch => self.micro_forward(params.values(), s.image).logits,
            };
            for (z, &y) in logits.chunks_exact(3).zip(s.mask) {
                total += pixel_loss(z, y);
            }
        }
        Ok(total / (batch.len() * self.pixels()) as f64)
    }

    /// Mean loss and its exact gradient with respect to the parameters.
    pub fn loss_grad(
        &self,
        params: &ParamVector,
        batch: &[Sample<'_>],
    ) -> Result<(f64, ParamVector), LearnError> {
        self.layout.check(params)?;
        if batch.is_empty() {
            return Err(LearnError::InvalidArgument("empty batch".into()));
        }
        let p = params.values();
        let scale = 1.0 / (batch.len() * self.pixels()) as f64;
        let mut grad = vec![0.0; p.len()];
        let mut total = 0.0;
        for s in batch {
            self.check_sample(s)?;
            total += match self.kind {
                ModelKind::LinearPixel => self.linear_backward(p, s, scale, &mut grad, None),
                ModelKind::MicroDualBranch => self.micro_backward(p, s, scale, &mut grad, None),
            };
        }
        let loss = total * scale;
        if !loss.is_finite() {
            return Err(LearnError::NonFinite("loss".into()));
        }
        let grad = ParamVector::new(grad, params.layout_id())?;
        Ok((loss, grad))
    }

    /// Loss of one sample and its gradient with respect to the input image.
    pub fn input_grad(
        &self,
        params: &ParamVector,
        sample: Sample<'_>,
    ) -> Result<(f64, Vec<f64>), LearnError> {
        self.layout.check(params)?;
        self.check_sample(&sample)?;
        let p = params.values();
        let scale = 1.0 / self.pixels() as f64;
        let mut scratch = vec![0.0; p.len()];
        let mut dx = vec![0.0; sample.image.len()];
        let total = match self.kind {
            ModelKind::LinearPixel => self.linear_backward(p, &sample, scale, &mut scratch, Some(&mut dx)),
            ModelKind::MicroDualBranch => {
                self.micro_backward(p, &sample, scale, &mut scratch, Some(&mut dx))
            }
        };
        let loss = total * scale;
        if !loss.is_finite() || dx.iter().any(|v| !v.is_finite()) {
            return Err(LearnError::NonFinite("input gradient".into()));
        }
        Ok((loss, dx))
    }

    fn linear_logits(&self, p: &[f64], image: &[f64]) -> Vec<f64> {
        let bias = self.pixels() * 9;
        let mut out = vec![0.0; self.pixels() * 3];
        for (pix, (o, x)) in out.chunks_exact_mut(3).zip(image.chunks_exact(3)).enumerate() {
            for k in 0..3 {
                let wk = &p[pix * 9 + k * 3..pix * 9 + k * 3 + 3];
                o[k] = p[bias + pix * 3 + k] + wk[0] * x[0] + wk[1] * x[1] + wk[2] * x[2];
            }
        }
        out
    }

    /// Adds `scale · ∂loss/∂θ` into `grad` (and `∂loss/∂x` into `dx`); returns
    /// the summed (unscaled) loss.
    fn linear_backward(
        &self,
        p: &[f64],
        s: &Sample<'_>,
        scale: f64,
        grad: &mut [f64],
        mut dx: Option<&mut Vec<f64>>,
    ) -> f64 {
        let bias = self.pixels() * 9;
        let logits = self.linear_logits(p, s.image);
        let mut total = 0.0;
        for pix in 0..self.pixels() {
            let z = &logits[pix * 3..pix * 3 + 3];
            let y = s.mask[pix];
            total += pixel_loss(z, y);
            let r = residual(z, y, scale);
            let x = &s.image[pix * 3..pix * 3 + 3];
            for k in 0..3 {
                let base = pix * 9 + k * 3;
                for c in 0..3 {
                    grad[base + c] += r[k] * x[c];
                }
                grad[bias + pix * 3 + k] += r[k];
            }
            if let Some(dx) = dx.as_deref_mut() {
                for c in 0..3 {
                    dx[pix * 3 + c] += (0..3).fold(0.0, |acc, k| acc + r[k] * p[pix * 9 + k * 3 + c]);
                }
            }
        }
        total
    }

    fn cell_of(&self, pix: usize) -> usize {
        let (y, x) = (pix / self.w, pix % self.w);
        (y / POOL) * (self.w / POOL) + x / POOL
    }

    fn micro_forward(&self, p: &[f64], x: &[f64]) -> MicroCache {
        let (h, w) = (self.h, self.w);
        let (qh, qw) = (h / POOL, w / POOL);
        let mut local = vec![0.0; h * w * 3];
        for y in 0..h {
            for xx in 0..w {
                let pix = y * w + xx;
                for c in 0..3 {
                    let mut acc = p[LB + c];
                    for ky in 0..3 {
                        let yy = y as isize + ky as isize - 1;
                        if yy < 0 || yy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let xs = xx as isize + kx as isize - 1;
                            if xs < 0 || xs >= w as isize {
                                continue;
                            }
                            let src = (yy as usize * w + xs as usize) * 3 + c;
                            acc += p[LW + c * 9 + ky * 3 + kx] * x[src];
                        }
                    }
                    local[pix * 3 + c] = acc;
                }
            }
        }
        let mut pooled = vec![0.0; qh * qw * 3];
        for y in 0..h {
            for xx in 0..w {
                let q = (y / POOL) * qw + xx / POOL;
                for c in 0..3 {
                    pooled[q * 3 + c] += x[(y * w + xx) * 3 + c];
                }
            }
        }
        let inv = 1.0 / (POOL * POOL) as f64;
        pooled.iter_mut().for_each(|v| *v *= inv);
        let mut glob = vec![0.0; qh * qw * 3];
        for q in 0..qh * qw {
            for k in 0..3 {
                glob[q * 3 + k] =
                    p[GB + k] + (0..3).fold(0.0, |acc, c| acc + p[GW + k * 3 + c] * pooled[q * 3 + c]);
            }
        }
        let mut fused = vec![0.0; h * w * 3];
        let mut logits = vec![0.0; h * w * 3];
        for pix in 0..h * w {
            let q = self.cell_of(pix);
            for j in 0..3 {
                fused[pix * 3 + j] = local[pix * 3 + j] + glob[q * 3 + j];
            }
            let f = &fused[pix * 3..pix * 3 + 3];
            for k in 0..3 {
                logits[pix * 3 + k] =
                    p[FB + k] + (0..3).fold(0.0, |acc, j| acc + p[FW + k * 3 + j] * f[j]);
            }
        }
        MicroCache {
            pooled,
            glob,
            fused,
            logits,
        }
    }

    fn micro_backward(
        &self,
        p: &[f64],
        s: &Sample<'_>,
        scale: f64,
        grad: &mut [f64],
        mut dx: Option<&mut Vec<f64>>,
    ) -> f64 {
        let (h, w) = (self.h, self.w);
        let qw = w / POOL;
        let fwd = self.micro_forward(p, s.image);
        let x = s.image;
        let mut total = 0.0;
        let mut d_glob = vec![0.0; fwd.glob.len()];
        for y in 0..h {
            for xx in 0..w {
                let pix = y * w + xx;
                let z = &fwd.logits[pix * 3..pix * 3 + 3];
                let label = s.mask[pix];
                total += pixel_loss(z, label);
                let r = residual(z, label, scale);
                let f = &fwd.fused[pix * 3..pix * 3 + 3];
                let mut d_fused = [0.0; 3];
                for k in 0..3 {
                    for j in 0..3 {
                        grad[FW + k * 3 + j] += r[k] * f[j];
                        d_fused[j] += p[FW + k * 3 + j] * r[k];
                    }
                    grad[FB + k] += r[k];
                }
                let q = (y / POOL) * qw + xx / POOL;
                for c in 0..3 {
                    grad[LB + c] += d_fused[c];
                    d_glob[q * 3 + c] += d_fused[c];
                    for ky in 0..3 {
                        let yy = y as isize + ky as isize - 1;
                        if yy < 0 || yy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let xs = xx as isize + kx as isize - 1;
                            if xs < 0 || xs >= w as isize {
                                continue;
                            }
                            let src = (yy as usize * w + xs as usize) * 3 + c;
                            let tap = LW + c * 9 + ky * 3 + kx;
                            grad[tap] += d_fused[c] * x[src];
                            if let Some(dx) = dx.as_deref_mut() {
                                dx[src] += p[tap] * d_fused[c];
                            }
                        }
                    }
                }
            }
        }
        let cells = fwd.glob.len() / 3;
        let mut d_pooled = vec![0.0; cells * 3];
        for q in 0..cells {
            for k in 0..3 {
                let g = d_glob[q * 3 + k];
                grad[GB + k] += g;
                for c in 0..3 {
                    grad[GW + k * 3 + c] += g * fwd.pooled[q * 3 + c];
                    d_pooled[q * 3 + c] += p[GW + k * 3 + c] * g;
                }
            }
        }
        if let Some(dx) = dx {
            let inv = 1.0 / (POOL * POOL) as f64;
            for pix in 0..h * w {
                let q = self.cell_of(pix);
                for c in 0..3 {
                    dx[pix * 3 + c] += d_pooled[q * 3 + c] * inv;
                }
            }
        }
        total
    }
}

struct MicroCache {
    pooled: Vec<f64>,
    glob: Vec<f64>,
    fused: Vec<f64>,
    logits: Vec<f64>,
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn pixel_loss(z: &[f64], label: u8) -> f64 {
    log_sum_exp(z) - z[label as usize]
}

/// `scale · (softmax(z) − onehot(label))`.
fn residual(z: &[f64], label: u8, scale: f64) -> [f64; 3] {
    let lse = log_sum_exp(z);
    let mut r = [0.0; 3];
    for k in 0..3 {
        r[k] = (z[k] - lse).exp();
    }
    r[label as usize] -= 1.0;
    r.map(|v| v * scale)
}

/// Softmax probabilities of one pixel's scores.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(z);
    z.iter().map(|v| (v - lse).exp()).collect()
}

/// Argmax per pixel; ties go to the lower class id.
pub fn argmax_classes(logits: &[f64]) -> Vec<u8> {
    logits
        .chunks_exact(NUM_CLASSES)
        .map(|z| {
            let mut best = 0;
            for k in 1..NUM_CLASSES {
                if z[k] > z[best] {
                    best = k;
                }
            }
            best as u8
        })
        .collect()
}

pub fn forward_loss_grad(model: &Model, batch: &[Sample<'_>]) -> Result<(f64, ParamVector), LearnError> {
    model.arch.loss_grad(&model.params, batch)
}

pub fn predict(model: &Model, image: &[f64]) -> Result<Vec<u8>, LearnError> {
    model.arch.predict(&model.params, image)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learn::dataset::gen_dataset;

    fn arches() -> Vec<Architecture> {
        vec![
            Architecture::new(ModelKind::LinearPixel, 8, 8).unwrap(),
            Architecture::new(ModelKind::MicroDualBranch, 8, 8).unwrap(),
        ]
    }

    #[test]
    fn uniform_logits_give_ln3() {
        let ds = gen_dataset(2, 8, 8, 1).unwrap();
        for arch in arches() {
            let zero = arch.layout().zeros();
            let batch = [ds.sample(0), ds.sample(1)];
            let (loss, _) = arch.loss_grad(&zero, &batch).unwrap();
            assert!((loss - 3f64.ln()).abs() < 1e-12, "{loss}");
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let ds = gen_dataset(3, 8, 8, 2).unwrap();
        let batch = [ds.sample(0), ds.sample(1), ds.sample(2)];
        for arch in arches() {
            let params = arch.init(5);
            let (_, grad) = arch.loss_grad(&params, &batch).unwrap();
            let mut rng = seed::stream(3);
            for _ in 0..20 {
                let i = (seed::uniform(&mut rng) * params.len() as f64) as usize;
                let eps = 1e-5;
                let mut plus = params.to_vec();
                plus[i] += eps;
                let mut minus = params.to_vec();
                minus[i] -= eps;
                let lp = arch.loss(&arch.layout().vector(plus).unwrap(), &batch).unwrap();
                let lm = arch.loss(&arch.layout().vector(minus).unwrap(), &batch).unwrap();
                let fd = (lp - lm) / (2.0 * eps);
                let g = grad.values()[i];
                let denom = g.abs().max(fd.abs()).max(1e-8);
                assert!((g - fd).abs() / denom < 1e-6, "{:?} coord {i}: {g} vs {fd}", arch.kind());
            }
        }
    }

    #[test]
    fn input_gradient_matches_central_differences() {
        let ds = gen_dataset(1, 8, 8, 4).unwrap();
        for arch in arches() {
            let params = arch.init(6);
            let (_, dx) = arch.input_grad(&params, ds.sample(0)).unwrap();
            let mut rng = seed::stream(8);
            for _ in 0..20 {
                let i = (seed::uniform(&mut rng) * dx.len() as f64) as usize;
                let eps = 1e-5;
                let mut plus = ds.image(0).to_vec();
                plus[i] += eps;
                let mut minus = ds.image(0).to_vec();
                minus[i] -= eps;
                let lp = arch.loss(&params, &[Sample { image: &plus, mask: ds.mask(0) }]).unwrap();
                let lm = arch.loss(&params, &[Sample { image: &minus, mask: ds.mask(0) }]).unwrap();
                let fd = (lp - lm) / (2.0 * eps);
                let denom = dx[i].abs().max(fd.abs()).max(1e-8);
                assert!((dx[i] - fd).abs() / denom < 1e-6, "{:?} pixel {i}", arch.kind());
            }
        }
    }

    #[test]
    fn duplicated_batch_is_invariant() {
        let ds = gen_dataset(2, 8, 8, 7).unwrap();
        for arch in arches() {
            let params = arch.init(1);
            let single = [ds.sample(0), ds.sample(1)];
            let doubled = [ds.sample(0), ds.sample(1), ds.sample(0), ds.sample(1)];
            let (l1, g1) = arch.loss_grad(&params, &single).unwrap();
            let (l2, g2) = arch.loss_grad(&params, &doubled).unwrap();
            assert!((l1 - l2).abs() < 1e-14);
            for (a, b) in g1.values().iter().zip(g2.values()) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn dominant_bias_gives_constant_mask() {
        let ds = gen_dataset(1, 8, 8, 7).unwrap();
        for arch in arches() {
            let mut values = vec![0.0; arch.layout().len()];
            let bias = arch.layout().layers().iter().rev().find(|l| l.name.ends_with("bias")).unwrap();
            for chunk in values[bias.range()].chunks_exact_mut(3) {
                chunk[2] = 1e3;
            }
            let params = arch.layout().vector(values).unwrap();
            let mask = arch.predict(&params, ds.image(0)).unwrap();
            assert!(mask.iter().all(|&c| c == 2));
        }
    }

    #[test]
    fn argmax_shift_invariance() {
        let z = [0.3, -1.2, 0.29, 5.0, 5.5, -3.0];
        let shifted: Vec<f64> = z.iter().enumerate().map(|(i, v)| v + if i < 3 { 17.0 } else { -4.0 }).collect();
        assert_eq!(argmax_classes(&z), argmax_classes(&shifted));
        assert_eq!(argmax_classes(&z), vec![0, 1]);
    }

    #[test]
    fn prediction_is_deterministic() {
        let ds = gen_dataset(1, 8, 8, 9).unwrap();
        for arch in arches() {
            let params = arch.init(2);
            assert_eq!(arch.predict(&params, ds.image(0)).unwrap(), arch.predict(&params, ds.image(0)).unwrap());
        }
    }

    #[test]
    fn zeroed_local_branch_degenerates_to_global() {
        let ds = gen_dataset(3, 16, 16, 10).unwrap();
        let arch = Architecture::new(ModelKind::MicroDualBranch, 16, 16).unwrap();
        let mut values = arch.init(3).to_vec();
        for v in &mut values[LW..GW] {
            *v = 0.0;
        }
        let params = arch.layout().vector(values).unwrap();
        for i in 0..3 {
            let full = arch.logits(&params, ds.image(i)).unwrap();
            let global = arch.global_branch_logits(&params, ds.image(i)).unwrap();
            assert_eq!(argmax_classes(&full), argmax_classes(&global));
            for (a, b) in full.iter().zip(&global) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn init_zero_biases_bounded_weights() {
        for arch in arches() {
            let p = arch.init(11);
            assert_eq!(p, arch.init(11));
            for layer in arch.layout().layers() {
                let vals = &p.values()[layer.range()];
                if layer.name.ends_with("bias") {
                    assert!(vals.iter().all(|&v| v == 0.0));
                } else {
                    assert!(vals.iter().all(|v| v.abs() <= arch.kind().init_bound()));
                }
            }
        }
    }

    #[test]
    fn shape_errors() {
        assert!(Architecture::new(ModelKind::MicroDualBranch, 10, 8).is_err());
        let arch = Architecture::new(ModelKind::LinearPixel, 8, 8).unwrap();
        let p = arch.init(0);
        assert!(matches!(arch.predict(&p, &[0.0; 10]), Err(LearnError::ShapeMismatch(_))));
        let image = vec![0.5; 8 * 8 * 3];
        let mask = vec![0u8; 7];
        assert!(arch.loss_grad(&p, &[Sample { image: &image, mask: &mask }]).is_err());
        let other = LayoutSpec::new([("x", vec![1])]).zeros();
        assert!(arch.logits(&other, &image).is_err());
    }
}
