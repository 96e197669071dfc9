//! The per-point refinement network φ (two affine layers with a rectifier
//! between) and projection head g (one affine layer), stored as a single
//! flat f64 parameter vector.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binio;
use crate::{Error, Result};

pub const WEIGHTS_FORMAT: &str = "refiner-weights";

/// Parameters of φ: C -> H -> C and g: C -> P.
///
/// The flat layout is `[w1 (HxC), b1 (H), w2 (CxH), b2 (C), wg (PxC),
/// bg (P)]`, all row-major, matching the on-disk `params.bin`.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinerWeights {
    channels: usize,
    hidden: usize,
    projection: usize,
    params: Vec<f64>,
    /// Provenance recorded in the weights file.
    pub seed: u64,
    pub iterations: usize,
}

#[derive(Serialize, Deserialize)]
struct WeightsMeta {
    format: String,
    format_version: u32,
    channels: usize,
    hidden: usize,
    projection: usize,
    seed: u64,
    iterations: usize,
}

pub(crate) struct Offsets {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
    pub wg: usize,
    pub bg: usize,
    pub total: usize,
}

pub(crate) fn offsets(c: usize, h: usize, p: usize) -> Offsets {
    let w1 = 0;
    let b1 = w1 + h * c;
    let w2 = b1 + h;
    let b2 = w2 + c * h;
    let wg = b2 + c;
    let bg = wg + p * c;
    Offsets { w1, b1, w2, b2, wg, bg, total: bg + p }
}

impl RefinerWeights {
    /// Seeded initialization: weights uniform in ±1/√fan_in, biases zero.
    pub fn init(channels: usize, hidden: usize, projection: usize, seed: u64) -> Result<Self> {
        if channels == 0 || hidden == 0 || projection == 0 {
            return Err(Error::InvalidValue(
                "refiner dimensions must all be positive".into(),
            ));
        }
        let off = offsets(channels, hidden, projection);
        let mut params = vec![0.0; off.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |range: std::ops::Range<usize>, fan_in: usize, params: &mut Vec<f64>| {
            let scale = 1.0 / (fan_in as f64).sqrt();
            for i in range {
                params[i] = rng.gen_range(-1.0..1.0) * scale;
            }
        };
        fill(off.w1..off.b1, channels, &mut params);
        fill(off.w2..off.b2, hidden, &mut params);
        fill(off.wg..off.bg, channels, &mut params);
        Ok(Self {
            channels,
            hidden,
            projection,
            params,
            seed,
            iterations: 0,
        })
    }

    /// φ as the identity map (requires H = C): unit diagonals, zero biases,
    /// g untouched at zero. Test and baseline helper.
    pub fn identity(channels: usize, projection: usize) -> Self {
        let off = offsets(channels, channels, projection);
        let mut params = vec![0.0; off.total];
        for i in 0..channels {
            params[off.w1 + i * channels + i] = 1.0;
            params[off.w2 + i * channels + i] = 1.0;
        }
        Self {
            channels,
            hidden: channels,
            projection,
            params,
            seed: 0,
            iterations: 0,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn projection(&self) -> usize {
        self.projection
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub(crate) fn layout(&self) -> Offsets {
        offsets(self.channels, self.hidden, self.projection)
    }

    /// Apply φ to one feature row.
    pub fn refine_row(&self, x: &[f64], out: &mut [f64]) {
        let off = self.layout();
        let (c, h) = (self.channels, self.hidden);
        let mut hid = vec![0.0; h];
        for i in 0..h {
            let row = &self.params[off.w1 + i * c..off.w1 + (i + 1) * c];
            let mut acc = self.params[off.b1 + i];
            for (w, xv) in row.iter().zip(x) {
                acc += w * xv;
            }
            hid[i] = acc.max(0.0);
        }
        for i in 0..c {
            let row = &self.params[off.w2 + i * h..off.w2 + (i + 1) * h];
            let mut acc = self.params[off.b2 + i];
            for (w, hv) in row.iter().zip(&hid) {
                acc += w * hv;
            }
            out[i] = acc;
        }
    }

    /// Apply φ row-wise to an N x C feature matrix.
    ///
    /// Pure inference: no gradient state, no per-scene fitting. This is the
    /// map applied frozen to novel scenes.
    pub fn refine(&self, features: &[f64]) -> Result<Vec<f64>> {
        if features.len() % self.channels != 0 {
            return Err(Error::Dimension {
                context: "refine features",
                expected: self.channels,
                actual: features.len(),
            });
        }
        let n = features.len() / self.channels;
        let mut out = vec![0.0; n * self.channels];
        for r in 0..n {
            let x = &features[r * self.channels..(r + 1) * self.channels];
            self.refine_row(x, &mut out[r * self.channels..(r + 1) * self.channels]);
        }
        Ok(out)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let meta = WeightsMeta {
            format: WEIGHTS_FORMAT.to_string(),
            format_version: crate::scan::FORMAT_VERSION,
            channels: self.channels,
            hidden: self.hidden,
            projection: self.projection,
            seed: self.seed,
            iterations: self.iterations,
        };
        binio::write_json(&dir.join("meta.json"), &meta)?;
        binio::write_f64_le(&dir.join("params.bin"), &self.params)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("meta.json");
        let meta: WeightsMeta = binio::read_json(&meta_path)?;
        if meta.format != WEIGHTS_FORMAT {
            return Err(Error::Format {
                path: meta_path.display().to_string(),
                reason: format!("bad magic: expected {WEIGHTS_FORMAT:?}, got {:?}", meta.format),
            });
        }
        let off = offsets(meta.channels, meta.hidden, meta.projection);
        let params = binio::read_f64_le(&dir.join("params.bin"), off.total)?;
        if let Some(i) = params.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidValue(format!("non-finite parameter at index {i}")));
        }
        Ok(Self {
            channels: meta.channels,
            hidden: meta.hidden,
            projection: meta.projection,
            params,
            seed: meta.seed,
            iterations: meta.iterations,
        })
    }
}

/// Batch forward pass through φ and g with cached intermediates for
/// backprop.
pub(crate) struct BatchForward {
    pub rows: usize,
    /// Pre-activation of the hidden layer, rows x H.
    pub pre: Vec<f64>,
    /// Rectified hidden activations, rows x H.
    pub hidden: Vec<f64>,
    /// Refined features y = φ(x), rows x C.
    pub refined: Vec<f64>,
    /// Projections z = g(y), rows x P.
    pub projected: Vec<f64>,
}

pub(crate) fn forward_batch(w: &RefinerWeights, x: &[f64], rows: usize) -> BatchForward {
    let off = w.layout();
    let (c, h, p) = (w.channels, w.hidden, w.projection);
    debug_assert_eq!(x.len(), rows * c);
    let mut pre = vec![0.0; rows * h];
    let mut hidden = vec![0.0; rows * h];
    let mut refined = vec![0.0; rows * c];
    let mut projected = vec![0.0; rows * p];
    for r in 0..rows {
        let xr = &x[r * c..(r + 1) * c];
        for i in 0..h {
            let wrow = &w.params[off.w1 + i * c..off.w1 + (i + 1) * c];
            let mut acc = w.params[off.b1 + i];
            for (wv, xv) in wrow.iter().zip(xr) {
                acc += wv * xv;
            }
            pre[r * h + i] = acc;
            hidden[r * h + i] = acc.max(0.0);
        }
        let hr = &hidden[r * h..(r + 1) * h];
        for i in 0..c {
            let wrow = &w.params[off.w2 + i * h..off.w2 + (i + 1) * h];
            let mut acc = w.params[off.b2 + i];
            for (wv, hv) in wrow.iter().zip(hr) {
                acc += wv * hv;
            }
            refined[r * c + i] = acc;
        }
        let yr = &refined[r * c..(r + 1) * c];
        for i in 0..p {
            let wrow = &w.params[off.wg + i * c..off.wg + (i + 1) * c];
            let mut acc = w.params[off.bg + i];
            for (wv, yv) in wrow.iter().zip(yr) {
                acc += wv * yv;
            }
            projected[r * p + i] = acc;
        }
    }
    BatchForward { rows, pre, hidden, refined, projected }
}

/// Backprop `d_projected` (rows x P) through g and φ into parameter
/// gradients, laid out like the parameter vector.
pub(crate) fn backward_batch(
    w: &RefinerWeights,
    x: &[f64],
    fwd: &BatchForward,
    d_projected: &[f64],
) -> Vec<f64> {
    let off = w.layout();
    let (c, h, p) = (w.channels, w.hidden, w.projection);
    let rows = fwd.rows;
    let mut grad = vec![0.0; off.total];
    let mut dy = vec![0.0; c];
    let mut dh = vec![0.0; h];
    for r in 0..rows {
        let xr = &x[r * c..(r + 1) * c];
        let hr = &fwd.hidden[r * h..(r + 1) * h];
        let yr = &fwd.refined[r * c..(r + 1) * c];
        let dzr = &d_projected[r * p..(r + 1) * p];

        // g: z = Wg y + bg
        dy.fill(0.0);
        for i in 0..p {
            let dzi = dzr[i];
            if dzi == 0.0 {
                continue;
            }
            let wrow = &w.params[off.wg + i * c..off.wg + (i + 1) * c];
            let grow = &mut grad[off.wg + i * c..off.wg + (i + 1) * c];
            for j in 0..c {
                grow[j] += dzi * yr[j];
                dy[j] += dzi * wrow[j];
            }
            grad[off.bg + i] += dzi;
        }

        // φ layer 2: y = W2 h + b2
        dh.fill(0.0);
        for i in 0..c {
            let dyi = dy[i];
            if dyi == 0.0 {
                continue;
            }
            let wrow = &w.params[off.w2 + i * h..off.w2 + (i + 1) * h];
            let grow = &mut grad[off.w2 + i * h..off.w2 + (i + 1) * h];
            for j in 0..h {
                grow[j] += dyi * hr[j];
                dh[j] += dyi * wrow[j];
            }
            grad[off.b2 + i] += dyi;
        }

        // φ layer 1 through the rectifier mask.
        for i in 0..h {
            if fwd.pre[r * h + i] <= 0.0 {
                continue;
            }
            let dui = dh[i];
            if dui == 0.0 {
                continue;
            }
            let grow = &mut grad[off.w1 + i * c..off.w1 + (i + 1) * c];
            for j in 0..c {
                grow[j] += dui * xr[j];
            }
            grad[off.b1 + i] += dui;
        }
    }
    grad
}

/// First-order optimizer with adaptive moments.
pub(crate) struct Adam {
    step: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: usize,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(dim: usize, step: f64) -> Self {
        Self {
            step,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
        }
    }

    pub fn update(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mhat = self.m[i] / b1t;
            let vhat = self.v[i] / b2t;
            params[i] -= self.step * mhat / (vhat.sqrt() + self.eps);
        }
    }
}
