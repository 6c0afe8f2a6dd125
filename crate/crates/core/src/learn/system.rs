//! Stacked least-squares system `𝕊 k ≈ 𝕋_p` over all training samples.
//!
//! The Gram matrix `𝕊ᵀ𝕊` does not depend on the steering pair when no
//! measurement is masked, so it is assembled once and shared. Each entry
//! `M[u, v]` is a box sum of the product image `s̃(j) s̃(j + v − u)` over the
//! window of kernel element `u`; summed-area tables make every entry O(1).
//! Masked data fall back to explicit row accumulation.

use nalgebra::DMatrix;
use ndarray::Array2;

use crate::conv::{correlate_residual, forward_convolve, pad_slowness, DelayField, KernelDims};
use crate::error::{Error, Result};
use crate::parallel;

use super::TrainingSample;

pub(crate) struct StackedSystem<'a> {
    samples: &'a [TrainingSample],
    pub(crate) dims: KernelDims,
    shared_gram: Option<DMatrix<f64>>,
}

impl<'a> StackedSystem<'a> {
    pub(crate) fn new(samples: &'a [TrainingSample], dims: KernelDims, pair_indices: &[usize]) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Data("at least one training sample is required".into()))?;
        let shape = first.slowness.dim();
        for (i, s) in samples.iter().enumerate() {
            if s.slowness.dim() != shape {
                return Err(Error::Shape(format!(
                    "sample {i} slowness is {:?}, sample 0 is {:?}",
                    s.slowness.dim(),
                    shape
                )));
            }
            if s.slowness.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!("sample {i} slowness has non-finite values")));
            }
            for &p in pair_indices {
                let d = s.delays.get(p).ok_or_else(|| {
                    Error::Shape(format!("sample {i} has no delay field for pair index {p}"))
                })?;
                if d.values.dim() != shape {
                    return Err(Error::Shape(format!(
                        "sample {i} pair {p} delays are {:?}, slowness is {:?}",
                        d.values.dim(),
                        shape
                    )));
                }
                if d.values.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Data(format!("sample {i} pair {p} delays are non-finite")));
                }
            }
        }
        if dims.kz != shape.0 {
            return Err(Error::Shape(format!(
                "kernel height {} must equal map depth {}",
                dims.kz, shape.0
            )));
        }
        let masked = samples
            .iter()
            .any(|s| pair_indices.iter().any(|&p| s.delays[p].mask.is_some()));
        let shared_gram = if masked {
            None
        } else {
            let maps: Vec<&Array2<f64>> = samples.iter().map(|s| &s.slowness).collect();
            Some(unmasked_gram(&maps, dims))
        };
        Ok(Self {
            samples,
            dims,
            shared_gram,
        })
    }

    /// `𝕊ᵀ𝕊` restricted to the valid measurements of pair `p`.
    pub(crate) fn gram(&self, p: usize) -> std::borrow::Cow<'_, DMatrix<f64>> {
        match &self.shared_gram {
            Some(g) => std::borrow::Cow::Borrowed(g),
            None => std::borrow::Cow::Owned(masked_gram(self.samples, p, self.dims)),
        }
    }

    /// `𝕊ᵀ𝕋_p` as a kernel image.
    pub(crate) fn rhs(&self, p: usize) -> Array2<f64> {
        let parts = parallel::map(self.samples, |s| {
            let d = &s.delays[p];
            let t = masked_values(d);
            correlate_residual(&s.slowness, self.dims, &t).expect("validated shapes")
        });
        sum_images(parts, (self.dims.kz, self.dims.kx))
    }

    /// Matrix-free `𝕊ᵀ𝕊 k` for pair `p`.
    pub(crate) fn apply_gram(&self, p: usize, kernel: &Array2<f64>) -> Array2<f64> {
        let parts = parallel::map(self.samples, |s| {
            let mut pred = forward_convolve(kernel, &s.slowness).expect("validated shapes");
            if let Some(m) = &s.delays[p].mask {
                ndarray::Zip::from(&mut pred).and(m).for_each(|v, &ok| {
                    if !ok {
                        *v = 0.0
                    }
                });
            }
            correlate_residual(&s.slowness, self.dims, &pred).expect("validated shapes")
        });
        sum_images(parts, (self.dims.kz, self.dims.kx))
    }

    /// Root-mean-square of `𝕊 k − 𝕋_p` over valid measurements.
    pub(crate) fn fit_rmse(&self, p: usize, kernel: &Array2<f64>) -> f64 {
        let parts = parallel::map(self.samples, |s| {
            let d = &s.delays[p];
            let pred = forward_convolve(kernel, &s.slowness).expect("validated shapes");
            let mut sum = 0.0;
            for ((z, x), v) in pred.indexed_iter() {
                if d.is_valid(z, x) {
                    let r = v - d.values[[z, x]];
                    sum += r * r;
                }
            }
            (sum, d.valid_count())
        });
        let (sum, n) = parts
            .into_iter()
            .fold((0.0, 0usize), |(a, n), (b, m)| (a + b, n + m));
        if n == 0 {
            0.0
        } else {
            (sum / n as f64).sqrt()
        }
    }

    pub(crate) fn valid_count(&self, p: usize) -> usize {
        self.samples.iter().map(|s| s.delays[p].valid_count()).sum()
    }
}

fn masked_values(d: &DelayField) -> Array2<f64> {
    match &d.mask {
        None => d.values.clone(),
        Some(m) => ndarray::Zip::from(&d.values)
            .and(m)
            .map_collect(|&v, &ok| if ok { v } else { 0.0 }),
    }
}

fn sum_images(parts: Vec<Array2<f64>>, shape: (usize, usize)) -> Array2<f64> {
    let mut acc = Array2::zeros(shape);
    for p in parts {
        acc += &p;
    }
    acc
}

/// `Σ_s S_sᵀ S_s` via summed-area tables of lagged product images.
pub(crate) fn unmasked_gram(maps: &[&Array2<f64>], dims: KernelDims) -> DMatrix<f64> {
    let (nz, nx) = maps[0].dim();
    let padded: Vec<Array2<f64>> = maps.iter().map(|m| pad_slowness(m, dims).values).collect();
    let (h, w) = padded[0].dim();
    let (kz, kx) = (dims.kz, dims.kx);
    let kxi = kx as isize;
    let lags: Vec<(usize, isize)> = (0..kz)
        .flat_map(|da| {
            (-(kxi - 1)..kxi)
                .filter(move |&db| da > 0 || db >= 0)
                .map(move |db| (da, db))
        })
        .collect();

    let blocks = parallel::map(&lags, |&(da, db)| {
        let stride = w + 1;
        let mut table = vec![0.0; (h + 1) * stride];
        let (c_lo, c_hi) = ((-db).max(0) as usize, (w as isize - db.max(0)) as usize);
        // Rows above kz - 1 are padding for every sample.
        let r_lo = kz - 1;
        for r in 0..h - da {
            let mut run = 0.0;
            for c in 0..w {
                let mut v = 0.0;
                if r >= r_lo && c >= c_lo && c < c_hi {
                    let c2 = (c as isize + db) as usize;
                    for p in &padded {
                        v += p[[r, c]] * p[[r + da, c2]];
                    }
                }
                run += v;
                table[(r + 1) * stride + c + 1] = table[r * stride + c + 1] + run;
            }
        }
        let b_lo = (-db).max(0) as usize;
        let b_hi = (kxi - db.max(0)) as usize;
        let mut out = Vec::with_capacity((kz - da) * (b_hi - b_lo));
        for a in 0..kz - da {
            for b in b_lo..b_hi {
                let (r0, r1, c0, c1) = (a, a + nz, b, b + nx);
                let s = table[r1 * stride + c1] - table[r0 * stride + c1] - table[r1 * stride + c0]
                    + table[r0 * stride + c0];
                out.push(s);
            }
        }
        out
    });

    let k = dims.len();
    let mut m = DMatrix::zeros(k, k);
    for (&(da, db), block) in lags.iter().zip(blocks) {
        let b_lo = (-db).max(0) as usize;
        let b_hi = (kxi - db.max(0)) as usize;
        let mut it = block.into_iter();
        for a in 0..kz - da {
            for b in b_lo..b_hi {
                let v = it.next().expect("block size");
                let u = a * kx + b;
                let t = (a + da) * kx + (b as isize + db) as usize;
                m[(u, t)] = v;
                m[(t, u)] = v;
            }
        }
    }
    m
}

/// Explicit `Σ_s Σ_{valid i} s_i s_iᵀ` for pair `p`.
pub(crate) fn masked_gram(samples: &[TrainingSample], p: usize, dims: KernelDims) -> DMatrix<f64> {
    let k = dims.len();
    let parts = parallel::map(samples, |s| {
        let (nz, nx) = s.slowness.dim();
        let padded = pad_slowness(&s.slowness, dims).values;
        let d = &s.delays[p];
        let valid: Vec<(usize, usize)> = (0..nz)
            .flat_map(|z| (0..nx).map(move |x| (z, x)))
            .filter(|&(z, x)| d.is_valid(z, x))
            .collect();
        let mut rows = DMatrix::zeros(valid.len(), k);
        for (r, &(z, x)) in valid.iter().enumerate() {
            for a in 0..dims.kz {
                for b in 0..dims.kx {
                    rows[(r, a * dims.kx + b)] = padded[[z + a, x + b]];
                }
            }
        }
        rows.transpose() * rows
    });
    let mut m = DMatrix::zeros(k, k);
    for part in parts {
        m += part;
    }
    m
}
