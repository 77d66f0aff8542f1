//! Learnable Fourier-space feature filter.
//!
//! A feature map is transformed with a 2D FFT over its spatial axes, each
//! frequency bin is multiplied by a learnable complex weight, and the result
//! is transformed back; the real part is kept. Forward transforms are
//! unnormalized and the inverse divides by `H·W`.
//!
//! Feature maps here are rank-3 tensors laid out `(channels, height, width)`.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::autograd::Var;
use crate::error::{ensure, invalid, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Spatial size and channel count a filter is built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SpectralShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl SpectralShape {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
        }
    }

    fn of_feature_map<T: Scalar>(m: &Tensor<T>) -> Result<Self> {
        let s = m.shape();
        ensure!(s.len() == 3, "feature map must be rank 3 (C, H, W), got {s:?}");
        Ok(Self::new(s[1], s[2], s[0]))
    }

    pub fn tensor_shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    fn plane(&self) -> usize {
        self.height * self.width
    }

    fn len(&self) -> usize {
        self.channels * self.plane()
    }
}

/// Complex spectrum of a feature map, `(C, H, W)` layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum<T> {
    pub shape: SpectralShape,
    pub data: Vec<Complex<T>>,
}

/// Complex attentive map applied bin-wise to a spectrum.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralFilter<T> {
    shape: SpectralShape,
    re: Tensor<T>,
    im: Tensor<T>,
    pub trainable: bool,
}

impl<T: Scalar> SpectralFilter<T> {
    /// Every weight `1 + 0i`: a no-op filter.
    pub fn identity(shape: SpectralShape) -> Self {
        Self {
            shape,
            re: Tensor::ones(&shape.tensor_shape()),
            im: Tensor::zeros(&shape.tensor_shape()),
            trainable: true,
        }
    }

    pub fn zeros(shape: SpectralShape) -> Self {
        Self {
            shape,
            re: Tensor::zeros(&shape.tensor_shape()),
            im: Tensor::zeros(&shape.tensor_shape()),
            trainable: true,
        }
    }

    pub fn from_parts(re: Tensor<T>, im: Tensor<T>) -> Result<Self> {
        let shape = SpectralShape::of_feature_map(&re)?;
        re.check_same_shape(&im)?;
        Ok(Self {
            shape,
            re,
            im,
            trainable: true,
        })
    }

    pub fn shape(&self) -> SpectralShape {
        self.shape
    }

    pub fn re(&self) -> &Tensor<T> {
        &self.re
    }

    pub fn im(&self) -> &Tensor<T> {
        &self.im
    }

    pub fn weight(&self, i: usize) -> Complex<T> {
        Complex::new(self.re.data()[i], self.im.data()[i])
    }
}

/// Row/column FFT plans for one `H×W` plane size.
pub(crate) struct Fft2<T: Scalar> {
    h: usize,
    w: usize,
    row_fwd: Arc<dyn Fft<T>>,
    row_inv: Arc<dyn Fft<T>>,
    col_fwd: Arc<dyn Fft<T>>,
    col_inv: Arc<dyn Fft<T>>,
}

impl<T: Scalar> Fft2<T> {
    pub(crate) fn new(h: usize, w: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            h,
            w,
            row_fwd: planner.plan_fft_forward(w),
            row_inv: planner.plan_fft_inverse(w),
            col_fwd: planner.plan_fft_forward(h),
            col_inv: planner.plan_fft_inverse(h),
        }
    }

    /// In-place unnormalized 2D transform of one or more stacked planes.
    pub(crate) fn process(&self, data: &mut [Complex<T>], inverse: bool) {
        let (row, col) = if inverse {
            (&self.row_inv, &self.col_inv)
        } else {
            (&self.row_fwd, &self.col_fwd)
        };
        let plane = self.h * self.w;
        let mut scratch = vec![Complex::new(T::zero(), T::zero()); plane];
        for p in data.chunks_exact_mut(plane) {
            row.process(p);
            for i in 0..self.h {
                for j in 0..self.w {
                    scratch[j * self.h + i] = p[i * self.w + j];
                }
            }
            col.process(&mut scratch);
            for i in 0..self.h {
                for j in 0..self.w {
                    p[i * self.w + j] = scratch[j * self.h + i];
                }
            }
        }
    }
}

fn to_complex<T: Scalar>(values: &[T]) -> Vec<Complex<T>> {
    values.iter().map(|&v| Complex::new(v, T::zero())).collect()
}

/// 2D DFT of every channel over the spatial axes.
pub fn fft2<T: Scalar>(m: &Tensor<T>) -> Result<Spectrum<T>> {
    let shape = SpectralShape::of_feature_map(m)?;
    ensure!(m.all_finite(), "fft2: feature map contains non-finite values");
    let mut data = to_complex(m.data());
    Fft2::new(shape.height, shape.width).process(&mut data, false);
    Ok(Spectrum { shape, data })
}

/// Bin-wise complex product `A ⊗ M`.
pub fn modulate<T: Scalar>(spectrum: &Spectrum<T>, filter: &SpectralFilter<T>) -> Result<Spectrum<T>> {
    ensure!(
        spectrum.shape == filter.shape,
        "modulate: spectrum {:?} vs filter {:?}",
        spectrum.shape,
        filter.shape
    );
    let data = spectrum
        .data
        .iter()
        .enumerate()
        .map(|(i, &z)| filter.weight(i) * z)
        .collect();
    Ok(Spectrum {
        shape: spectrum.shape,
        data,
    })
}

/// Inverse 2D DFT, keeping the real part.
pub fn ifft2<T: Scalar>(spectrum: &Spectrum<T>) -> Result<Tensor<T>> {
    let shape = spectrum.shape;
    if spectrum.data.len() != shape.len() {
        return Err(invalid!(
            "ifft2: {} bins for shape {:?}",
            spectrum.data.len(),
            shape
        ));
    }
    let mut data = spectrum.data.clone();
    Fft2::new(shape.height, shape.width).process(&mut data, true);
    let norm = T::lit(shape.plane() as f64);
    Tensor::from_vec(&shape.tensor_shape(), data.iter().map(|z| z.re / norm).collect())
}

/// `ifft2(modulate(fft2(m), filter))`.
pub fn ffparser_apply<T: Scalar>(m: &Tensor<T>, filter: &SpectralFilter<T>) -> Result<Tensor<T>> {
    ifft2(&modulate(&fft2(m)?, filter)?)
}

impl<'g, T: Scalar> Var<'g, T> {
    /// Batched, differentiable spectral filtering of an `(N, C, H, W)` var with
    /// filter parts `re`, `im` of shape `(C, H, W)`.
    pub fn spectral_filter(self, re: Var<'g, T>, im: Var<'g, T>) -> Result<Var<'g, T>> {
        let x = self.value();
        let (n, c, h, w) = x.dims4()?;
        let (ar, ai) = (re.value(), im.value());
        ensure!(
            ar.shape() == [c, h, w] && ai.shape() == [c, h, w],
            "spectral_filter: filter shape {:?} does not match features ({c}, {h}, {w})",
            ar.shape()
        );
        let plan = Fft2::<T>::new(h, w);
        let mut spec = to_complex(x.data());
        plan.process(&mut spec, false);
        let per_sample = c * h * w;
        let weights: Vec<Complex<T>> = ar
            .data()
            .iter()
            .zip(ai.data())
            .map(|(&r, &i)| Complex::new(r, i))
            .collect();
        let mut mixed: Vec<Complex<T>> = spec
            .iter()
            .enumerate()
            .map(|(k, &z)| weights[k % per_sample] * z)
            .collect();
        plan.process(&mut mixed, true);
        let norm = T::lit((h * w) as f64);
        let out = Tensor::from_vec(x.shape(), mixed.iter().map(|z| z.re / norm).collect())?;
        let graph = self.graph();
        Ok(graph.record(out, &[self, re, im], move |g| {
            // dL/dZ = FFT(g)/HW for the pre-inverse spectrum Z = A·X
            let mut gz = to_complex(g.data());
            plan.process(&mut gz, false);
            gz.iter_mut().for_each(|v| *v = *v / norm);
            let mut gre = Tensor::zeros(&[c, h, w]);
            let mut gim = Tensor::zeros(&[c, h, w]);
            let mut gx_spec = Vec::with_capacity(gz.len());
            for (k, (&gzk, &xk)) in gz.iter().zip(&spec).enumerate() {
                let j = k % per_sample;
                let ga = gzk * xk.conj();
                gre.data_mut()[j] = gre.data()[j] + ga.re;
                gim.data_mut()[j] = gim.data()[j] + ga.im;
                gx_spec.push(gzk * weights[j].conj());
            }
            plan.process(&mut gx_spec, true);
            let gx = Tensor::from_vec(&[n, c, h, w], gx_spec.iter().map(|z| z.re).collect())?;
            Ok(vec![Some(gx), Some(gre), Some(gim)])
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_dft(m: &Tensor<f64>) -> Vec<Complex<f64>> {
        let (c, h, w) = (m.shape()[0], m.shape()[1], m.shape()[2]);
        let mut out = vec![Complex::new(0.0, 0.0); c * h * w];
        for ch in 0..c {
            for u in 0..h {
                for v in 0..w {
                    let mut acc = Complex::new(0.0, 0.0);
                    for y in 0..h {
                        for x in 0..w {
                            let theta = -2.0 * std::f64::consts::PI * ((u * y) as f64 / h as f64 + (v * x) as f64 / w as f64);
                            acc += Complex::from_polar(1.0, theta) * m.data()[(ch * h + y) * w + x];
                        }
                    }
                    out[(ch * h + u) * w + v] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn zeros_transform_to_zeros() {
        let m = Tensor::<f64>::zeros(&[2, 4, 4]);
        assert!(fft2(&m).unwrap().data.iter().all(|z| z.norm() == 0.0));
        let s = Spectrum {
            shape: SpectralShape::new(4, 4, 2),
            data: vec![Complex::new(0.0, 0.0); 32],
        };
        assert_eq!(ifft2(&s).unwrap(), m);
    }

    #[test]
    fn constant_map_has_only_dc() {
        let (h, w) = (3, 5);
        let m = Tensor::<f64>::from_vec(&[2, h, w], [vec![2.5; h * w], vec![-1.0; h * w]].concat()).unwrap();
        let s = fft2(&m).unwrap();
        for ch in 0..2 {
            let c = [2.5, -1.0][ch];
            for k in 0..h * w {
                let z = s.data[ch * h * w + k];
                let want = if k == 0 { c * (h * w) as f64 } else { 0.0 };
                assert!((z.re - want).abs() < 1e-12 && z.im.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matches_naive_dft() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = Tensor::<f64>::randn(&[1, 4, 4], &mut rng);
        let fast = fft2(&m).unwrap();
        for (a, b) in fast.data.iter().zip(naive_dft(&m)) {
            assert!((a - b).norm() < 1e-6);
        }
    }

    #[test]
    fn rejects_non_finite_and_bad_rank() {
        let m = Tensor::<f64>::from_vec(&[1, 1, 2], vec![1.0, f64::NAN]).unwrap();
        assert!(fft2(&m).is_err());
        assert!(fft2(&Tensor::<f64>::zeros(&[4, 4])).is_err());
    }

    #[test]
    fn modulate_identity_zero_and_hand_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = Tensor::<f64>::randn(&[1, 2, 2], &mut rng);
        let s = fft2(&m).unwrap();
        let shape = s.shape;
        assert_eq!(modulate(&s, &SpectralFilter::identity(shape)).unwrap(), s);
        assert!(modulate(&s, &SpectralFilter::zeros(shape))
            .unwrap()
            .data
            .iter()
            .all(|z| z.norm() == 0.0));

        let spec = Spectrum {
            shape,
            data: vec![
                Complex::new(1.0, 2.0),
                Complex::new(-0.5, 0.25),
                Complex::new(3.0, 0.0),
                Complex::new(0.0, -1.5),
            ],
        };
        let filter = SpectralFilter::from_parts(
            Tensor::from_vec(&[1, 2, 2], vec![0.5, 2.0, -1.0, 0.3]).unwrap(),
            Tensor::from_vec(&[1, 2, 2], vec![-1.0, 0.0, 0.5, 0.7]).unwrap(),
        )
        .unwrap();
        // (a+bi)(c+di) = (ac − bd) + (ad + bc)i, by hand
        let expected: [(f64, f64); 4] = [(2.5, 0.0), (-1.0, 0.5), (-3.0, 1.5), (1.05, -0.45)];
        let got = modulate(&spec, &filter).unwrap();
        for (z, (re, im)) in got.data.iter().zip(expected) {
            assert!((z.re - re).abs() < 1e-10 && (z.im - im).abs() < 1e-10);
        }
        let wrong = SpectralFilter::<f64>::identity(SpectralShape::new(2, 2, 2));
        assert!(modulate(&spec, &wrong).is_err());
    }

    #[test]
    fn dc_only_spectrum_inverts_to_channel_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = Tensor::<f64>::randn(&[3, 6, 4], &mut rng);
        let mut s = fft2(&m).unwrap();
        let plane = 24;
        for (k, z) in s.data.iter_mut().enumerate() {
            if k % plane != 0 {
                *z = Complex::new(0.0, 0.0);
            }
        }
        let back = ifft2(&s).unwrap();
        for ch in 0..3 {
            let mean: f64 = m.data()[ch * plane..(ch + 1) * plane].iter().sum::<f64>() / plane as f64;
            for v in &back.data()[ch * plane..(ch + 1) * plane] {
                assert!((v - mean).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn identity_and_zero_filters() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = Tensor::<f32>::randn(&[4, 8, 8], &mut rng);
        let shape = SpectralShape::new(8, 8, 4);
        let id = ffparser_apply(&m, &SpectralFilter::identity(shape)).unwrap();
        assert!(id.max_abs_diff(&m).unwrap() < 1e-5);
        let z = ffparser_apply(&m, &SpectralFilter::zeros(shape)).unwrap();
        assert_eq!(z.max_abs(), 0.0);
    }

    #[test]
    fn graph_op_matches_module_functions() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::<f64>::randn(&[2, 3, 4, 8], &mut rng);
        let re = Tensor::<f64>::randn(&[3, 4, 8], &mut rng);
        let im = Tensor::<f64>::randn(&[3, 4, 8], &mut rng);
        let filter = SpectralFilter::from_parts(re.clone(), im.clone()).unwrap();
        let g = Graph::inference();
        let y = g
            .constant(x.clone())
            .spectral_filter(g.constant(re), g.constant(im))
            .unwrap()
            .value();
        for n in 0..2 {
            let sample = x.select(n).unwrap().reshape(&[3, 4, 8]).unwrap();
            let want = ffparser_apply(&sample, &filter).unwrap();
            let got = y.select(n).unwrap().reshape(&[3, 4, 8]).unwrap();
            assert!(got.max_abs_diff(&want).unwrap() < 1e-12);
        }
    }
}
