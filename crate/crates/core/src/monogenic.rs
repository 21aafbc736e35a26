//! Trainable multi-scale local-phase feature extraction.
//!
//! A bank of k log-Gabor bandpass filters, each with learnable center
//! frequency, bandwidth ratio, and geometric scale factor, produces m
//! responses per filter. Riesz filtering of each bandpassed image yields the
//! odd quadrature pair, and the local phase map is the arctangent of the
//! even/odd ratio. The k*m phase maps are mixed by a learnable pointwise
//! convolution into k combined channels.
//!
//! Phase is a ratio of filter responses, so the output is invariant to gain
//! and offset changes of the input image: the bandpass kills the offset and
//! the ratio cancels the gain.

use std::sync::Arc;

use crate::autodiff::{Constraint, Graph, NodeId, Parameter};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

/// Default initialization: ~2-octave bandwidth, octave-spaced scales.
pub const DEFAULT_OMEGA0: f64 = std::f64::consts::FRAC_PI_4;
pub const DEFAULT_SIGMA_R: f64 = 0.55;
pub const DEFAULT_SCALE_FACTOR: f64 = 2.0;

/// Floor for the phase denominator; 0/0 maps to phase 0.
pub const PHASE_EPS: f64 = 1e-8;

/// Frequency-domain sampling grid in radians/pixel over [-pi, pi), laid out in
/// FFT bin order (non-negative frequencies first, then negative).
pub struct FrequencyGrid<T> {
    pub h: usize,
    pub w: usize,
    pub omega_x: Vec<T>,
    pub omega_y: Vec<T>,
    pub omega_mag: Vec<T>,
    /// ln|omega| with the DC slot holding a dummy 0 (always masked out).
    log_mag: Arc<Vec<T>>,
    /// 0 at the DC bin, 1 elsewhere.
    dc_mask: Arc<Vec<T>>,
    /// omega_x / |omega| and omega_y / |omega|, 0 at DC.
    riesz_x: Arc<Vec<T>>,
    riesz_y: Arc<Vec<T>>,
}

fn fft_freq(n: usize, i: usize) -> f64 {
    let signed = if i <= (n - 1) / 2 {
        i as f64
    } else {
        i as f64 - n as f64
    };
    2.0 * std::f64::consts::PI * signed / n as f64
}

impl<T: Scalar> FrequencyGrid<T> {
    pub fn new(h: usize, w: usize) -> Self {
        let n = h * w;
        let mut omega_x = Vec::with_capacity(n);
        let mut omega_y = Vec::with_capacity(n);
        let mut omega_mag = Vec::with_capacity(n);
        let mut log_mag = Vec::with_capacity(n);
        let mut dc_mask = Vec::with_capacity(n);
        let mut riesz_x = Vec::with_capacity(n);
        let mut riesz_y = Vec::with_capacity(n);
        for row in 0..h {
            let wy = fft_freq(h, row);
            for col in 0..w {
                let wx = fft_freq(w, col);
                let mag = (wx * wx + wy * wy).sqrt();
                omega_x.push(T::of_f64(wx));
                omega_y.push(T::of_f64(wy));
                omega_mag.push(T::of_f64(mag));
                if mag == 0.0 {
                    log_mag.push(T::zero());
                    dc_mask.push(T::zero());
                    riesz_x.push(T::zero());
                    riesz_y.push(T::zero());
                } else {
                    log_mag.push(T::of_f64(mag.ln()));
                    dc_mask.push(T::one());
                    riesz_x.push(T::of_f64(wx / mag));
                    riesz_y.push(T::of_f64(wy / mag));
                }
            }
        }
        FrequencyGrid {
            h,
            w,
            omega_x,
            omega_y,
            omega_mag,
            log_mag: Arc::new(log_mag),
            dc_mask: Arc::new(dc_mask),
            riesz_x: Arc::new(riesz_x),
            riesz_y: Arc::new(riesz_y),
        }
    }
}

/// Riesz filter frequency responses R1 = i*wx/|w|, R2 = i*wy/|w| as complex
/// maps [H, W, 2]; both are zero at the DC bin.
pub fn riesz<T: Scalar>(grid: &FrequencyGrid<T>) -> (Tensor<T>, Tensor<T>) {
    let n = grid.h * grid.w;
    let mut r1 = vec![T::zero(); 2 * n];
    let mut r2 = vec![T::zero(); 2 * n];
    for p in 0..n {
        r1[2 * p + 1] = grid.riesz_x[p];
        r2[2 * p + 1] = grid.riesz_y[p];
    }
    (
        Tensor::new(&[grid.h, grid.w, 2], r1).expect("sized above"),
        Tensor::new(&[grid.h, grid.w, 2], r2).expect("sized above"),
    )
}

/// Learnable parameters of one log-Gabor filter. The raw values are
/// unconstrained; constraints are applied by smooth reparameterization when
/// the filter is registered on a graph.
#[derive(Debug, Clone)]
pub struct LogGaborParams<T> {
    pub omega0: Parameter<T>,
    pub sigma_r: Parameter<T>,
    pub r: Parameter<T>,
    pub m_scales: usize,
}

impl<T: Scalar> LogGaborParams<T> {
    pub fn init(name_prefix: &str, m_scales: usize) -> Self {
        LogGaborParams {
            omega0: Parameter::scalar_with_effective(
                format!("{name_prefix}.omega0"),
                DEFAULT_OMEGA0,
                Constraint::Positive,
            ),
            sigma_r: Parameter::scalar_with_effective(
                format!("{name_prefix}.sigma_r"),
                DEFAULT_SIGMA_R,
                Constraint::UnitInterval,
            ),
            r: Parameter::scalar_with_effective(
                format!("{name_prefix}.r"),
                DEFAULT_SCALE_FACTOR,
                Constraint::GreaterThanOne,
            ),
            m_scales,
        }
    }

    /// Effective scale centers omega0 * r^-m, strictly decreasing in m.
    pub fn scale_centers(&self) -> Vec<f64> {
        let w0 = self
            .omega0
            .constraint
            .apply(self.omega0.tensor.data()[0].as_f64());
        let r = self.r.constraint.apply(self.r.tensor.data()[0].as_f64());
        (0..self.m_scales)
            .map(|m| w0 * r.powi(-(m as i32)))
            .collect()
    }
}

/// Effective (post-constraint) graph nodes of one registered filter plus the
/// raw leaves in registration order (omega0, sigma_r, r).
pub struct FilterRefs {
    pub omega0: NodeId,
    pub sigma_r: NodeId,
    pub r: NodeId,
    pub leaves: [NodeId; 3],
}

pub fn register_filter<T: Scalar>(g: &mut Graph<T>, f: &LogGaborParams<T>) -> Result<FilterRefs> {
    let (l0, omega0) = g.param(&f.omega0)?;
    let (l1, sigma_r) = g.param(&f.sigma_r)?;
    let (l2, r) = g.param(&f.r)?;
    Ok(FilterRefs {
        omega0,
        sigma_r,
        r,
        leaves: [l0, l1, l2],
    })
}

/// Build the frequency response of one log-Gabor filter at scale `m`:
/// exp(-(log(|w| / w0m))^2 / (2 log(sigma_r)^2)) with w0m = w0 * r^-m and the
/// DC bin forced to zero. Differentiable w.r.t. the three filter parameters.
pub fn build_lgf<T: Scalar>(
    g: &mut Graph<T>,
    grid: &FrequencyGrid<T>,
    filter: &FilterRefs,
    m: usize,
) -> Result<NodeId> {
    let log_w0 = g.log(filter.omega0);
    let log_r = g.log(filter.r);
    let m_log_r = g.scale(log_r, m as f64);
    let log_center = g.sub(log_w0, m_log_r)?;
    let log_sigma = g.log(filter.sigma_r);
    let sq = g.mul(log_sigma, log_sigma)?;
    let two_sq = g.scale(sq, 2.0);
    g.lgf_map(
        log_center,
        two_sq,
        grid.log_mag.clone(),
        grid.dc_mask.clone(),
        grid.h,
        grid.w,
    )
}

/// Local phase maps for every (filter, scale) pair of a single-channel image
/// batch: output [N, k*m, H, W] ordered filter-major (f0 scales, f1 scales, ..).
///
/// Per pair: S_e = LGF .* F(I); I_e = Re(F^-1(S_e)); the odd parts apply the
/// Riesz responses to the spectrum of I_e, which equals S_e because the
/// log-Gabor response is symmetric under omega -> -omega, so S_e is Hermitian
/// and its inverse transform is already real. The phase is
/// atan(I_e / sqrt(I_o1^2 + I_o2^2)) with the denominator floored at
/// [`PHASE_EPS`].
pub fn local_phase<T: Scalar>(
    g: &mut Graph<T>,
    grid: &FrequencyGrid<T>,
    image: NodeId,
    filters: &[FilterRefs],
    m_scales: usize,
) -> Result<NodeId> {
    let shape = g.shape(image).to_vec();
    if shape.len() != 4 || shape[1] != 1 {
        return Err(Error::ShapeMismatch(format!(
            "local_phase expects a single-channel [N,1,H,W] image, got {shape:?}"
        )));
    }
    let (n, h, w) = (shape[0], shape[2], shape[3]);
    if (h, w) != (grid.h, grid.w) {
        return Err(Error::ShapeMismatch(format!(
            "image {h}x{w} does not match grid {}x{}",
            grid.h, grid.w
        )));
    }
    let _ = n;
    let z = g.real_to_complex(image);
    let spectrum = g.fft2(z)?;

    let mut channels = Vec::with_capacity(filters.len() * m_scales);
    for filter in filters {
        for m in 0..m_scales {
            let lgf = build_lgf(g, grid, filter, m)?;
            let s_e = g.complex_mul_real(spectrum, lgf)?;
            let even = g.ifft2_real(s_e)?;
            let odd1 = g.mul_imag_ifft2_real(s_e, grid.riesz_x.clone())?;
            let odd2 = g.mul_imag_ifft2_real(s_e, grid.riesz_y.clone())?;
            let theta = g.phase(even, odd1, odd2, PHASE_EPS)?;
            channels.push(theta);
        }
    }
    g.concat(&channels)
}

/// The mono block's parameters: k log-Gabor filters plus the pointwise
/// combiner mapping the k*m phase channels to k combined channels.
#[derive(Debug, Clone)]
pub struct MonoBlockState<T> {
    pub filters: Vec<LogGaborParams<T>>,
    pub combine_weight: Parameter<T>,
    pub combine_bias: Parameter<T>,
}

impl<T: Scalar> MonoBlockState<T> {
    /// `k` filters with `m` scales each; combiner weights are He-initialized
    /// from the given stream, biases zero.
    pub fn init(k: usize, m: usize, rng: &mut ChaCha12Rng) -> Self {
        let filters = (0..k)
            .map(|i| LogGaborParams::init(&format!("mono.filter{i}"), m))
            .collect();
        let fan_in = k * m;
        let std = (2.0 / fan_in as f64).sqrt();
        let data: Vec<T> = (0..k * fan_in)
            .map(|_| T::of_f64(normal_sample(rng) * std))
            .collect();
        MonoBlockState {
            filters,
            combine_weight: Parameter::new(
                "mono.combine.weight",
                Tensor::new(&[k, fan_in, 1, 1], data).expect("sized above"),
            ),
            combine_bias: Parameter::new("mono.combine.bias", Tensor::zeros(&[k])),
        }
    }

    pub fn k(&self) -> usize {
        self.filters.len()
    }

    pub fn m_scales(&self) -> usize {
        self.filters.first().map_or(0, |f| f.m_scales)
    }

    pub fn param_count(&self) -> usize {
        3 * self.filters.len() + self.combine_weight.numel() + self.combine_bias.numel()
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        let mut out = Vec::new();
        for f in &self.filters {
            out.push(&f.omega0);
            out.push(&f.sigma_r);
            out.push(&f.r);
        }
        out.push(&self.combine_weight);
        out.push(&self.combine_bias);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut out = Vec::new();
        for f in &mut self.filters {
            out.push(&mut f.omega0);
            out.push(&mut f.sigma_r);
            out.push(&mut f.r);
        }
        out.push(&mut self.combine_weight);
        out.push(&mut self.combine_bias);
        out
    }
}

/// Registered graph nodes of a [`MonoBlockState`]; `leaves` lists raw leaves
/// in the same order as [`MonoBlockState::params`].
pub struct MonoRefs {
    pub filters: Vec<FilterRefs>,
    pub combine_w: NodeId,
    pub combine_b: NodeId,
    pub leaves: Vec<NodeId>,
}

pub fn register_mono<T: Scalar>(g: &mut Graph<T>, state: &MonoBlockState<T>) -> Result<MonoRefs> {
    let mut filters = Vec::with_capacity(state.filters.len());
    let mut leaves = Vec::new();
    for f in &state.filters {
        let refs = register_filter(g, f)?;
        leaves.extend_from_slice(&refs.leaves);
        filters.push(refs);
    }
    let (lw, combine_w) = g.param(&state.combine_weight)?;
    let (lb, combine_b) = g.param(&state.combine_bias)?;
    leaves.push(lw);
    leaves.push(lb);
    Ok(MonoRefs {
        filters,
        combine_w,
        combine_b,
        leaves,
    })
}

/// Full mono block: local phase maps combined by the pointwise convolution,
/// output [N, k, H, W].
pub fn mono_block<T: Scalar>(
    g: &mut Graph<T>,
    grid: &FrequencyGrid<T>,
    image: NodeId,
    refs: &MonoRefs,
    m_scales: usize,
) -> Result<NodeId> {
    let phase = local_phase(g, grid, image, &refs.filters, m_scales)?;
    g.conv2d(phase, refs.combine_w, Some(refs.combine_b), 1, 0)
}

/// Box-Muller standard normal draw.
pub(crate) fn normal_sample(rng: &mut ChaCha12Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
