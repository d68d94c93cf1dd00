//! Time-invariant diagonal state-space scan.
//!
//! For every channel `c` and state index `n`:
//!
//! ```text
//! h_i[n] = a[c,n] * h_{i-1}[n] + b[c,n] * x_i
//! y_i    = sum_n cw[c,n] * h_i[n] + d[c] * x_i
//! ```
//!
//! with `a = sigmoid(a_raw)` so every transition lies strictly inside `(0, 1)`.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::counter;
use crate::error::{shape_err, Result};
use crate::parallel;
use crate::real::{sigmoid, Real};

/// Default state size per channel.
pub const DEFAULT_STATE_N: usize = 8;

/// Effective transition for a raw logit.
#[inline]
pub fn transition<T: Real>(a_raw: T) -> T {
    sigmoid(clamp_raw(a_raw))
}

#[inline]
fn clamp_raw<T: Real>(a_raw: T) -> T {
    a_raw.max(-T::A_RAW_LIMIT).min(T::A_RAW_LIMIT)
}

/// Owned per-channel parameters, each `channels x n` row-major except `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmParams<T> {
    pub channels: usize,
    pub n: usize,
    pub a_raw: Vec<T>,
    pub b: Vec<T>,
    pub cw: Vec<T>,
    pub d: Vec<T>,
}

impl<T: Real> SsmParams<T> {
    pub fn zeros(channels: usize, n: usize) -> Self {
        Self {
            channels,
            n,
            a_raw: vec![T::ZERO; channels * n],
            b: vec![T::ZERO; channels * n],
            cw: vec![T::ZERO; channels * n],
            d: vec![T::ZERO; channels],
        }
    }

    /// Random init: `a` uniform in logit space over `[0.5, 0.99]`, `b`, `cw` ~ N(0, 0.1^2), `d = 1`.
    pub fn init(channels: usize, n: usize, rng: &mut impl Rng) -> Self {
        let lo = 0.0;
        let hi = (0.99f64 / 0.01).ln();
        let ua = Uniform::new_inclusive(lo, hi).expect("valid range");
        let nb = Normal::new(0.0, 0.1).expect("valid std");
        let mut p = Self::zeros(channels, n);
        p.a_raw.iter_mut().for_each(|v| *v = T::from_f64(ua.sample(rng)));
        p.b.iter_mut().for_each(|v| *v = T::from_f64(nb.sample(rng)));
        p.cw.iter_mut().for_each(|v| *v = T::from_f64(nb.sample(rng)));
        p.d.iter_mut().for_each(|v| *v = T::ONE);
        p
    }

    /// One channel, one state with transition `a`. Values at or beyond the ends of
    /// `(0, 1)` saturate to the nearest representable open-interval transition.
    pub fn scalar(a: f64, b: f64, cw: f64, d: f64) -> Self {
        let mut p = Self::zeros(1, 1);
        p.a_raw[0] = T::from_f64(logit(a));
        p.b[0] = T::from_f64(b);
        p.cw[0] = T::from_f64(cw);
        p.d[0] = T::from_f64(d);
        p
    }

    pub fn view(&self) -> SsmView<'_, T> {
        SsmView {
            channels: self.channels,
            n: self.n,
            a_raw: &self.a_raw,
            b: &self.b,
            cw: &self.cw,
            d: &self.d,
        }
    }
}

/// Logit, saturating at the ends of `[0, 1]`.
pub fn logit(a: f64) -> f64 {
    if a <= 0.0 {
        -f64::INFINITY
    } else if a >= 1.0 {
        f64::INFINITY
    } else {
        (a / (1.0 - a)).ln()
    }
}

/// Borrowed parameters, usually pointing into a parameter store.
#[derive(Debug, Clone, Copy)]
pub struct SsmView<'a, T> {
    pub channels: usize,
    pub n: usize,
    pub a_raw: &'a [T],
    pub b: &'a [T],
    pub cw: &'a [T],
    pub d: &'a [T],
}

impl<T: Real> SsmView<'_, T> {
    pub fn effective_a(&self) -> Vec<T> {
        self.a_raw.iter().map(|&r| transition(r)).collect()
    }

    pub fn to_owned(&self) -> SsmParams<T> {
        SsmParams {
            channels: self.channels,
            n: self.n,
            a_raw: self.a_raw.to_vec(),
            b: self.b.to_vec(),
            cw: self.cw.to_vec(),
            d: self.d.to_vec(),
        }
    }
}

/// `(B, C, L)` token sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence<T> {
    pub batch: usize,
    pub channels: usize,
    pub len: usize,
    pub values: Vec<T>,
    /// Patch extents `(h, w)` when the sequence came from a raster.
    pub origin: Option<(usize, usize)>,
}

impl<T: Real> TokenSequence<T> {
    pub fn new(batch: usize, channels: usize, len: usize, values: Vec<T>) -> Result<Self> {
        if len == 0 || values.len() != batch * channels * len {
            return Err(shape_err("token sequence", &[values.len()], &[batch, channels, len]));
        }
        Ok(Self {
            batch,
            channels,
            len,
            values,
            origin: None,
        })
    }

    pub fn zeros(batch: usize, channels: usize, len: usize) -> Self {
        Self::new(batch, channels, len, vec![T::ZERO; batch * channels * len]).expect("len >= 1")
    }

    pub fn row(&self, b: usize, c: usize) -> &[T] {
        let o = (b * self.channels + c) * self.len;
        &self.values[o..o + self.len]
    }

    fn same_layout(&self, values: Vec<T>) -> Self {
        Self {
            batch: self.batch,
            channels: self.channels,
            len: self.len,
            values,
            origin: self.origin,
        }
    }
}

fn check_channels<T: Real>(x: &TokenSequence<T>, p: &SsmView<'_, T>) -> Result<()> {
    let n = p.n;
    if x.channels != p.channels
        || p.a_raw.len() != p.channels * n
        || p.b.len() != p.channels * n
        || p.cw.len() != p.channels * n
        || p.d.len() != p.channels
    {
        return Err(shape_err(
            "ssm input channels vs parameter channels",
            &[x.batch, x.channels, x.len],
            &[p.channels, n],
        ));
    }
    Ok(())
}

/// Multiply-adds performed by [`ssm_scan`].
pub fn scan_macs(batch: usize, channels: usize, len: usize, n: usize) -> u64 {
    (batch * channels * len * (3 * n + 1)) as u64
}

fn scan_row<T: Real>(x: &[T], a: &[T], b: &[T], cw: &[T], d: T, h: &mut [T], y: &mut [T]) {
    for (xi, yi) in x.iter().zip(y.iter_mut()) {
        let mut acc = T::ZERO;
        for n in 0..h.len() {
            h[n] = a[n] * h[n] + b[n] * *xi;
            acc += cw[n] * h[n];
        }
        *yi = acc + d * *xi;
    }
}

/// Forward scan with optional per-channel initial state `h0` (`channels x n`, zero when `None`).
pub fn ssm_scan<T: Real>(x: &TokenSequence<T>, p: &SsmView<'_, T>, h0: Option<&[T]>) -> Result<TokenSequence<T>> {
    check_channels(x, p)?;
    if let Some(h0) = h0 {
        if h0.len() != p.channels * p.n {
            return Err(shape_err("ssm initial state", &[h0.len()], &[p.channels, p.n]));
        }
    }
    let a = p.effective_a();
    let n = p.n;
    let mut y = vec![T::ZERO; x.values.len()];
    parallel::for_each_chunk(&mut y, x.len, |row, out| {
        let c = row % x.channels;
        let mut h = match h0 {
            Some(h0) => h0[c * n..(c + 1) * n].to_vec(),
            None => vec![T::ZERO; n],
        };
        let s = c * n..(c + 1) * n;
        scan_row(
            &x.values[row * x.len..(row + 1) * x.len],
            &a[s.clone()],
            &p.b[s.clone()],
            &p.cw[s],
            p.d[c],
            &mut h,
            out,
        );
    });
    counter::add(scan_macs(x.batch, x.channels, x.len, n));
    Ok(x.same_layout(y))
}

/// Gradients of `sum(grad_y * ssm_scan(x))` with respect to the input and raw parameters.
#[derive(Debug, Clone)]
pub struct SsmGrads<T> {
    pub input: TokenSequence<T>,
    pub a_raw: Vec<T>,
    pub b: Vec<T>,
    pub cw: Vec<T>,
    pub d: Vec<T>,
}

impl<T: Real> SsmGrads<T> {
    fn zeros_like(p: &SsmView<'_, T>) -> (Vec<T>, Vec<T>, Vec<T>, Vec<T>) {
        let m = p.channels * p.n;
        (vec![T::ZERO; m], vec![T::ZERO; m], vec![T::ZERO; m], vec![T::ZERO; p.channels])
    }
}

/// Reverse-time adjoint scan (zero initial state). States are recomputed per row.
pub fn ssm_scan_backward<T: Real>(
    x: &TokenSequence<T>,
    p: &SsmView<'_, T>,
    grad_y: &TokenSequence<T>,
) -> Result<SsmGrads<T>> {
    check_channels(x, p)?;
    if grad_y.values.len() != x.values.len() || grad_y.len != x.len {
        return Err(shape_err(
            "ssm grad_y vs input",
            &[grad_y.batch, grad_y.channels, grad_y.len],
            &[x.batch, x.channels, x.len],
        ));
    }
    let a = p.effective_a();
    let n = p.n;
    let l = x.len;
    let rows = x.batch * x.channels;
    let partials = parallel::map(rows, |row| {
        let c = row % x.channels;
        let s = c * n..(c + 1) * n;
        let (ac, bc, cwc) = (&a[s.clone()], &p.b[s.clone()], &p.cw[s]);
        let xs = &x.values[row * l..(row + 1) * l];
        let gys = &grad_y.values[row * l..(row + 1) * l];
        let mut hs = vec![T::ZERO; l * n];
        let mut h = vec![T::ZERO; n];
        for (i, &xi) in xs.iter().enumerate() {
            for k in 0..n {
                h[k] = ac[k] * h[k] + bc[k] * xi;
            }
            hs[i * n..(i + 1) * n].copy_from_slice(&h);
        }
        let mut lam = vec![T::ZERO; n];
        let mut gx = vec![T::ZERO; l];
        let mut ga = vec![T::ZERO; n];
        let mut gb = vec![T::ZERO; n];
        let mut gcw = vec![T::ZERO; n];
        let mut gd = T::ZERO;
        for i in (0..l).rev() {
            let gy = gys[i];
            let xi = xs[i];
            let mut acc = p.d[c] * gy;
            for k in 0..n {
                lam[k] = cwc[k] * gy + ac[k] * lam[k];
                acc += bc[k] * lam[k];
                gb[k] += lam[k] * xi;
                gcw[k] += gy * hs[i * n + k];
                if i > 0 {
                    ga[k] += lam[k] * hs[(i - 1) * n + k];
                }
            }
            gx[i] = acc;
            gd += gy * xi;
        }
        (gx, ga, gb, gcw, gd)
    });
    counter::add(2 * scan_macs(x.batch, x.channels, l, n));
    let (mut ga, mut gb, mut gcw, mut gd) = SsmGrads::zeros_like(p);
    let mut gx = Vec::with_capacity(x.values.len());
    for (row, (rx, ra, rb, rc, rd)) in partials.into_iter().enumerate() {
        let c = row % x.channels;
        gx.extend_from_slice(&rx);
        for k in 0..n {
            ga[c * n + k] += ra[k];
            gb[c * n + k] += rb[k];
            gcw[c * n + k] += rc[k];
        }
        gd[c] += rd;
    }
    for (g, (&raw, &av)) in ga.iter_mut().zip(p.a_raw.iter().zip(&a)) {
        *g = if raw.abs() > T::A_RAW_LIMIT {
            T::ZERO
        } else {
            *g * av * (T::ONE - av)
        };
    }
    Ok(SsmGrads {
        input: x.same_layout(gx),
        a_raw: ga,
        b: gb,
        cw: gcw,
        d: gd,
    })
}

/// State-path impulse response `g_t = sum_n cw[n] a[n]^(t-1) b[n]`, `t = 1..=len`.
///
/// The lag-independent skip `d` is excluded. `channel` is zero-based.
pub fn impulse_response<T: Real>(p: &SsmView<'_, T>, channel: usize, len: usize) -> Vec<T> {
    assert!(channel < p.channels, "channel {channel} out of range");
    let n = p.n;
    let s = channel * n..(channel + 1) * n;
    let a: Vec<T> = p.a_raw[s.clone()].iter().map(|&r| transition(r)).collect();
    let mut state: Vec<T> = p.b[s.clone()].to_vec();
    let cw = &p.cw[s];
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        out.push(state.iter().zip(cw).map(|(&h, &c)| c * h).sum());
        state.iter_mut().zip(&a).for_each(|(h, &ak)| *h *= ak);
    }
    out
}

/// Natural log of `|g_t|`, evaluated in log space so that deep lags never underflow.
///
/// Returns `-inf` when every term vanishes or the terms cancel exactly.
pub fn log_abs_impulse<T: Real>(p: &SsmView<'_, T>, channel: usize, t: usize) -> f64 {
    assert!(t >= 1);
    let n = p.n;
    let terms: Vec<(f64, f64)> = (0..n)
        .filter_map(|k| {
            let i = channel * n + k;
            let coef = p.cw[i].to_f64() * p.b[i].to_f64();
            if coef == 0.0 {
                return None;
            }
            let ln_a = ln_transition::<T>(p.a_raw[i].to_f64());
            Some((coef.signum(), coef.abs().ln() + (t - 1) as f64 * ln_a))
        })
        .collect();
    let Some(m) = terms.iter().map(|t| t.1).reduce(f64::max) else {
        return f64::NEG_INFINITY;
    };
    let s: f64 = terms.iter().map(|(sg, l)| sg * (l - m).exp()).sum();
    if s == 0.0 {
        f64::NEG_INFINITY
    } else {
        m + s.abs().ln()
    }
}

/// `ln(sigmoid(r)) = -ln(1 + e^-r)`, with the same clamp as [`transition`].
fn ln_transition<T: Real>(a_raw: f64) -> f64 {
    let lim = T::A_RAW_LIMIT.to_f64();
    let r = a_raw.clamp(-lim, lim);
    if r >= 0.0 {
        -(-r).exp().ln_1p()
    } else {
        r - r.exp().ln_1p()
    }
}

/// Natural log of the geometric envelope `sum_n |cw b| * (max_n a)^(t-1)`.
pub fn log_envelope<T: Real>(p: &SsmView<'_, T>, channel: usize, t: usize) -> f64 {
    let n = p.n;
    let scale: f64 = (0..n)
        .map(|k| (p.cw[channel * n + k].to_f64() * p.b[channel * n + k].to_f64()).abs())
        .sum();
    let ln_amax = (0..n)
        .map(|k| ln_transition::<T>(p.a_raw[channel * n + k].to_f64()))
        .fold(f64::NEG_INFINITY, f64::max);
    scale.ln() + (t - 1) as f64 * ln_amax
}

/// Per-channel end-to-end sensitivity of a full-length versus a patch-length scan.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelDecay {
    pub channel: usize,
    /// `log10 |dy_L/dx_1|` for `L = L_full`.
    pub log10_full: f64,
    /// `log10 |dy_L/dx_1|` for `L = L_patch`.
    pub log10_patch: f64,
    /// `log10(patch / full)`.
    pub log10_ratio: f64,
    /// Lag-0 skip weight, reported separately from the state path.
    pub skip: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecayReport {
    pub l_full: usize,
    pub l_patch: usize,
    pub channels: Vec<ChannelDecay>,
    /// `log10 |g_t|` per lag (row) and channel (column), `t = 1..=rows`.
    pub log10_profile: Vec<Vec<f64>>,
}

/// Builds the decay report, profiling lags `1..=min(l_full, max_lags)`.
pub fn decay_profile<T: Real>(p: &SsmView<'_, T>, l_full: usize, l_patch: usize, max_lags: usize) -> Result<DecayReport> {
    if l_patch == 0 || l_patch > l_full {
        return Err(crate::Error::Invalid(format!(
            "decay profile needs 1 <= L_patch <= L_full, got {l_patch} and {l_full}"
        )));
    }
    let ln10 = std::f64::consts::LN_10;
    let channels = (0..p.channels)
        .map(|c| {
            let full = log_abs_impulse(p, c, l_full) / ln10;
            let patch = log_abs_impulse(p, c, l_patch) / ln10;
            let ratio = if l_full == l_patch { 0.0 } else { patch - full };
            ChannelDecay {
                channel: c,
                log10_full: full,
                log10_patch: patch,
                log10_ratio: ratio,
                skip: p.d[c].to_f64(),
            }
        })
        .collect();
    let rows = l_full.min(max_lags);
    let log10_profile = (1..=rows)
        .map(|t| (0..p.channels).map(|c| log_abs_impulse(p, c, t) / ln10).collect())
        .collect();
    Ok(DecayReport {
        l_full,
        l_patch,
        channels,
        log10_profile,
    })
}

fn fmt_num(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:.10e}")
    }
}

impl DecayReport {
    /// Tab-separated table: a per-lag profile, then a per-channel summary.
    pub fn to_tsv(&self) -> String {
        let c = self.channels.len();
        let mut s = String::from("lag");
        for ch in 0..c {
            s.push_str(&format!("\tg_c{ch}"));
        }
        for ch in 0..c {
            s.push_str(&format!("\tlog10_g_c{ch}"));
        }
        s.push('\n');
        for (i, row) in self.log10_profile.iter().enumerate() {
            s.push_str(&(i + 1).to_string());
            for v in row {
                s.push('\t');
                s.push_str(&fmt_num(10f64.powf(*v)));
            }
            for v in row {
                s.push('\t');
                s.push_str(&fmt_num(*v));
            }
            s.push('\n');
        }
        s.push_str("channel\tl_full\tl_patch\tlog10_sens_full\tlog10_sens_patch\tratio\tlog10_ratio\tskip_d\n");
        for ch in &self.channels {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                ch.channel,
                self.l_full,
                self.l_patch,
                fmt_num(ch.log10_full),
                fmt_num(ch.log10_patch),
                fmt_num(10f64.powf(ch.log10_ratio)),
                fmt_num(ch.log10_ratio),
                fmt_num(ch.skip),
            ));
        }
        s
    }
}
