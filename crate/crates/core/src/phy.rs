//! Uplink baseband chain: QPSK modulation, block Rayleigh fading, AWGN,
//! multi-user superposition, zero-forcing equalization, and realized SINR.
//!
//! One block is one transmission interval with a single channel realization
//! per user. The desired user targets a configured average SNR; every
//! interferer is received a configured number of dB below the desired user's
//! received power. Power control is exact per realization — the Rayleigh draw
//! contributes the channel phase while its magnitude is absorbed by the power
//! target — so a block's SINR is set by its user powers and the noise floor,
//! which is what the downstream class labels quantize.

use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SQRT_HALF: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// Minimum equalizer magnitude; below this the channel is unusable.
pub const ZF_MAGNITUDE_FLOOR: f64 = 1e-12;

/// Ordered complex baseband samples stored as separate I/Q arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexSequence {
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl ComplexSequence {
    pub fn with_capacity(n: usize) -> Self {
        Self {
            re: Vec::with_capacity(n),
            im: Vec::with_capacity(n),
        }
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            re: vec![0.0; n],
            im: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        debug_assert_eq!(self.re.len(), self.im.len());
        self.re.len()
    }

    pub fn is_empty(&self) -> bool {
        self.re.is_empty()
    }

    pub fn push(&mut self, z: Complex64) {
        self.re.push(z.re);
        self.im.push(z.im);
    }

    pub fn get(&self, i: usize) -> Complex64 {
        Complex64::new(self.re[i], self.im[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = Complex64> + '_ {
        self.re
            .iter()
            .zip(self.im.iter())
            .map(|(&re, &im)| Complex64::new(re, im))
    }

    /// Mean of |z|^2 over the sequence.
    pub fn mean_power(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let sum: f64 = self.iter().map(|z| z.norm_sqr()).sum();
        sum / self.len() as f64
    }

    pub fn all_finite(&self) -> bool {
        self.re.iter().chain(self.im.iter()).all(|v| v.is_finite())
    }
}

/// Configuration for one transmission block.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockConfig {
    pub symbols_per_block: usize,
    /// Average received SNR target of the desired user, in dB.
    pub desired_snr_db: f64,
    /// Received interference power relative to the desired user's received
    /// power, one entry per interferer, in dB (negative = weaker).
    pub interferer_offsets_db: Vec<f64>,
    /// AWGN variance σ² (linear).
    pub noise_variance: f64,
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.symbols_per_block == 0 {
            return Err(Error::InvalidConfig("symbols_per_block must be > 0".into()));
        }
        if !(self.noise_variance > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "noise_variance must be > 0, got {}",
                self.noise_variance
            )));
        }
        Ok(())
    }

    /// Number of users: the desired one plus one per offset.
    pub fn user_count(&self) -> usize {
        1 + self.interferer_offsets_db.len()
    }
}

/// One simulated block: channel draws, per-user symbols, received and
/// equalized sequences, and the realized SINR.
#[derive(Debug, Clone)]
pub struct BlockRealization {
    /// Effective received coefficient of the desired user (power scale folded in).
    pub h_desired: Complex64,
    /// Effective received coefficients of the interferers, power-scaled.
    pub h_interferers: Vec<Complex64>,
    /// Unit-power transmit symbols, desired user first.
    pub tx_symbols: Vec<ComplexSequence>,
    pub received: ComplexSequence,
    pub equalized: ComplexSequence,
    pub realized_sinr_db: f64,
}

/// Map a bit stream onto the Gray-coded unit-power QPSK constellation.
///
/// Pair `(b0, b1)` selects the quadrant: `00 → (+1+j)/√2`, `01 → (+1−j)/√2`,
/// `11 → (−1−j)/√2`, `10 → (−1+j)/√2`. Every symbol has |x|² = 1.
pub fn qpsk_modulate(bits: &[u8]) -> Result<ComplexSequence> {
    if bits.len() % 2 != 0 {
        return Err(Error::OddBitCount(bits.len()));
    }
    let mut out = ComplexSequence::with_capacity(bits.len() / 2);
    for pair in bits.chunks_exact(2) {
        let re = if pair[0] == 0 { SQRT_HALF } else { -SQRT_HALF };
        let im = if pair[1] == 0 { SQRT_HALF } else { -SQRT_HALF };
        out.push(Complex64::new(re, im));
    }
    Ok(out)
}

/// Draw `count` i.i.d. circularly symmetric complex Gaussian samples with
/// zero mean and unit variance (1/2 per component).
pub fn sample_rayleigh(rng: &mut ChaCha8Rng, count: usize) -> ComplexSequence {
    assert!(count >= 1, "count must be >= 1");
    let mut out = ComplexSequence::with_capacity(count);
    for _ in 0..count {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        out.push(Complex64::new(re * SQRT_HALF, im * SQRT_HALF));
    }
    out
}

/// Element-wise division of the received sequence by the channel coefficient.
pub fn zf_equalize(received: &ComplexSequence, h_desired: Complex64) -> Result<ComplexSequence> {
    let mag = h_desired.norm();
    if mag < ZF_MAGNITUDE_FLOOR {
        return Err(Error::DegenerateChannel(mag));
    }
    let inv = h_desired.inv();
    let mut out = ComplexSequence::with_capacity(received.len());
    for z in received.iter() {
        out.push(z * inv);
    }
    Ok(out)
}

/// SINR in dB: `10·log10(|h1|² / (Σ|hk|² + σ²))` with power-scaled
/// coefficients. Degenerates to the plain SNR when there are no interferers.
pub fn realized_sinr(
    h_desired: Complex64,
    h_interferers_scaled: &[Complex64],
    noise_variance: f64,
) -> f64 {
    assert!(noise_variance > 0.0, "noise_variance must be > 0");
    let interference: f64 = h_interferers_scaled.iter().map(|h| h.norm_sqr()).sum();
    10.0 * (h_desired.norm_sqr() / (interference + noise_variance)).log10()
}

fn unit_phase(h: Complex64) -> Complex64 {
    let mag = h.norm();
    if mag < ZF_MAGNITUDE_FLOOR {
        // Measure-zero draw; fall back to a flat phase.
        Complex64::new(1.0, 0.0)
    } else {
        h / mag
    }
}

/// Simulate one block: draw per-user channels, modulate random bits,
/// superimpose with AWGN, equalize, and record the realized SINR.
///
/// Draw order is fixed (channel taps, then bits per user, then noise) so a
/// block is a pure function of `(rng state, cfg)`.
pub fn transmit_block(rng: &mut ChaCha8Rng, cfg: &BlockConfig) -> Result<BlockRealization> {
    cfg.validate()?;
    let n_sym = cfg.symbols_per_block;

    // One Rayleigh tap per user; power control pins the received magnitude,
    // the tap keeps its phase.
    let desired_amp = (cfg.noise_variance * 10f64.powf(cfg.desired_snr_db / 10.0)).sqrt();
    let taps = sample_rayleigh(rng, cfg.user_count());
    let h_desired = unit_phase(taps.get(0)) * desired_amp;
    let h_interferers: Vec<Complex64> = cfg
        .interferer_offsets_db
        .iter()
        .enumerate()
        .map(|(k, &off_db)| unit_phase(taps.get(k + 1)) * (desired_amp * 10f64.powf(off_db / 20.0)))
        .collect();

    let mut tx_symbols = Vec::with_capacity(cfg.user_count());
    for _ in 0..cfg.user_count() {
        let bits: Vec<u8> = (0..2 * n_sym).map(|_| rng.gen_range(0..2u8)).collect();
        tx_symbols.push(qpsk_modulate(&bits)?);
    }

    let noise_scale = (cfg.noise_variance / 2.0).sqrt();
    let mut received = ComplexSequence::with_capacity(n_sym);
    for t in 0..n_sym {
        let mut y = h_desired * tx_symbols[0].get(t);
        for (k, h) in h_interferers.iter().enumerate() {
            y += *h * tx_symbols[k + 1].get(t);
        }
        let nr: f64 = rng.sample(StandardNormal);
        let ni: f64 = rng.sample(StandardNormal);
        received.push(y + Complex64::new(nr * noise_scale, ni * noise_scale));
    }

    // ZF corrects the channel phase; the received amplitude is the quantity
    // the classifier downstream has to recognize, so it stays in the samples.
    let equalized = zf_equalize(&received, unit_phase(h_desired))?;
    let realized_sinr_db = realized_sinr(h_desired, &h_interferers, cfg.noise_variance);

    Ok(BlockRealization {
        h_desired,
        h_interferers,
        tx_symbols,
        received,
        equalized,
        realized_sinr_db,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use approx::assert_relative_eq;

    #[test]
    fn qpsk_gray_map_reference() {
        let seq = qpsk_modulate(&[0, 0, 0, 1, 1, 1, 1, 0]).unwrap();
        let expected = [
            (SQRT_HALF, SQRT_HALF),
            (SQRT_HALF, -SQRT_HALF),
            (-SQRT_HALF, -SQRT_HALF),
            (-SQRT_HALF, SQRT_HALF),
        ];
        for (i, &(re, im)) in expected.iter().enumerate() {
            assert_eq!(seq.get(i), Complex64::new(re, im));
        }
    }

    #[test]
    fn qpsk_empty_input() {
        assert_eq!(qpsk_modulate(&[]).unwrap().len(), 0);
    }

    #[test]
    fn qpsk_odd_bit_count_rejected() {
        assert!(matches!(qpsk_modulate(&[0, 1, 0]), Err(Error::OddBitCount(3))));
    }

    #[test]
    fn qpsk_unit_power_exact() {
        let mut rng = substream(11, "qpsk-test", 0);
        let bits: Vec<u8> = (0..2000).map(|_| rng.gen_range(0..2u8)).collect();
        let seq = qpsk_modulate(&bits).unwrap();
        for z in seq.iter() {
            assert_eq!(z.norm_sqr(), 1.0, "constellation power must be exactly 1");
        }
        assert_eq!(seq.mean_power(), 1.0);
    }

    #[test]
    fn rayleigh_moments() {
        let mut rng = substream(11, "rayleigh-test", 0);
        let n = 100_000;
        let seq = sample_rayleigh(&mut rng, n);
        let mean_re: f64 = seq.re.iter().sum::<f64>() / n as f64;
        let mean_im: f64 = seq.im.iter().sum::<f64>() / n as f64;
        // Each component has variance 1/2; 4 sigma of the sample mean.
        let bound = 4.0 * (0.5 / n as f64).sqrt();
        assert!(mean_re.abs() < bound, "mean re {mean_re} beyond {bound}");
        assert!(mean_im.abs() < bound, "mean im {mean_im} beyond {bound}");
        let power = seq.mean_power();
        assert!((power - 1.0).abs() < 0.02, "E|h|^2 = {power}, expected 1 +- 2%");
    }

    #[test]
    fn rayleigh_phase_uniform_chi_square() {
        let mut rng = substream(11, "rayleigh-phase", 0);
        let n = 100_000;
        let seq = sample_rayleigh(&mut rng, n);
        let bins = 16usize;
        let mut observed = vec![0usize; bins];
        for z in seq.iter() {
            let phase = z.im.atan2(z.re) + std::f64::consts::PI;
            let b = ((phase / (2.0 * std::f64::consts::PI)) * bins as f64) as usize;
            observed[b.min(bins - 1)] += 1;
        }
        let expected = n as f64 / bins as f64;
        let chi2: f64 = observed
            .iter()
            .map(|&o| (o as f64 - expected).powi(2) / expected)
            .sum();
        // Critical value for df = 15 at the 1% level.
        assert!(chi2 < 30.578, "chi-square {chi2} rejects uniform phase");
    }

    #[test]
    fn rayleigh_deterministic() {
        let a = sample_rayleigh(&mut substream(5, "r", 1), 1);
        let b = sample_rayleigh(&mut substream(5, "r", 1), 1);
        assert_eq!(a.get(0), b.get(0));
    }

    #[test]
    fn zf_round_trip() {
        let mut rng = substream(3, "zf", 0);
        let h = Complex64::new(0.3, -1.2);
        let x = sample_rayleigh(&mut rng, 64);
        let mut y = ComplexSequence::with_capacity(64);
        for z in x.iter() {
            y.push(z * h);
        }
        let back = zf_equalize(&y, h).unwrap();
        for i in 0..64 {
            assert_relative_eq!(back.re[i], x.re[i], max_relative = 1e-12);
            assert_relative_eq!(back.im[i], x.im[i], max_relative = 1e-12);
        }
    }

    #[test]
    fn zf_identity_and_rotation() {
        let x = qpsk_modulate(&[0, 0, 1, 1]).unwrap();
        let id = zf_equalize(&x, Complex64::new(1.0, 0.0)).unwrap();
        assert_eq!(id, x);

        let y = ComplexSequence {
            re: vec![1.0],
            im: vec![0.0],
        };
        let rot = zf_equalize(&y, Complex64::new(0.0, 1.0)).unwrap();
        assert_relative_eq!(rot.re[0], 0.0, epsilon = 1e-15);
        assert_relative_eq!(rot.im[0], -1.0, epsilon = 1e-15);
    }

    #[test]
    fn zf_degenerate_channel() {
        let x = ComplexSequence::zeros(4);
        let err = zf_equalize(&x, Complex64::new(1e-13, 0.0)).unwrap_err();
        assert!(matches!(err, Error::DegenerateChannel(_)));
    }

    #[test]
    fn sinr_formula_hand_values() {
        // |h1|^2 = 1, no interferers, sigma^2 = 0.5 -> 10 log10 2.
        let v = realized_sinr(Complex64::new(1.0, 0.0), &[], 0.5);
        assert_relative_eq!(v, 10.0 * 2f64.log10(), max_relative = 1e-12);
        // |h1|^2 = 4, |h2|^2 = 1, sigma^2 = 1 -> same value.
        let v = realized_sinr(Complex64::new(2.0, 0.0), &[Complex64::new(0.0, 1.0)], 1.0);
        assert_relative_eq!(v, 10.0 * 2f64.log10(), max_relative = 1e-12);
    }

    #[test]
    fn sinr_dual_route() {
        // Independent re-evaluation: ln-domain arithmetic and reversed
        // accumulation order must agree with the log10 implementation.
        let mut rng = substream(17, "sinr-dual", 0);
        for _ in 0..200 {
            let h1 = sample_rayleigh(&mut rng, 1).get(0);
            let ints: Vec<Complex64> = sample_rayleigh(&mut rng, 3).iter().collect();
            let sigma2 = rng.gen_range(0.01..2.0);
            let fast = realized_sinr(h1, &ints, sigma2);
            let mut denom = sigma2;
            for h in ints.iter().rev() {
                denom += h.re * h.re + h.im * h.im;
            }
            let slow = 10.0 * ((h1.re * h1.re + h1.im * h1.im).ln() - denom.ln())
                / std::f64::consts::LN_10;
            assert_relative_eq!(fast, slow, max_relative = 1e-12);
        }
    }

    #[test]
    fn sinr_monotone_in_interference() {
        let h1 = Complex64::new(1.3, 0.4);
        let base = realized_sinr(h1, &[], 0.7);
        let mut ints = Vec::new();
        for k in 1..5 {
            ints.push(Complex64::new(0.1 * k as f64, -0.05));
            let v = realized_sinr(h1, &ints, 0.7);
            assert!(v < base, "adding interferers must strictly lower SINR");
            let fewer = realized_sinr(h1, &ints[..ints.len() - 1], 0.7);
            assert!(v < fewer);
        }
    }

    #[test]
    fn block_no_interferers_matches_snr() {
        let cfg = BlockConfig {
            symbols_per_block: 64,
            desired_snr_db: 10.0,
            interferer_offsets_db: vec![],
            noise_variance: 0.5,
        };
        let block = transmit_block(&mut substream(1, "blk", 0), &cfg).unwrap();
        let snr = 10.0 * (block.h_desired.norm_sqr() / cfg.noise_variance).log10();
        assert_relative_eq!(block.realized_sinr_db, snr, max_relative = 1e-12);
        assert_relative_eq!(block.realized_sinr_db, 10.0, max_relative = 1e-12);
        assert_eq!(block.received.len(), 64);
    }

    #[test]
    fn block_equal_power_interferer_low_noise() {
        let cfg = BlockConfig {
            symbols_per_block: 16,
            desired_snr_db: 0.0,
            interferer_offsets_db: vec![0.0],
            noise_variance: 1e-9,
        };
        let block = transmit_block(&mut substream(1, "blk", 1), &cfg).unwrap();
        assert!(block.realized_sinr_db.abs() < 1e-6, "equal powers -> ~0 dB");
    }

    #[test]
    fn block_interference_offset_monte_carlo() {
        // Case-2 style: one interferer 4 dB below the desired user. The
        // received power ratio averaged over blocks must sit within 0.2 dB.
        let cfg = BlockConfig {
            symbols_per_block: 8,
            desired_snr_db: 10.0,
            interferer_offsets_db: vec![-4.0],
            noise_variance: 1.0,
        };
        let mut rng = substream(9, "blk-mc", 0);
        let (mut sig, mut int) = (0.0, 0.0);
        for _ in 0..10_000 {
            let block = transmit_block(&mut rng, &cfg).unwrap();
            sig += block.h_desired.norm_sqr();
            int += block.h_interferers[0].norm_sqr();
        }
        let ratio_db = 10.0 * (int / sig).log10();
        assert!(
            (ratio_db + 4.0).abs() < 0.2,
            "interference-to-signal ratio {ratio_db} dB, expected -4 +- 0.2"
        );
    }

    #[test]
    fn block_deterministic_for_seed() {
        let cfg = BlockConfig {
            symbols_per_block: 32,
            desired_snr_db: 5.0,
            interferer_offsets_db: vec![-4.0],
            noise_variance: 1.0,
        };
        let a = transmit_block(&mut substream(4, "det", 2), &cfg).unwrap();
        let b = transmit_block(&mut substream(4, "det", 2), &cfg).unwrap();
        assert_eq!(a.h_desired, b.h_desired);
        assert_eq!(a.received, b.received);
        assert_eq!(a.equalized, b.equalized);
        assert_eq!(a.realized_sinr_db, b.realized_sinr_db);
    }

    #[test]
    fn block_equalized_phase_aligned() {
        // After phase-only ZF the desired constellation must sit on the real
        // power-scaled grid: correlating equalized samples with tx symbols
        // recovers a positive real gain ~ |h_desired|.
        let cfg = BlockConfig {
            symbols_per_block: 392,
            desired_snr_db: 20.0,
            interferer_offsets_db: vec![],
            noise_variance: 1.0,
        };
        let block = transmit_block(&mut substream(2, "phase", 0), &cfg).unwrap();
        let mut corr = Complex64::new(0.0, 0.0);
        for (z, x) in block.equalized.iter().zip(block.tx_symbols[0].iter()) {
            corr += z * x.conj();
        }
        corr /= cfg.symbols_per_block as f64;
        assert!(corr.re > 0.0);
        assert_relative_eq!(corr.re, block.h_desired.norm(), max_relative = 0.05);
        assert!(corr.im.abs() < 0.05 * corr.re);
    }
}
