//! Synthetic radio model: per-link signal statistics, LoRa airtime and the
//! gateway's concurrent demodulation limit.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};

pub const RSSI_RANGE: (f64, f64) = (-118.0, -60.0);
pub const SNR_RANGE: (f64, f64) = (-16.5, 10.0);

/// Time on air of a LoRa frame, seconds. Coding rate 4/5, 8 preamble
/// symbols, explicit header, CRC on; low data rate optimisation at SF11
/// and SF12 on 125 kHz.
pub fn airtime_s(sf: u8, bw_khz: u16, payload_len: usize) -> f64 {
    let sf_f = sf as f64;
    let t_sym = 2f64.powi(sf as i32) / (bw_khz as f64 * 1000.0);
    let de = if bw_khz == 125 && sf >= 11 { 1.0 } else { 0.0 };
    let cr = 1.0;
    let num = 8.0 * payload_len as f64 - 4.0 * sf_f + 28.0 + 16.0;
    let den = 4.0 * (sf_f - 2.0 * de);
    let payload_symbols = 8.0 + ((num / den).ceil() * (cr + 4.0)).max(0.0);
    (8.0 + 4.25) * t_sym + payload_symbols * t_sym
}

/// Lowest SNR at which a spreading factor still demodulates, dB.
pub fn snr_floor_db(sf: u8) -> f64 {
    match sf {
        7 => -7.5,
        8 => -10.0,
        9 => -12.5,
        10 => -15.0,
        11 => -17.5,
        _ => -20.0,
    }
}

/// Signal statistics of one node-gateway link.
#[derive(Debug, Clone)]
pub struct Link {
    pub rssi_mean: f64,
    pub snr_mean: f64,
    rssi_jitter: Normal<f64>,
    snr_jitter: Normal<f64>,
    rng: StdRng,
}

impl Link {
    /// Draw static means uniformly from the configured ranges.
    pub fn random(seed: u64, rssi_sigma: f64, snr_sigma: f64) -> Self {
        Link::random_in(seed, SNR_RANGE, rssi_sigma, snr_sigma)
    }

    /// Like [`Link::random`] with the mean SNR drawn from `snr_range`.
    pub fn random_in(seed: u64, snr_range: (f64, f64), rssi_sigma: f64, snr_sigma: f64) -> Self {
        let mut rng = StdRng::seed_from_u64(seed);
        let rssi_mean = rng.random_range(RSSI_RANGE.0..=RSSI_RANGE.1);
        let snr_mean = rng.random_range(snr_range.0..=snr_range.1);
        Link::fixed(rssi_mean, snr_mean, rssi_sigma, snr_sigma, rng)
    }

    pub fn fixed(rssi_mean: f64, snr_mean: f64, rssi_sigma: f64, snr_sigma: f64, rng: StdRng) -> Self {
        Link {
            rssi_mean,
            snr_mean,
            rssi_jitter: Normal::new(0.0, rssi_sigma.max(0.0)).expect("finite sigma"),
            snr_jitter: Normal::new(0.0, snr_sigma.max(0.0)).expect("finite sigma"),
            rng,
        }
    }

    /// One reception: (RSSI dBm, SNR dB), clamped to the model ranges.
    /// SNR is reported in 0.25 dB steps like a real concentrator.
    pub fn sample(&mut self) -> (i32, f64) {
        let rssi = (self.rssi_mean + self.rssi_jitter.sample(&mut self.rng)).clamp(RSSI_RANGE.0, RSSI_RANGE.1);
        let snr = (self.snr_mean + self.snr_jitter.sample(&mut self.rng)).clamp(SNR_RANGE.0, SNR_RANGE.1);
        (rssi.round() as i32, (snr * 4.0).round() / 4.0)
    }
}

/// Admission control for overlapping receptions at one gateway.
#[derive(Debug, Clone)]
pub struct Demodulator {
    limit: usize,
    busy_until_ms: Vec<f64>,
}

impl Demodulator {
    pub fn new(limit: usize) -> Self {
        Demodulator {
            limit,
            busy_until_ms: Vec::new(),
        }
    }

    /// Try to start a reception at `now_ms` lasting `airtime_ms`.
    pub fn admit(&mut self, now_ms: f64, airtime_ms: f64) -> bool {
        self.busy_until_ms.retain(|end| *end > now_ms);
        if self.busy_until_ms.len() >= self.limit {
            return false;
        }
        self.busy_until_ms.push(now_ms + airtime_ms);
        true
    }

    pub fn active(&self, now_ms: f64) -> usize {
        self.busy_until_ms.iter().filter(|end| **end > now_ms).count()
    }
}
