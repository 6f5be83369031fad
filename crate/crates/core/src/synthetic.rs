//! Synthetic minute bars with a learnable drift.
//!
//! Prices follow a hidden sinusoid whose period wanders between regimes;
//! closes add Gaussian noise and wicks add a little more. The direction of
//! the hidden curve over the labeling horizon is a strong (but imperfect)
//! predictor of the label, which gives a known ceiling for classifiers.

use std::f64::consts::TAU;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{RawFrame, RawRow, HIGH};

/// Bars per trading session (09:15 to 15:29).
const BARS_PER_DAY: usize = 375;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthOptions {
    pub rows: usize,
    pub seed: u64,
    pub base_price: f64,
    pub amplitude: f64,
    pub noise: f64,
    pub wick: f64,
    pub min_period: f64,
    pub max_period: f64,
    /// Per-bar probability of drawing a new period.
    pub regime_change: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            rows: 20_000,
            seed: 1,
            base_price: 100.0,
            amplitude: 1.0,
            noise: 0.4,
            wick: 0.1,
            min_period: 80.0,
            max_period: 160.0,
            regime_change: 1.0 / 150.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthSeries {
    pub frame: RawFrame,
    /// Noise-free price underlying each bar.
    pub latent: Vec<f64>,
}

impl SynthSeries {
    /// Share of labelable bars where "hidden curve rises over the horizon"
    /// equals the actual label.
    pub fn latent_direction_accuracy(&self, horizon: usize) -> f64 {
        let rows = &self.frame.rows;
        if rows.len() <= horizon {
            return 0.0;
        }
        let n = rows.len() - horizon;
        let hits = (0..n)
            .filter(|&i| {
                let label = rows[i + horizon].high > rows[i].high;
                let guess = self.latent[i + horizon] > self.latent[i];
                label == guess
            })
            .count();
        hits as f64 / n as f64
    }
}

pub fn generate(options: &SynthOptions) -> SynthSeries {
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let normal = move |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
    let draw_period = |rng: &mut ChaCha8Rng| rng.random_range(options.min_period..=options.max_period);

    let mut phase = rng.random_range(0.0..TAU);
    let mut period = draw_period(&mut rng);
    let mut latent = Vec::with_capacity(options.rows);
    let mut close = Vec::with_capacity(options.rows);
    for _ in 0..options.rows {
        if rng.random::<f64>() < options.regime_change {
            period = draw_period(&mut rng);
        }
        phase += TAU / period;
        let l = options.base_price + options.amplitude * phase.sin();
        latent.push(l);
        close.push(l + options.noise * normal(&mut rng));
    }

    let rows = (0..options.rows)
        .map(|i| {
            let open = if i == 0 { close[0] } else { close[i - 1] };
            let high = open.max(close[i]) + options.wick * normal(&mut rng).abs();
            let low = open.min(close[i]) - options.wick * normal(&mut rng).abs();
            let (date, time) = timestamp(i);
            RawRow {
                open,
                high,
                low,
                close: close[i],
                date,
                time,
                index: i.to_string(),
            }
        })
        .collect();
    SynthSeries {
        frame: RawFrame { rows, dropped: 0 },
        latent,
    }
}

/// A perfectly flat market: every price equals `price`, so every label is 0.
pub fn flat_series(rows: usize, price: f64) -> RawFrame {
    RawFrame {
        rows: (0..rows)
            .map(|i| {
                let (date, time) = timestamp(i);
                RawRow {
                    open: price,
                    high: price,
                    low: price,
                    close: price,
                    date,
                    time,
                    index: i.to_string(),
                }
            })
            .collect(),
        dropped: 0,
    }
}

/// Writes `Date,Time,Open,High,Low,Close` rows.
pub fn write_csv<W: Write>(frame: &RawFrame, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["Date", "Time", "Open", "High", "Low", "Close"])?;
    for r in &frame.rows {
        w.write_record([
            r.date.clone(),
            r.time.clone(),
            r.open.to_string(),
            r.high.to_string(),
            r.low.to_string(),
            r.close.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_csv(frame: &RawFrame, path: impl AsRef<Path>) -> std::io::Result<()> {
    let file = std::fs::File::create(path)?;
    write_csv(frame, std::io::BufWriter::new(file)).map_err(std::io::Error::other)
}

/// Labels the frame would get; handy for reporting class balance.
pub fn label_rate(frame: &RawFrame, horizon: usize) -> f64 {
    let rows = &frame.rows;
    if rows.len() <= horizon {
        return 0.0;
    }
    let n = rows.len() - horizon;
    let pos = (0..n)
        .filter(|&i| rows[i + horizon].features()[HIGH] > rows[i].features()[HIGH])
        .count();
    pos as f64 / n as f64
}

/// Weekday sessions starting Monday 2015-01-05, one bar per minute.
fn timestamp(i: usize) -> (String, String) {
    let session = i / BARS_PER_DAY;
    let minute = 9 * 60 + 15 + i % BARS_PER_DAY;
    let days = 16_440 + (session / 5) * 7 + session % 5;
    let (y, m, d) = civil_from_days(days as i64);
    (
        format!("{y:04}-{m:02}-{d:02}"),
        format!("{:02}:{:02}", minute / 60, minute % 60),
    )
}

/// Days since 1970-01-01 to a proleptic Gregorian date.
fn civil_from_days(z: i64) -> (i64, u32, u32) {
    let z = z + 719_468;
    let era = z.div_euclid(146_097);
    let doe = z.rem_euclid(146_097);
    let yoe = (doe - doe / 1460 + doe / 36_524 - doe / 146_096) / 365;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let d = (doy - (153 * mp + 2) / 5 + 1) as u32;
    let m = if mp < 10 { mp + 3 } else { mp - 9 } as u32;
    let y = yoe + era * 400 + i64::from(m <= 2);
    (y, m, d)
}
