//! Spectral frontend: STFT, log-power amplitude features and interchannel
//! phase-difference features, plus WAV and feature-dump I/O.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HOP_MS: u32 = 10;
pub const WIN_MS: u32 = 25;
pub const FFT_SIZE: usize = 512;
pub const NUM_BINS: usize = FFT_SIZE / 2 + 1;
/// Per-channel feature width: log power plus cos and sin IPD.
pub const FEATURE_DIM: usize = 3 * NUM_BINS;
pub const POWER_FLOOR: f64 = 1e-10;
pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

pub const FEATURE_MAGIC: &[u8; 8] = b"MCFEAT01";

#[derive(Clone, Debug, PartialEq)]
pub struct MultiChannelWave {
    /// `samples[c][n]`, nominally in `[-1, 1]`.
    pub samples: Vec<Vec<f64>>,
    pub sample_rate_hz: u32,
    pub utterance_id: String,
}

impl MultiChannelWave {
    pub fn new(samples: Vec<Vec<f64>>, sample_rate_hz: u32, utterance_id: impl Into<String>) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::SingleChannel(samples.len()));
        }
        let n = samples[0].len();
        if let Some(bad) = samples.iter().find(|c| c.len() != n) {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: bad.len(),
            });
        }
        Ok(Self {
            samples,
            sample_rate_hz,
            utterance_id: utterance_id.into(),
        })
    }

    pub fn channels(&self) -> usize {
        self.samples.len()
    }

    pub fn len(&self) -> usize {
        self.samples.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn duration_s(&self) -> f64 {
        self.len() as f64 / self.sample_rate_hz as f64
    }

    pub fn peak(&self) -> f64 {
        self.samples
            .iter()
            .flatten()
            .fold(0.0f64, |m, &x| m.max(x.abs()))
    }
}

/// Hop and window sizes in samples for a sample rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Framing {
    pub hop: usize,
    pub win: usize,
}

impl Framing {
    pub fn for_rate(sample_rate_hz: u32) -> Result<Self> {
        let sr = sample_rate_hz as u64;
        if sr == 0 || !(sr * HOP_MS as u64).is_multiple_of(1000) || !(sr * WIN_MS as u64).is_multiple_of(1000) {
            return Err(Error::SampleRateUnsupported(sample_rate_hz));
        }
        let hop = (sr * HOP_MS as u64 / 1000) as usize;
        let win = (sr * WIN_MS as u64 / 1000) as usize;
        if win > FFT_SIZE {
            return Err(Error::SampleRateUnsupported(sample_rate_hz));
        }
        Ok(Self { hop, win })
    }

    /// Frames lying entirely inside `n` samples.
    pub fn frame_count(&self, n: usize) -> usize {
        if n < self.win {
            0
        } else {
            1 + (n - self.win) / self.hop
        }
    }
}

/// Periodic Hann window.
pub fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos())
        .collect()
}

#[derive(Clone, Debug)]
pub struct ComplexSpectrogram {
    /// `values[(c * frames + t) * bins + k]`
    pub values: Vec<Complex64>,
    pub channels: usize,
    pub frames: usize,
    pub bins: usize,
    pub framing: Framing,
}

impl ComplexSpectrogram {
    pub fn at(&self, c: usize, t: usize, k: usize) -> Complex64 {
        self.values[(c * self.frames + t) * self.bins + k]
    }

    fn frame(&self, c: usize, t: usize) -> &[Complex64] {
        let start = (c * self.frames + t) * self.bins;
        &self.values[start..start + self.bins]
    }
}

/// Short-time Fourier transform of every channel: Hann window of one
/// 25 ms window, zero-padded to 512 points, 10 ms hop, no signal padding.
pub fn stft(wave: &MultiChannelWave) -> Result<ComplexSpectrogram> {
    let framing = Framing::for_rate(wave.sample_rate_hz)?;
    if wave.len() < framing.win {
        return Err(Error::WaveTooShort {
            samples: wave.len(),
            window: framing.win,
        });
    }
    let frames = framing.frame_count(wave.len());
    let window = hann(framing.win);
    let fft: Arc<dyn Fft<f64>> = FftPlanner::new().plan_fft_forward(FFT_SIZE);
    let mut values = Vec::with_capacity(wave.channels() * frames * NUM_BINS);
    let mut buf = vec![Complex64::new(0.0, 0.0); FFT_SIZE];
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    for channel in &wave.samples {
        for t in 0..frames {
            let start = t * framing.hop;
            for (i, slot) in buf.iter_mut().enumerate() {
                *slot = if i < framing.win {
                    Complex64::new(channel[start + i] * window[i], 0.0)
                } else {
                    Complex64::new(0.0, 0.0)
                };
            }
            fft.process_with_scratch(&mut buf, &mut scratch);
            values.extend_from_slice(&buf[..NUM_BINS]);
        }
    }
    Ok(ComplexSpectrogram {
        values,
        channels: wave.channels(),
        frames,
        bins: NUM_BINS,
        framing,
    })
}

/// `ln(max(|X|^2, 1e-10))`, laid out `[C, T, F]`.
pub fn log_power(spec: &ComplexSpectrogram) -> Vec<f32> {
    spec.values
        .iter()
        .map(|x| x.norm_sqr().max(POWER_FLOOR).ln() as f32)
        .collect()
}

/// Channel `c` is paired with `(c + 1) % C`.
pub fn phase_partner(c: usize, channels: usize) -> usize {
    (c + 1) % channels
}

/// cos and sin of the phase difference between each channel and its
/// partner, laid out `[C, T, 2F]` with all cosines before all sines.
pub fn ipd_features(spec: &ComplexSpectrogram) -> Result<Vec<f32>> {
    let c_n = spec.channels;
    if c_n < 2 {
        return Err(Error::SingleChannel(c_n));
    }
    let f = spec.bins;
    let mut out = vec![0.0f32; c_n * spec.frames * 2 * f];
    for c in 0..c_n {
        let p = phase_partner(c, c_n);
        for t in 0..spec.frames {
            let (xs, ps) = (spec.frame(c, t), spec.frame(p, t));
            let row = &mut out[(c * spec.frames + t) * 2 * f..(c * spec.frames + t + 1) * 2 * f];
            for k in 0..f {
                let (a, b) = (xs[k], ps[k]);
                let cross = a * b.conj();
                let denom = a.norm() * b.norm();
                let silent = a.norm_sqr() < POWER_FLOOR && b.norm_sqr() < POWER_FLOOR;
                let (cos, sin) = if silent || denom == 0.0 {
                    (1.0, 0.0)
                } else {
                    (cross.re / denom, cross.im / denom)
                };
                row[k] = cos as f32;
                row[f + k] = sin as f32;
            }
        }
    }
    Ok(out)
}

/// Amplitude and phase features of one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTensor {
    pub channels: usize,
    pub frames: usize,
    pub bins: usize,
    /// `[C, T, F]`
    pub amplitude: Vec<f32>,
    /// `[C, T, 2F]`
    pub phase: Vec<f32>,
}

impl FeatureTensor {
    pub fn new(channels: usize, frames: usize, bins: usize, amplitude: Vec<f32>, phase: Vec<f32>) -> Result<Self> {
        if amplitude.len() != channels * frames * bins {
            return Err(Error::DimensionMismatch {
                expected: channels * frames * bins,
                got: amplitude.len(),
            });
        }
        if phase.len() != 2 * channels * frames * bins {
            return Err(Error::DimensionMismatch {
                expected: 2 * channels * frames * bins,
                got: phase.len(),
            });
        }
        Ok(Self {
            channels,
            frames,
            bins,
            amplitude,
            phase,
        })
    }

    /// Width of one channel's combined frame vector.
    pub fn dim(&self) -> usize {
        3 * self.bins
    }

    pub fn amplitude_row(&self, c: usize, t: usize) -> &[f32] {
        let s = (c * self.frames + t) * self.bins;
        &self.amplitude[s..s + self.bins]
    }

    pub fn phase_row(&self, c: usize, t: usize) -> &[f32] {
        let s = (c * self.frames + t) * 2 * self.bins;
        &self.phase[s..s + 2 * self.bins]
    }

    /// `[X_c^amplitude ; X_c^phase]` for every frame: `[T, 3F]`.
    pub fn channel_matrix(&self, c: usize) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.frames * self.dim());
        for t in 0..self.frames {
            out.extend_from_slice(self.amplitude_row(c, t));
            out.extend_from_slice(self.phase_row(c, t));
        }
        out
    }

    /// Reorders the channel axis: output channel `i` is input channel
    /// `order[i]`. Feature values are carried over unchanged.
    pub fn permute_channels(&self, order: &[usize]) -> Result<Self> {
        if order.len() != self.channels {
            return Err(Error::DimensionMismatch {
                expected: self.channels,
                got: order.len(),
            });
        }
        let mut amplitude = Vec::with_capacity(self.amplitude.len());
        let mut phase = Vec::with_capacity(self.phase.len());
        for &src in order {
            let a = self.frames * self.bins;
            amplitude.extend_from_slice(&self.amplitude[src * a..(src + 1) * a]);
            phase.extend_from_slice(&self.phase[2 * src * a..2 * (src + 1) * a]);
        }
        Self::new(self.channels, self.frames, self.bins, amplitude, phase)
    }

    pub fn is_finite(&self) -> bool {
        self.amplitude.iter().chain(&self.phase).all(|x| x.is_finite())
    }
}

pub fn extract_features(wave: &MultiChannelWave) -> Result<FeatureTensor> {
    let spec = stft(wave)?;
    let amplitude = log_power(&spec);
    let phase = ipd_features(&spec)?;
    FeatureTensor::new(spec.channels, spec.frames, spec.bins, amplitude, phase)
}

/// Per-dimension mean and standard deviation over the `3F` frame vector,
/// pooled across channels and frames so every channel is normalized alike.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl FeatureStats {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn estimate<'a>(feats: impl IntoIterator<Item = &'a FeatureTensor>) -> Self {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut count = 0usize;
        for f in feats {
            if sum.is_empty() {
                sum = vec![0.0; f.dim()];
                sq = vec![0.0; f.dim()];
            }
            for c in 0..f.channels {
                for t in 0..f.frames {
                    let row = f.amplitude_row(c, t).iter().chain(f.phase_row(c, t));
                    for ((s, q), &x) in sum.iter_mut().zip(sq.iter_mut()).zip(row) {
                        *s += x as f64;
                        *q += (x as f64) * (x as f64);
                    }
                    count += 1;
                }
            }
        }
        if count == 0 {
            return Self::identity(FEATURE_DIM);
        }
        let n = count as f64;
        let mean: Vec<f32> = sum.iter().map(|s| (s / n) as f32).collect();
        let std = sum
            .iter()
            .zip(&sq)
            .map(|(s, q)| {
                let m = s / n;
                ((q / n - m * m).max(0.0).sqrt().max(1e-3)) as f32
            })
            .collect();
        Self { mean, std }
    }

    pub fn normalize(&self, f: &FeatureTensor) -> FeatureTensor {
        let b = f.bins;
        let mut out = f.clone();
        for row in out.amplitude.chunks_mut(b) {
            for (k, x) in row.iter_mut().enumerate() {
                *x = (*x - self.mean[k]) / self.std[k];
            }
        }
        for row in out.phase.chunks_mut(2 * b) {
            for (k, x) in row.iter_mut().enumerate() {
                *x = (*x - self.mean[b + k]) / self.std[b + k];
            }
        }
        out
    }
}

pub fn read_wav(path: &Path) -> Result<MultiChannelWave> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = hound::WavReader::new(BufReader::new(file))?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::Format {
            what: "wav",
            reason: format!(
                "expected PCM16, got {:?} at {} bits",
                spec.sample_format, spec.bits_per_sample
            ),
        });
    }
    let c = spec.channels as usize;
    let mut samples = vec![Vec::new(); c];
    for (i, s) in reader.samples::<i16>().enumerate() {
        samples[i % c].push(s? as f64 / 32768.0);
    }
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    MultiChannelWave::new(samples, spec.sample_rate, id)
}

pub fn write_wav(path: &Path, wave: &MultiChannelWave) -> Result<()> {
    let spec = hound::WavSpec {
        channels: wave.channels() as u16,
        sample_rate: wave.sample_rate_hz,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = hound::WavWriter::new(BufWriter::new(file), spec)?;
    for n in 0..wave.len() {
        for ch in &wave.samples {
            let v = (ch[n] * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
            writer.write_sample(v)?;
        }
    }
    writer.finalize()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DumpHeader {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub hop_ms: u32,
    pub win_ms: u32,
    pub fft_size: usize,
}

impl DumpHeader {
    pub fn new(shape: Vec<usize>) -> Self {
        Self {
            shape,
            dtype: "f32le".into(),
            hop_ms: HOP_MS,
            win_ms: WIN_MS,
            fft_size: FFT_SIZE,
        }
    }
}

/// Writes `MCFEAT01`, a little-endian u64 header length, the JSON header,
/// then the row-major little-endian f32 payload.
pub fn write_dump(w: &mut impl Write, header: &DumpHeader, payload: &[f32]) -> Result<()> {
    let expected: usize = header.shape.iter().product();
    if expected != payload.len() {
        return Err(Error::DimensionMismatch {
            expected,
            got: payload.len(),
        });
    }
    let json = serde_json::to_vec(header)?;
    let io = |e| Error::io("<feature dump>", e);
    w.write_all(FEATURE_MAGIC).map_err(io)?;
    w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&json).map_err(io)?;
    for x in payload {
        w.write_all(&x.to_le_bytes()).map_err(io)?;
    }
    Ok(())
}

pub fn read_dump(r: &mut impl Read) -> Result<(DumpHeader, Vec<f32>)> {
    let io = |e| Error::io("<feature dump>", e);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != FEATURE_MAGIC {
        return Err(Error::Format {
            what: "feature dump",
            reason: "bad magic".into(),
        });
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(io)?;
    let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut json).map_err(io)?;
    let header: DumpHeader = serde_json::from_slice(&json)?;
    let n: usize = header.shape.iter().product();
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes).map_err(io)?;
    let payload = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok((header, payload))
}

/// Feature payload `[C, T, 3F]`, each row amplitude then phase.
pub fn feature_payload(f: &FeatureTensor) -> Vec<f32> {
    (0..f.channels).flat_map(|c| f.channel_matrix(c)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn wave(channels: Vec<Vec<f64>>) -> MultiChannelWave {
        MultiChannelWave::new(channels, 16_000, "t").unwrap()
    }

    fn sine(freq: f64, n: usize, delay: f64) -> Vec<f64> {
        (0..n)
            .map(|i| (2.0 * PI * freq * (i as f64 - delay) / 16_000.0).sin() * 0.5)
            .collect()
    }

    #[test]
    fn one_second_gives_98_frames() {
        let w = wave(vec![vec![0.1; 16_000], vec![0.1; 16_000]]);
        let s = stft(&w).unwrap();
        assert_eq!((s.frames, s.bins), (98, 257));
    }

    #[test]
    fn framing_errors() {
        let w = wave(vec![vec![0.0; 399], vec![0.0; 399]]);
        assert!(matches!(stft(&w), Err(Error::WaveTooShort { samples: 399, window: 400 })));
        let mut w = wave(vec![vec![0.0; 1000], vec![0.0; 1000]]);
        w.sample_rate_hz = 44_100;
        assert!(matches!(stft(&w), Err(Error::SampleRateUnsupported(44_100))));
        assert_eq!(Framing::for_rate(8_000).unwrap(), Framing { hop: 80, win: 200 });
    }

    #[test]
    fn constant_signal_peaks_at_dc() {
        let w = wave(vec![vec![1.0; 800], vec![1.0; 800]]);
        let s = stft(&w).unwrap();
        let mags: Vec<f64> = (0..s.bins).map(|k| s.at(0, 0, k).norm()).collect();
        let argmax = (0..s.bins).max_by(|&a, &b| mags[a].total_cmp(&mags[b])).unwrap();
        assert_eq!(argmax, 0);
        // Zero-padding 400 -> 512 leaves Hann sidelobes: the main lobe spans
        // about 2.6 bins, beyond it the first sidelobe sits near -31.5 dB.
        for k in 3..s.bins {
            assert!(mags[k] < 3e-2 * mags[0], "bin {k}: {}", mags[k] / mags[0]);
        }
    }

    #[test]
    fn sine_peaks_at_expected_bin() {
        let x = sine(1000.0, 1600, 0.0);
        let s = stft(&wave(vec![x.clone(), x])).unwrap();
        for t in 0..s.frames {
            let argmax = (0..s.bins)
                .max_by(|&a, &b| s.at(0, t, a).norm().total_cmp(&s.at(0, t, b).norm()))
                .unwrap();
            assert_eq!(argmax, 32);
        }
    }

    #[test]
    fn log_power_values() {
        let spec = ComplexSpectrogram {
            values: vec![
                Complex64::new(1.0, 0.0),
                Complex64::new(0.0, 0.0),
                Complex64::new(0.0, std::f64::consts::E),
            ],
            channels: 1,
            frames: 1,
            bins: 3,
            framing: Framing { hop: 160, win: 400 },
        };
        let lp = log_power(&spec);
        assert_eq!(lp[0], 0.0);
        assert!((lp[1] as f64 - 1e-10f64.ln()).abs() < 1e-4);
        assert!((lp[1] as f64 + 23.0259).abs() < 1e-4);
        assert!((lp[2] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn identical_channels_have_zero_phase_difference() {
        let x = sine(700.0, 2000, 0.0);
        let f = extract_features(&wave(vec![x.clone(), x])).unwrap();
        let b = f.bins;
        for c in 0..2 {
            for t in 0..f.frames {
                let row = f.phase_row(c, t);
                assert!(row[..b].iter().all(|&v| (v - 1.0).abs() < 1e-6));
                assert!(row[b..].iter().all(|&v| v.abs() < 1e-6));
            }
        }
    }

    #[test]
    fn one_sample_delay_rotates_quarter_band_by_quarter_turn() {
        // 4 kHz sits exactly on bin 128 where a one-sample delay is a
        // phase shift of 2*pi*128/512 = pi/2.
        let x1 = sine(4000.0, 2000, 0.0);
        let x2 = sine(4000.0, 2000, 1.0);
        let f = extract_features(&wave(vec![x1, x2])).unwrap();
        for t in 0..f.frames {
            let row = f.phase_row(0, t);
            assert!(row[128].abs() < 1e-5, "cos {}", row[128]);
            assert!((row[f.bins + 128] - 1.0).abs() < 1e-5, "sin {}", row[f.bins + 128]);
        }
    }

    #[test]
    fn swapping_channels_negates_sine() {
        let x1 = sine(1234.0, 1600, 0.0);
        let x2 = sine(1234.0, 1600, 2.5);
        let a = extract_features(&wave(vec![x1.clone(), x2.clone()])).unwrap();
        let b = extract_features(&wave(vec![x2, x1])).unwrap();
        let n = a.bins;
        for t in 0..a.frames {
            let (ra, rb) = (a.phase_row(0, t), b.phase_row(0, t));
            for k in 0..n {
                if a.amplitude_row(0, t)[k] > -10.0 {
                    assert!((ra[k] - rb[k]).abs() < 1e-5);
                    assert!((ra[n + k] + rb[n + k]).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn zero_signal_is_floored() {
        let f = extract_features(&wave(vec![vec![0.0; 1000], vec![0.0; 1000]])).unwrap();
        let floor = POWER_FLOOR.ln() as f32;
        assert!(f.amplitude.iter().all(|&v| v == floor));
        let b = f.bins;
        for row in f.phase.chunks(2 * b) {
            assert!(row[..b].iter().all(|&v| v == 1.0));
            assert!(row[b..].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn single_channel_spectrogram_is_rejected() {
        let mut s = stft(&wave(vec![vec![0.0; 400], vec![0.0; 400]])).unwrap();
        s.channels = 1;
        s.values.truncate(s.bins);
        assert!(matches!(ipd_features(&s), Err(Error::SingleChannel(1))));
        assert!(matches!(
            MultiChannelWave::new(vec![vec![0.0; 400]], 16_000, "x"),
            Err(Error::SingleChannel(1))
        ));
    }

    #[test]
    fn dump_round_trip() {
        let payload: Vec<f32> = (0..24).map(|i| i as f32 * 0.5 - 3.0).collect();
        let header = DumpHeader::new(vec![2, 3, 4]);
        let mut buf = Vec::new();
        write_dump(&mut buf, &header, &payload).unwrap();
        assert_eq!(&buf[..8], b"MCFEAT01");
        let (h, p) = read_dump(&mut buf.as_slice()).unwrap();
        assert_eq!(h, header);
        assert_eq!(p, payload);
    }

    #[test]
    fn normalization_uses_pooled_stats() {
        let x1 = sine(500.0, 1600, 0.0);
        let x2 = sine(900.0, 1600, 0.0);
        let f = extract_features(&wave(vec![x1, x2])).unwrap();
        let stats = FeatureStats::estimate([&f]);
        assert_eq!(stats.mean.len(), FEATURE_DIM);
        let n = stats.normalize(&f);
        let k = 10;
        let mean: f64 = (0..2)
            .flat_map(|c| (0..n.frames).map(move |t| (c, t)))
            .map(|(c, t)| n.amplitude_row(c, t)[k] as f64)
            .sum::<f64>()
            / (2 * n.frames) as f64;
        assert!(mean.abs() < 1e-4);
    }
}
