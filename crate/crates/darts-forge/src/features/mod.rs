//! MFCC extraction, speed/volume perturbation, simplified speaker vectors,
//! and feature-archive I/O.

use std::collections::HashMap;
use std::io::{Read as _, Seek, SeekFrom, Write as _};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2, Axis};
use rustfft::{num_complex::Complex, FftPlanner};
use thiserror::Error;

use crate::corpus::{Audio, Utterance};

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("signal too short: {got} samples, window needs {need}")]
    TooShort { got: usize, need: usize },
    #[error("non-positive perturbation factor")]
    NonPositiveFactor,
    #[error("speaker vector dim {d_spk} exceeds feature dim {dim}")]
    SpeakerDimTooLarge { d_spk: usize, dim: usize },
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("utterance carries features, not a waveform")]
    NotWaveform,
    #[error("archive error: {0}")]
    Archive(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct FeatureMatrix {
    /// T x D.
    pub frames: Array2<f64>,
    pub frame_shift_ms: f64,
    pub frame_length_ms: f64,
}

#[derive(Debug, Clone)]
pub struct SpeakerVector {
    pub speaker_id: String,
    pub values: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct MfccConfig {
    pub sample_rate: u32,
    pub n_mels: usize,
    pub n_ceps: usize,
    pub window_ms: f64,
    pub hop_ms: f64,
    pub pre_emphasis: f64,
    /// Floor applied before the log, for silence robustness.
    pub log_floor: f64,
}

impl Default for MfccConfig {
    fn default() -> Self {
        MfccConfig {
            sample_rate: 16000,
            n_mels: 40,
            n_ceps: 40,
            window_ms: 25.0,
            hop_ms: 10.0,
            pre_emphasis: 0.97,
            log_floor: 1e-10,
        }
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filterbank over FFT bins 0..=n_fft/2.
fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: f64) -> Array2<f64> {
    let n_bins = n_fft / 2 + 1;
    let mel_lo = hz_to_mel(20.0);
    let mel_hi = hz_to_mel(sample_rate / 2.0);
    let centers: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let mut bank = Array2::<f64>::zeros((n_mels, n_bins));
    for m in 0..n_mels {
        let (lo, mid, hi) = (centers[m], centers[m + 1], centers[m + 2]);
        for b in 0..n_bins {
            let freq = b as f64 * sample_rate / n_fft as f64;
            if freq > lo && freq < mid {
                bank[[m, b]] = (freq - lo) / (mid - lo);
            } else if freq >= mid && freq < hi {
                bank[[m, b]] = (hi - freq) / (hi - mid);
            }
        }
    }
    bank
}

/// Pre-emphasis -> Hamming window -> FFT power -> mel filterbank -> floored
/// log -> DCT-II, keeping `n_ceps` coefficients.
pub fn compute_mfcc(u: &Utterance, cfg: &MfccConfig) -> Result<FeatureMatrix, FeatureError> {
    let (samples, _rate) = match &u.audio {
        Audio::Waveform {
            samples,
            sample_rate,
        } => (samples, *sample_rate),
        Audio::Features(_) => return Err(FeatureError::NotWaveform),
    };
    let win = (cfg.window_ms * cfg.sample_rate as f64 / 1000.0).round() as usize;
    let hop = (cfg.hop_ms * cfg.sample_rate as f64 / 1000.0).round() as usize;
    if samples.len() < win {
        return Err(FeatureError::TooShort {
            got: samples.len(),
            need: win,
        });
    }
    let t = (samples.len() - win) / hop + 1;
    let n_fft = win.next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n_fft);
    let bank = mel_filterbank(cfg.n_mels, n_fft, cfg.sample_rate as f64);
    let hamming: Vec<f64> = (0..win)
        .map(|n| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / (win - 1) as f64).cos())
        .collect();
    let n_ceps = cfg.n_ceps.min(cfg.n_mels);

    let mut out = Array2::<f64>::zeros((t, n_ceps));
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    for fi in 0..t {
        let frame = &samples[fi * hop..fi * hop + win];
        // Per-frame pre-emphasis with the first sample duplicated, so
        // identical windows produce identical frames regardless of position.
        for (n, slot) in buf.iter_mut().enumerate().take(n_fft) {
            if n < win {
                let prev = if n == 0 { frame[0] } else { frame[n - 1] };
                *slot = Complex::new((frame[n] - cfg.pre_emphasis * prev) * hamming[n], 0.0);
            } else {
                *slot = Complex::new(0.0, 0.0);
            }
        }
        fft.process(&mut buf);
        let n_bins = n_fft / 2 + 1;
        let power: Vec<f64> = buf[..n_bins].iter().map(|c| c.norm_sqr()).collect();
        let mut log_mel = vec![0.0; cfg.n_mels];
        for m in 0..cfg.n_mels {
            let mut e = 0.0;
            for b in 0..n_bins {
                e += bank[[m, b]] * power[b];
            }
            log_mel[m] = e.max(cfg.log_floor).ln();
        }
        // Orthonormal DCT-II.
        for k in 0..n_ceps {
            let mut c = 0.0;
            for (m, v) in log_mel.iter().enumerate() {
                c += v
                    * (std::f64::consts::PI * k as f64 * (2 * m + 1) as f64
                        / (2 * cfg.n_mels) as f64)
                        .cos();
            }
            let norm = if k == 0 {
                (1.0 / cfg.n_mels as f64).sqrt()
            } else {
                (2.0 / cfg.n_mels as f64).sqrt()
            };
            out[[fi, k]] = c * norm;
        }
    }
    Ok(FeatureMatrix {
        frames: out,
        frame_shift_ms: cfg.hop_ms,
        frame_length_ms: cfg.window_ms,
    })
}

/// Speed and volume perturbation. Speed resamples by linear interpolation to
/// `round(N / speed)` samples (or frames); volume scales amplitudes. The new
/// id carries the factors as a suffix.
pub fn perturb(u: &Utterance, speed: f64, volume: f64) -> Result<Utterance, FeatureError> {
    if speed <= 0.0 || volume <= 0.0 {
        return Err(FeatureError::NonPositiveFactor);
    }
    let id = format!("{}-sp{:.2}-vp{:.2}", u.id, speed, volume);
    let audio = match &u.audio {
        Audio::Waveform {
            samples,
            sample_rate,
        } => {
            let n_out = (samples.len() as f64 / speed).round() as usize;
            let resampled = resample_linear(samples, n_out);
            Audio::Waveform {
                samples: resampled.into_iter().map(|v| v * volume).collect(),
                sample_rate: *sample_rate,
            }
        }
        Audio::Features(frames) => {
            let n_out = (frames.nrows() as f64 / speed).round() as usize;
            let d = frames.ncols();
            let mut out = Array2::<f64>::zeros((n_out, d));
            for k in 0..d {
                let col: Vec<f64> = frames.column(k).to_vec();
                let res = resample_linear(&col, n_out);
                for (t, v) in res.into_iter().enumerate() {
                    out[[t, k]] = v * volume;
                }
            }
            Audio::Features(out)
        }
    };
    Ok(Utterance {
        id,
        speaker_id: u.speaker_id.clone(),
        audio,
        transcript: u.transcript.clone(),
    })
}

fn resample_linear(x: &[f64], n_out: usize) -> Vec<f64> {
    if n_out == 0 || x.is_empty() {
        return Vec::new();
    }
    if n_out == 1 || x.len() == 1 {
        return vec![x[0]; n_out];
    }
    let scale = (x.len() - 1) as f64 / (n_out - 1) as f64;
    (0..n_out)
        .map(|i| {
            let pos = i as f64 * scale;
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(x.len() - 1);
            let frac = pos - lo as f64;
            x[lo] * (1.0 - frac) + x[hi] * frac
        })
        .collect()
}

/// Simplified per-speaker vector: the speaker's mean frame, centered by the
/// global mean, projected onto the top principal directions of the speaker
/// means. Stands in for i-vectors at desk scale.
pub fn speaker_vector(
    frames_by_speaker: &HashMap<String, Vec<Array2<f64>>>,
    d_spk: usize,
) -> Result<HashMap<String, SpeakerVector>, FeatureError> {
    let dim = frames_by_speaker
        .values()
        .flatten()
        .next()
        .map(|m| m.ncols())
        .ok_or_else(|| FeatureError::DimMismatch("no speakers".into()))?;
    if d_spk > dim {
        return Err(FeatureError::SpeakerDimTooLarge { d_spk, dim });
    }
    let mut speakers: Vec<&String> = frames_by_speaker.keys().collect();
    speakers.sort();
    let mut means = Array2::<f64>::zeros((speakers.len(), dim));
    for (i, spk) in speakers.iter().enumerate() {
        let mats = &frames_by_speaker[*spk];
        let mut sum = Array1::<f64>::zeros(dim);
        let mut count = 0usize;
        for m in mats {
            sum += &m.sum_axis(Axis(0));
            count += m.nrows();
        }
        if count == 0 {
            return Err(FeatureError::DimMismatch(format!(
                "speaker {spk} has no frames"
            )));
        }
        means.row_mut(i).assign(&(sum / count as f64));
    }
    let global = means.mean_axis(Axis(0)).unwrap();
    let centered = &means - &global.view().insert_axis(Axis(0));
    // Covariance of speaker means.
    let mut cov = Array2::<f64>::zeros((dim, dim));
    for row in centered.rows() {
        for a in 0..dim {
            for b in 0..dim {
                cov[[a, b]] += row[a] * row[b];
            }
        }
    }
    cov /= speakers.len().max(1) as f64;
    let (_vals, vecs) = symmetric_eig(&cov);
    let mut out = HashMap::new();
    for (i, spk) in speakers.iter().enumerate() {
        let mut v = Array1::<f64>::zeros(d_spk);
        for k in 0..d_spk {
            v[k] = centered.row(i).dot(&vecs.column(k));
        }
        out.insert(
            (*spk).clone(),
            SpeakerVector {
                speaker_id: (*spk).clone(),
                values: v,
            },
        );
    }
    Ok(out)
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// eigenvalues in descending order and matching eigenvector columns.
pub fn symmetric_eig(m: &Array2<f64>) -> (Vec<f64>, Array2<f64>) {
    let n = m.nrows();
    let mut a = m.clone();
    let mut v = Array2::<f64>::eye(n);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += a[[i, j]] * a[[i, j]];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if a[[p, q]].abs() < 1e-30 {
                    continue;
                }
                let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * a[[p, q]]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[[k, p]];
                    let akq = a[[k, q]];
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[[p, k]];
                    let aqk = a[[q, k]];
                    a[[p, k]] = c * apk - s * aqk;
                    a[[q, k]] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[[j, j]].total_cmp(&a[[i, i]]));
    let vals: Vec<f64> = order.iter().map(|&i| a[[i, i]]).collect();
    let mut vecs = Array2::<f64>::zeros((n, n));
    for (col, &i) in order.iter().enumerate() {
        vecs.column_mut(col).assign(&v.column(i));
    }
    (vals, vecs)
}

/// Append the speaker vector to every frame: output dim = D + d_spk.
pub fn assemble_inputs(f: &FeatureMatrix, s: &SpeakerVector) -> FeatureMatrix {
    let (t, d) = (f.frames.nrows(), f.frames.ncols());
    let d_spk = s.values.len();
    let mut out = Array2::<f64>::zeros((t, d + d_spk));
    for ti in 0..t {
        for k in 0..d {
            out[[ti, k]] = f.frames[[ti, k]];
        }
        for k in 0..d_spk {
            out[[ti, d + k]] = s.values[k];
        }
    }
    FeatureMatrix {
        frames: out,
        frame_shift_ms: f.frame_shift_ms,
        frame_length_ms: f.frame_length_ms,
    }
}

/// Binary feature archive: per-utterance records `id, T, D, row-major f32`,
/// little-endian, with a plain-text index file (`id<TAB>offset` lines).
pub struct FeatureArchive;

impl FeatureArchive {
    pub fn write(
        path: &Path,
        items: impl Iterator<Item = (String, Array2<f64>)>,
    ) -> Result<(), FeatureError> {
        let mut file = std::fs::File::create(path)?;
        let mut index = String::new();
        let mut offset = 0u64;
        for (id, mat) in items {
            index.push_str(&format!("{id}\t{offset}\n"));
            let bytes = id.as_bytes();
            file.write_u32::<LittleEndian>(bytes.len() as u32)?;
            file.write_all(bytes)?;
            file.write_u32::<LittleEndian>(mat.nrows() as u32)?;
            file.write_u32::<LittleEndian>(mat.ncols() as u32)?;
            for v in mat.iter() {
                file.write_f32::<LittleEndian>(*v as f32)?;
            }
            offset += 4 + bytes.len() as u64 + 8 + (mat.len() as u64) * 4;
        }
        std::fs::write(path.with_extension("idx"), index)?;
        Ok(())
    }

    pub fn read_all(path: &Path) -> Result<Vec<(String, Array2<f64>)>, FeatureError> {
        let mut file = std::fs::File::open(path)?;
        let mut out = Vec::new();
        loop {
            let id_len = match file.read_u32::<LittleEndian>() {
                Ok(v) => v as usize,
                Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
                Err(e) => return Err(e.into()),
            };
            let mut id_bytes = vec![0u8; id_len];
            file.read_exact(&mut id_bytes)?;
            let id = String::from_utf8(id_bytes)
                .map_err(|_| FeatureError::Archive("bad utf-8 id".into()))?;
            let t = file.read_u32::<LittleEndian>()? as usize;
            let d = file.read_u32::<LittleEndian>()? as usize;
            let mut data = Vec::with_capacity(t * d);
            for _ in 0..t * d {
                data.push(file.read_f32::<LittleEndian>()? as f64);
            }
            out.push((
                id,
                Array2::from_shape_vec((t, d), data)
                    .map_err(|e| FeatureError::Archive(e.to_string()))?,
            ));
        }
        Ok(out)
    }

    /// Random access through the index file.
    pub fn read_one(path: &Path, id: &str) -> Result<Array2<f64>, FeatureError> {
        let index = std::fs::read_to_string(path.with_extension("idx"))?;
        let offset = index
            .lines()
            .find_map(|l| {
                let (lid, off) = l.split_once('\t')?;
                (lid == id).then(|| off.parse::<u64>().ok())?
            })
            .ok_or_else(|| FeatureError::Archive(format!("id {id} not in index")))?;
        let mut file = std::fs::File::open(path)?;
        file.seek(SeekFrom::Start(offset))?;
        let id_len = file.read_u32::<LittleEndian>()? as usize;
        let mut id_bytes = vec![0u8; id_len];
        file.read_exact(&mut id_bytes)?;
        let t = file.read_u32::<LittleEndian>()? as usize;
        let d = file.read_u32::<LittleEndian>()? as usize;
        let mut data = Vec::with_capacity(t * d);
        for _ in 0..t * d {
            data.push(file.read_f32::<LittleEndian>()? as f64);
        }
        Array2::from_shape_vec((t, d), data).map_err(|e| FeatureError::Archive(e.to_string()))
    }
}
