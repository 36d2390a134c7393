//! Synthetic coupled-modality episodes.
//!
//! A latent motion signal `m` (three seeded sinusoids at audio rate, zero
//! mean, unit RMS) drives every modality:
//!
//! * video frame `f` stores the `r` motion samples it owns along fixed
//!   orthonormal directions, so `m` is exactly recoverable from the video;
//! * speech is an envelope `(1 + tanh m)` along a fixed audio direction;
//! * sfx is an impulse along another audio direction at every peak of `m`.
//!
//! Class sets the per-element energy split between speech and sfx
//! (`2ρ/(1+ρ)` and `2/(1+ρ)`).

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::OnceLock;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dualstream::ConditionPair;
use crate::error::{Error, LabResult};
use crate::tensor::Tensor;

pub const MIN_FRAMES: usize = 8;
const BASIS_SEED: u64 = 0x5eed_ba51;
const COND_NOISE: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EpisodeClass {
    NarrationHeavy,
    SfxHeavy,
    Balanced,
}

impl EpisodeClass {
    pub const ALL: [EpisodeClass; 3] = [EpisodeClass::NarrationHeavy, EpisodeClass::SfxHeavy, EpisodeClass::Balanced];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Speech-to-sfx energy ratio.
    pub fn energy_ratio(self) -> f64 {
        match self {
            EpisodeClass::NarrationHeavy => 4.0,
            EpisodeClass::SfxHeavy => 0.25,
            EpisodeClass::Balanced => 1.0,
        }
    }

    /// Per-element mean-square energy of `(speech, sfx)`; the two sum to 2.
    pub fn energies(self) -> (f64, f64) {
        let rho = self.energy_ratio();
        (2.0 * rho / (1.0 + rho), 2.0 / (1.0 + rho))
    }

    pub fn name(self) -> &'static str {
        match self {
            EpisodeClass::NarrationHeavy => "NarrationHeavy",
            EpisodeClass::SfxHeavy => "SfxHeavy",
            EpisodeClass::Balanced => "Balanced",
        }
    }
}

impl fmt::Display for EpisodeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EpisodeClass {
    type Err = Error;

    fn from_str(s: &str) -> LabResult<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Domain(format!("unknown class {s:?}; expected NarrationHeavy, SfxHeavy or Balanced")))
    }
}

/// Sizes shared by every episode of a world.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub frames: usize,
    pub tokens_per_frame: usize,
    /// Feature width of both video frames and audio tokens.
    pub dim: usize,
    pub cond_dim: usize,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            frames: 16,
            tokens_per_frame: 2,
            dim: 32,
            cond_dim: 8,
        }
    }
}

impl WorldSpec {
    pub fn audio_len(&self) -> usize {
        self.frames * self.tokens_per_frame
    }

    fn validate(&self) -> LabResult<()> {
        if self.frames < MIN_FRAMES {
            return Err(Error::Domain(format!(
                "{} frames is too few for peak detection (need at least {MIN_FRAMES})",
                self.frames
            )));
        }
        if self.tokens_per_frame == 0 {
            return Err(Error::Domain("tokens_per_frame must be at least 1".into()));
        }
        if self.dim < self.tokens_per_frame.max(2) {
            return Err(Error::Domain(format!(
                "feature width {} cannot hold {} motion directions",
                self.dim, self.tokens_per_frame
            )));
        }
        if self.cond_dim < 6 {
            return Err(Error::Domain("cond_dim must be at least 6 to hold both class codes".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub class: EpisodeClass,
    /// `[F, dim]`
    pub video: Tensor,
    /// `[N, dim]`
    pub speech: Tensor,
    /// `[N, dim]`
    pub sfx: Tensor,
    pub cond: ConditionPair,
    /// Peaks of the motion signal, strictly increasing.
    pub onsets: Vec<usize>,
    /// Motion at audio rate, length `N`.
    pub motion: Vec<f64>,
}

impl Episode {
    pub fn frames(&self) -> usize {
        self.video.shape()[0]
    }

    pub fn audio_len(&self) -> usize {
        self.speech.shape()[0]
    }

    /// Speech plus sfx, the single-stream target.
    pub fn mixed_audio(&self) -> Tensor {
        self.speech.zip_map(&self.sfx, "mix", |a, b| a + b).expect("streams share a shape")
    }
}

/// Orthonormal rows of a seeded Gaussian matrix, by Gram-Schmidt.
fn orthonormal_basis(dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while rows.len() < dim {
        let mut v: Vec<f64> = Tensor::randn(&[dim], 1.0, &mut rng).into_data();
        for r in &rows {
            let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(r).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            rows.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    rows
}

type BasisCache = std::sync::Mutex<Vec<(usize, Vec<Vec<f64>>)>>;

fn basis(dim: usize) -> Vec<Vec<f64>> {
    static CACHE: OnceLock<BasisCache> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    let mut guard = cache.lock().expect("basis cache poisoned");
    if let Some((_, b)) = guard.iter().find(|(d, _)| *d == dim) {
        return b.clone();
    }
    let b = orthonormal_basis(dim, BASIS_SEED);
    guard.push((dim, b.clone()));
    b
}

/// Strict local maxima of `x`, endpoints excluded; a plateau counts once, at
/// its leftmost index, when both sides fall away.
pub fn find_peaks(x: &[f64]) -> Vec<usize> {
    let mut peaks = Vec::new();
    let n = x.len();
    let mut i = 1;
    while i + 1 < n {
        if x[i] > x[i - 1] {
            let mut j = i;
            while j + 1 < n && x[j + 1] == x[i] {
                j += 1;
            }
            if j + 1 < n && x[j + 1] < x[i] {
                peaks.push(i);
            }
            i = j + 1;
        } else {
            i += 1;
        }
    }
    peaks
}

fn motion_signal(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let components: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            let amp = rng.random_range(0.5..1.0);
            let cycles = rng.random_range(1.0..4.0);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            (amp, cycles, phase)
        })
        .collect();
    let mut m: Vec<f64> = (0..n)
        .map(|i| {
            components
                .iter()
                .map(|(a, c, p)| a * (std::f64::consts::TAU * c * i as f64 / n as f64 + p).sin())
                .sum()
        })
        .collect();
    let mean = m.iter().sum::<f64>() / n as f64;
    m.iter_mut().for_each(|v| *v -= mean);
    let rms = (m.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    m.iter_mut().for_each(|v| *v /= rms);
    m
}

/// Video features for a motion signal: frame `f` holds `m[f·r + j]` along
/// direction `j`, scaled so elements have unit mean square.
pub fn encode_video(motion: &[f64], spec: &WorldSpec) -> Tensor {
    let (r, d) = (spec.tokens_per_frame, spec.dim);
    let b = basis(d);
    let gain = (d as f64 / r as f64).sqrt();
    let mut data = vec![0.0; spec.frames * d];
    for f in 0..spec.frames {
        for j in 0..r {
            let m = motion[f * r + j] * gain;
            for k in 0..d {
                data[f * d + k] += m * b[j][k];
            }
        }
    }
    Tensor::new(vec![spec.frames, d], data).expect("sizes agree")
}

/// Invert [`encode_video`] by projecting onto the motion directions.
pub fn recover_motion(video: &Tensor, tokens_per_frame: usize) -> Vec<f64> {
    let (frames, d) = (video.shape()[0], video.shape()[1]);
    let r = tokens_per_frame;
    let b = basis(d);
    let gain = (d as f64 / r as f64).sqrt();
    let mut m = Vec::with_capacity(frames * r);
    for f in 0..frames {
        let row = &video.data()[f * d..(f + 1) * d];
        for dir in b.iter().take(r) {
            m.push(row.iter().zip(dir).map(|(a, b)| a * b).sum::<f64>() / gain);
        }
    }
    m
}

fn conditions(class: EpisodeClass, cond_dim: usize, rng: &mut ChaCha8Rng) -> ConditionPair {
    let code = |slot: usize, rng: &mut ChaCha8Rng| {
        let mut v = Tensor::randn(&[cond_dim], COND_NOISE, rng);
        v.data_mut()[slot] += 1.0;
        v
    };
    let c_s = code(class.index(), rng);
    let c_a = code(3 + class.index(), rng);
    ConditionPair { c_s, c_a }
}

/// Generate one episode with the default feature widths.
pub fn generate_episode(seed: u64, frames: usize, tokens_per_frame: usize, class: EpisodeClass) -> LabResult<Episode> {
    let spec = WorldSpec {
        frames,
        tokens_per_frame,
        ..WorldSpec::default()
    };
    generate_episode_with(&spec, seed, class)
}

pub fn generate_episode_with(spec: &WorldSpec, seed: u64, class: EpisodeClass) -> LabResult<Episode> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.audio_len();
    let d = spec.dim;
    // Redraw in the rare case a draw has no interior peak.
    let (motion, onsets) = loop {
        let m = motion_signal(n, &mut rng);
        let peaks = find_peaks(&m);
        if !peaks.is_empty() {
            break (m, peaks);
        }
    };
    let b = basis(d);
    let (speech_dir, sfx_dir) = (&b[d - 1], &b[d - 2]);
    let (e_sp, e_sfx) = class.energies();

    let envelope: Vec<f64> = motion.iter().map(|v| 1.0 + v.tanh()).collect();
    // Unit-norm directions: the mean square over all N·d elements is Σ amp² / (N·d).
    let sp_gain = (e_sp * (n * d) as f64 / envelope.iter().map(|e| e * e).sum::<f64>()).sqrt();
    let sfx_amp = (e_sfx * (n * d) as f64 / onsets.len() as f64).sqrt();

    let speech = Tensor::from_fn(&[n, d], |i| sp_gain * envelope[i / d] * speech_dir[i % d]);
    let mut sfx = Tensor::zeros(&[n, d]);
    for &t in &onsets {
        for (x, dir) in sfx.data_mut()[t * d..(t + 1) * d].iter_mut().zip(sfx_dir.iter()) {
            *x = sfx_amp * dir;
        }
    }
    let cond = conditions(class, spec.cond_dim, &mut rng);
    Ok(Episode {
        class,
        video: encode_video(&motion, spec),
        speech,
        sfx,
        cond,
        onsets,
        motion,
    })
}

/// Per-token mean-square energy of a `[N, dim]` tensor.
pub fn token_energy(x: &Tensor) -> Vec<f64> {
    let d = x.shape()[1];
    x.data()
        .chunks(d)
        .map(|row| row.iter().map(|v| v * v).sum::<f64>() / d as f64)
        .collect()
}

/// Tokens whose energy exceeds `threshold` and is a local maximum, with
/// out-of-range neighbours taken as zero. Plateaus report their leftmost index.
pub fn onset_times(sfx: &Tensor, threshold: f64) -> Vec<usize> {
    let e = token_energy(sfx);
    let at = |i: isize| if i < 0 || i as usize >= e.len() { 0.0 } else { e[i as usize] };
    (0..e.len())
        .filter(|&i| {
            let i = i as isize;
            e[i as usize] > threshold && e[i as usize] > at(i - 1) && e[i as usize] >= at(i + 1)
        })
        .collect()
}

/// Onsets of a clean sfx track: every nonzero impulse.
fn clean_onsets(sfx: &Tensor) -> Vec<usize> {
    let peak = token_energy(sfx).into_iter().fold(0.0, f64::max);
    if peak > 0.0 {
        onset_times(sfx, 0.5 * peak)
    } else {
        Vec::new()
    }
}

/// A list of episodes sharing one [`WorldSpec`].
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: WorldSpec,
    pub episodes: Vec<Episode>,
}

impl Dataset {
    /// `count` episodes with classes cycling through [`EpisodeClass::ALL`].
    pub fn generate(spec: WorldSpec, seed: u64, count: usize) -> LabResult<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let episodes = (0..count)
            .map(|i| {
                let class = EpisodeClass::ALL[i % 3];
                generate_episode_with(&spec, rng.random(), class)
            })
            .collect::<LabResult<_>>()?;
        Ok(Self { spec, episodes })
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        let s = &self.spec;
        for v in [s.frames, s.tokens_per_frame, s.dim, s.dim, s.cond_dim, self.episodes.len()] {
            w.write_u32::<LittleEndian>(v as u32)?;
        }
        for ep in &self.episodes {
            w.write_f32::<LittleEndian>(ep.class.index() as f32)?;
            for t in [&ep.video, &ep.speech, &ep.sfx, &ep.cond.c_s, &ep.cond.c_a] {
                for &v in t.data() {
                    w.write_f32::<LittleEndian>(v as f32)?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> LabResult<Self> {
        let io = |e: std::io::Error| Error::Format(format!("truncated dataset: {e}"));
        let mut header = [0usize; 6];
        for h in &mut header {
            *h = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        }
        let [frames, tokens_per_frame, dim_v, dim_a, cond_dim, count] = header;
        if dim_v != dim_a {
            return Err(Error::Format(format!("video width {dim_v} differs from audio width {dim_a}")));
        }
        let spec = WorldSpec {
            frames,
            tokens_per_frame,
            dim: dim_v,
            cond_dim,
        };
        spec.validate().map_err(|e| Error::Format(e.to_string()))?;
        let n = spec.audio_len();
        let mut read = |shape: &[usize]| -> LabResult<Tensor> {
            let len: usize = shape.iter().product();
            let mut data = vec![0.0; len];
            for v in &mut data {
                *v = f64::from(r.read_f32::<LittleEndian>().map_err(io)?);
            }
            Ok(Tensor::new(shape.to_vec(), data)?)
        };
        let mut episodes = Vec::with_capacity(count);
        for _ in 0..count {
            let class_code = read(&[1])?.item();
            let class = EpisodeClass::from_index(class_code as usize)
                .filter(|_| class_code.fract() == 0.0)
                .ok_or_else(|| Error::Format(format!("bad class code {class_code}")))?;
            let video = read(&[frames, spec.dim])?;
            let speech = read(&[n, spec.dim])?;
            let sfx = read(&[n, spec.dim])?;
            let c_s = read(&[cond_dim])?;
            let c_a = read(&[cond_dim])?;
            let onsets = clean_onsets(&sfx);
            let motion = recover_motion(&video, tokens_per_frame);
            episodes.push(Episode {
                class,
                video,
                speech,
                sfx,
                cond: ConditionPair { c_s, c_a },
                onsets,
                motion,
            });
        }
        Ok(Self { spec, episodes })
    }

    pub fn save(&self, path: &Path) -> LabResult<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> LabResult<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut std::io::BufReader::new(file))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Brute-force peak scan: look left past nothing, right past equal values.
    fn peaks_oracle(x: &[f64]) -> Vec<usize> {
        let mut out = Vec::new();
        for i in 1..x.len().saturating_sub(1) {
            if x[i] <= x[i - 1] {
                continue;
            }
            let next = x[i + 1..].iter().find(|&&v| v != x[i]);
            if let Some(&v) = next {
                let last_equal = x[i + 1..].iter().position(|&v| v != x[i]).unwrap() + i;
                if v < x[i] && last_equal + 1 < x.len() {
                    out.push(i);
                }
            }
        }
        out
    }

    #[test]
    fn peak_cases() {
        assert_eq!(find_peaks(&[0.0, 1.0, 0.0]), vec![1]);
        assert_eq!(find_peaks(&[0.0, 1.0, 1.0, 0.0]), vec![1]);
        assert_eq!(find_peaks(&[0.0, 1.0, 1.0]), Vec::<usize>::new());
        assert_eq!(find_peaks(&[2.0, 1.0, 0.0]), Vec::<usize>::new());
        assert_eq!(find_peaks(&[0.0, 2.0, 1.0, 3.0, 0.0]), vec![1, 3]);
    }

    #[test]
    fn short_episodes_are_rejected() {
        assert!(matches!(generate_episode(0, 7, 2, EpisodeClass::Balanced), Err(Error::Domain(_))));
        assert!(generate_episode(0, 8, 2, EpisodeClass::Balanced).is_ok());
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_episode(42, 16, 2, EpisodeClass::SfxHeavy).unwrap();
        let b = generate_episode(42, 16, 2, EpisodeClass::SfxHeavy).unwrap();
        assert_eq!(a, b);
        let c = generate_episode(43, 16, 2, EpisodeClass::SfxHeavy).unwrap();
        assert_ne!(a.motion, c.motion);
    }

    #[test]
    fn episode_shapes_and_onset_contract() {
        for seed in 0..50 {
            let ep = generate_episode(seed, 16, 2, EpisodeClass::ALL[seed as usize % 3]).unwrap();
            let n = 32;
            assert_eq!(ep.video.shape(), &[16, 32]);
            assert_eq!(ep.speech.shape(), &[n, 32]);
            assert_eq!(ep.sfx.shape(), &[n, 32]);
            assert!(!ep.onsets.is_empty());
            assert!(ep.onsets.windows(2).all(|w| w[0] < w[1]));
            assert!(ep.onsets.iter().all(|&o| o < n));
            assert_eq!(ep.onsets, peaks_oracle(&ep.motion));
        }
    }

    #[test]
    fn motion_is_recoverable_from_video() {
        let ep = generate_episode(7, 12, 3, EpisodeClass::Balanced).unwrap();
        let m = recover_motion(&ep.video, 3);
        let err = m.iter().zip(&ep.motion).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-12, "{err}");
        assert!((ep.video.mean_square() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sfx_onsets_coincide_with_motion_peaks() {
        for seed in 0..50 {
            let ep = generate_episode(seed, 16, 2, EpisodeClass::Balanced).unwrap();
            assert_eq!(clean_onsets(&ep.sfx), ep.onsets);
            assert_eq!(find_peaks(&recover_motion(&ep.video, 2)), ep.onsets);
        }
    }

    #[test]
    fn class_energy_ratios() {
        for class in EpisodeClass::ALL {
            let (mut sp, mut sfx) = (0.0, 0.0);
            for seed in 0..100 {
                let ep = generate_episode(seed, 16, 2, class).unwrap();
                sp += ep.speech.mean_square();
                sfx += ep.sfx.mean_square();
            }
            let ratio = sp / sfx;
            assert!((ratio / class.energy_ratio() - 1.0).abs() < 0.05, "{class}: {ratio}");
        }
    }

    #[test]
    fn onset_time_cases() {
        let z = Tensor::zeros(&[16, 4]);
        assert!(onset_times(&z, 0.1).is_empty());
        let mut one = Tensor::zeros(&[16, 4]);
        one.data_mut()[7 * 4] = 1.0;
        assert_eq!(onset_times(&one, 0.1), vec![7]);
        let mut edge = Tensor::zeros(&[16, 4]);
        edge.data_mut()[0] = 1.0;
        assert_eq!(onset_times(&edge, 0.1), vec![0]);
    }

    #[test]
    fn conditions_encode_class() {
        for class in EpisodeClass::ALL {
            let ep = generate_episode(3, 16, 2, class).unwrap();
            let argmax = |t: &Tensor| {
                t.data()
                    .iter()
                    .enumerate()
                    .fold((0, f64::MIN), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
                    .0
            };
            assert_eq!(argmax(&ep.cond.c_s), class.index());
            assert_eq!(argmax(&ep.cond.c_a), 3 + class.index());
        }
    }

    #[test]
    fn class_names_parse() {
        for class in EpisodeClass::ALL {
            assert_eq!(class.name().parse::<EpisodeClass>().unwrap(), class);
        }
        assert!("Music".parse::<EpisodeClass>().is_err());
    }

    #[test]
    fn dataset_round_trip() {
        let ds = Dataset::generate(WorldSpec::default(), 5, 6).unwrap();
        let mut buf = Vec::new();
        ds.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 24 + 6 * 4 * (1 + 16 * 32 + 2 * 32 * 32 + 16));
        let back = Dataset::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back.spec, ds.spec);
        for (a, b) in ds.episodes.iter().zip(&back.episodes) {
            assert_eq!(a.class, b.class);
            assert_eq!(a.onsets, b.onsets);
            assert!(a.video.max_abs_diff(&b.video) < 1e-6);
            assert!(a.sfx.max_abs_diff(&b.sfx) < 1e-5);
            assert!(a.cond.c_s.max_abs_diff(&b.cond.c_s) < 1e-7);
        }
        assert!(Dataset::read_from(&mut &buf[..buf.len() - 3]).is_err());
    }

    proptest! {
        #[test]
        fn peak_finder_matches_oracle(x in prop::collection::vec(-3i8..3, 0..40)) {
            let x: Vec<f64> = x.into_iter().map(f64::from).collect();
            prop_assert_eq!(find_peaks(&x), peaks_oracle(&x));
        }
    }
}
